"""Dual positive/negative key-value cache and static dense knowledge retrieval.

Keys are clustered prototype features pooled from single-class samples; values
are class-label rows weighted by text similarity. Retrieval scores every patch
query against the cache and folds the result back into the patch-text CAM.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .cam import Cam, PseudoMask, minmax_norm
from .errors import (
    EmptyRegion,
    IoFailure,
    ShapeMismatch,
    TooFewPoints,
    UsageError,
    ZeroNormVector,
)

NEG_MODES = ("complement", "literal")


@dataclass
class RetrievalConfig:
    centroids_per_class: int = 10
    cache_weight: float = 0.5  # fusion weight on the retrieved CAM
    sharpness: float = 5.0  # activation steepness on cosine affinities
    neg_mode: str = "complement"
    seed: int = 0

    def __post_init__(self):
        if self.centroids_per_class < 1:
            raise UsageError(f"centroids_per_class must be >= 1, got {self.centroids_per_class}")
        if self.cache_weight < 0:
            raise UsageError(f"cache_weight must be >= 0, got {self.cache_weight}")
        if not self.sharpness > 0:
            raise UsageError(f"sharpness must be > 0, got {self.sharpness}")
        if self.neg_mode not in NEG_MODES:
            raise UsageError(f"neg_mode must be one of {NEG_MODES}, got {self.neg_mode!r}")


@dataclass
class PrototypeSet:
    """Pooled feature vectors: one list per foreground class plus background."""

    foreground: list  # C lists of (D,) vectors
    background: list = field(default_factory=list)

    @classmethod
    def empty(cls, num_classes):
        return cls(foreground=[[] for _ in range(num_classes)], background=[])


@dataclass
class CacheModel:
    keys: np.ndarray  # (U, D) float64, rows unit L2 norm
    values: np.ndarray  # (U, C+1) float64, one nonzero per row
    provenance: np.ndarray  # (U,) int64 class index; C denotes background
    num_classes: int
    centroids_per_class: int

    @property
    def counts(self):
        c, e = self.num_classes, self.centroids_per_class
        return {"pos_rows": c * e, "neg_rows": e, "total_rows": int(self.keys.shape[0])}

    def save(self, directory, config_echo=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        tensorio.write_tensor(self.keys.astype(np.float32), directory / "keys.cft")
        tensorio.write_tensor(self.values.astype(np.float32), directory / "values.cft")
        tensorio.write_tensor(self.provenance.astype(np.uint32), directory / "provenance.cft")
        sidecar = {
            "num_classes": self.num_classes,
            "centroids_per_class": self.centroids_per_class,
            "counts": self.counts,
        }
        if config_echo is not None:
            sidecar["config"] = config_echo
            sidecar["config_sha256"] = hashlib.sha256(
                json.dumps(config_echo, sort_keys=True).encode()
            ).hexdigest()
        (directory / "cache.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            sidecar = json.loads((directory / "cache.json").read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read cache sidecar in {directory}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise IoFailure(f"malformed cache sidecar in {directory}: {exc}") from exc
        return cls(
            keys=tensorio.load_tensor(directory / "keys.cft").astype(np.float64),
            values=tensorio.load_tensor(directory / "values.cft").astype(np.float64),
            provenance=tensorio.load_tensor(directory / "provenance.cft").astype(np.int64),
            num_classes=sidecar["num_classes"],
            centroids_per_class=sidecar["centroids_per_class"],
        )


def normalize_rows(x, what="vector"):
    """L2-normalize rows, raising if any row has zero norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.nonzero(norms == 0)[0]
    if len(bad):
        raise ZeroNormVector(f"{what} {int(bad[0])} has zero norm")
    return x / norms[:, None]


def mask_average_pool(features: np.ndarray, mask: PseudoMask, class_index=None) -> np.ndarray:
    """Mean feature over a mask region: a foreground class or the background.

    ``class_index`` of None selects background pixels (label 0); class c
    selects pixels labeled c + 1. Raises EmptyRegion when nothing matches.
    """
    features = np.asarray(features, dtype=np.float64)
    h, w, _ = features.shape
    if mask.labels.shape != (h, w):
        raise ShapeMismatch(f"mask shape {mask.labels.shape} does not match features ({h}, {w})")
    wanted = 0 if class_index is None else class_index + 1
    sel = mask.labels == wanted
    if not sel.any():
        name = "background" if class_index is None else f"class {class_index}"
        raise EmptyRegion(f"mask selects no {name} pixels")
    return features[sel].mean(axis=0)


def kmeans(points, k: int, seed: int) -> np.ndarray:
    """Plain Lloyd k-means with seeded k-means++ initialization.

    Euclidean distance, at most 300 rounds, stopping when the relative change
    in inertia drops below 1e-6. Empty clusters keep their previous centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise UsageError(f"points must be a 2-d array, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise UsageError(f"k must be >= 1, got {k}")
    if n < k:
        raise TooFewPoints(f"need at least {k} points for {k} centroids, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centroids[j] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1))

    prev_inertia = None
    for _ in range(300):
        dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        inertia = float(dists[np.arange(n), labels].sum())
        for g in range(k):
            members = points[labels == g]
            if len(members):
                centroids[g] = members.mean(axis=0)
        if prev_inertia is not None:
            denom = max(prev_inertia, 1e-300)
            if abs(prev_inertia - inertia) / denom < 1e-6:
                break
        prev_inertia = inertia
    return centroids


def _pad_to(points, count):
    # duplicate-pad small prototype pools so k-means can still run
    reps = [points[i % len(points)] for i in range(count)]
    return np.asarray(reps)


def build_keys(protos: PrototypeSet, cfg: RetrievalConfig):
    """Cluster prototypes per class into centroids and L2-normalize the rows.

    Returns (positive keys (C*E, D), negative keys (E, D)). Classes with fewer
    than E prototypes are duplicate-padded first; a class with none is an error.
    """
    e = cfg.centroids_per_class
    blocks = []
    for y, pool in enumerate(protos.foreground):
        if len(pool) == 0:
            raise TooFewPoints(f"class {y} has no prototypes")
        pts = np.asarray(pool, dtype=np.float64)
        if len(pts) < e:
            pts = _pad_to(pts, e)
        blocks.append(kmeans(pts, e, seed=cfg.seed + y))
    k_pos = normalize_rows(np.vstack(blocks), what="positive key")
    if len(protos.background) == 0:
        raise TooFewPoints("background has no prototypes")
    bg = np.asarray(protos.background, dtype=np.float64)
    if len(bg) < e:
        bg = _pad_to(bg, e)
    k_neg = normalize_rows(kmeans(bg, e, seed=cfg.seed + len(protos.foreground)), what="negative key")
    return k_pos, k_neg


def build_values(k_pos: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Text-weighted one-hot value rows for the positive keys.

    Key rows arrive in class-major order, E per class. Each row's one-hot
    label (over C+1 columns, background last) is scaled by that row's softmax
    similarity to its own class text embedding.
    """
    text = np.asarray(text, dtype=np.float64)
    c = text.shape[1]
    total = k_pos.shape[0]
    if total % c:
        raise ShapeMismatch(f"{total} key rows do not divide into {c} classes")
    e = total // c
    sims = k_pos @ text  # (C*E, C)
    shifted = sims - sims.max(axis=1, keepdims=True)
    soft = np.exp(shifted)
    soft /= soft.sum(axis=1, keepdims=True)
    v_pos = np.zeros((total, c + 1))
    owner = np.repeat(np.arange(c), e)
    v_pos[np.arange(total), owner] = soft[np.arange(total), owner]
    return v_pos


def negative_values(count: int, num_classes: int) -> np.ndarray:
    """Plain one-hot background rows; text weighting does not apply here."""
    v = np.zeros((count, num_classes + 1))
    v[:, num_classes] = 1.0
    return v


def assemble_cache(k_pos, v_pos, k_neg, v_neg) -> CacheModel:
    """Stack positive rows (class order) then background rows, with provenance."""
    k_pos, v_pos = np.asarray(k_pos, float), np.asarray(v_pos, float)
    k_neg, v_neg = np.asarray(k_neg, float), np.asarray(v_neg, float)
    if k_pos.shape[0] != v_pos.shape[0] or k_neg.shape[0] != v_neg.shape[0]:
        raise ShapeMismatch("key and value row counts differ")
    if k_pos.shape[1] != k_neg.shape[1] or v_pos.shape[1] != v_neg.shape[1]:
        raise ShapeMismatch("positive and negative blocks have inconsistent widths")
    c = v_pos.shape[1] - 1
    if k_pos.shape[0] % c:
        raise ShapeMismatch(f"{k_pos.shape[0]} positive rows do not divide into {c} classes")
    e = k_pos.shape[0] // c
    provenance = np.concatenate([np.repeat(np.arange(c), e), np.full(k_neg.shape[0], c)])
    return CacheModel(
        keys=np.vstack([k_pos, k_neg]),
        values=np.vstack([v_pos, v_neg]),
        provenance=provenance.astype(np.int64),
        num_classes=c,
        centroids_per_class=e,
    )


def retrieval_scores(queries: np.ndarray, cache: CacheModel, sharpness: float) -> np.ndarray:
    """Raw retrieval scores for unit-normalized queries: activation times values."""
    affinity = queries @ cache.keys.T
    return np.exp(-sharpness * (1.0 - affinity)) @ cache.values


def static_retrieve(p_e: np.ndarray, cache: CacheModel, cfg: RetrievalConfig, image_labels):
    """Score every patch against the cache and split the result.

    Queries are L2-normalized patch features. Returns the foreground part as a
    Cam over C channels (channels outside ``image_labels`` zeroed, the rest
    min-max normalized) and the background part as an (H, W, 1) array
    normalized on its own.
    """
    p_e = np.asarray(p_e, dtype=np.float64)
    h, w, d = p_e.shape
    if d != cache.keys.shape[1]:
        raise ShapeMismatch(f"feature dim {d} does not match key dim {cache.keys.shape[1]}")
    queries = normalize_rows(p_e.reshape(h * w, d), what="query patch")
    scores = retrieval_scores(queries, cache, cfg.sharpness)
    c = cache.num_classes
    pos = minmax_norm(scores[:, :c].reshape(h, w, c), image_labels)
    neg_plane = scores[:, c].reshape(h, w)
    lo, hi = neg_plane.min(), neg_plane.max()
    neg = np.zeros((h, w, 1))
    if hi > lo:
        neg[:, :, 0] = (neg_plane - lo) / (hi - lo)
    return pos, neg


def _renormalize_cam(data: np.ndarray, ceiling: float) -> np.ndarray:
    clipped = np.clip(data, 0.0, ceiling)
    out = np.zeros_like(clipped)
    for ch in range(clipped.shape[2]):
        plane = clipped[:, :, ch]
        lo, hi = plane.min(), plane.max()
        if hi > lo:
            out[:, :, ch] = (plane - lo) / (hi - lo)
    return out


def fuse_static(m_t: Cam, m_s_pos: Cam, m_s_neg: np.ndarray, cfg: RetrievalConfig) -> Cam:
    """Fold the retrieved CAM into the patch-text CAM.

    The background plane gates the foreground scores: by default through its
    complement (high background suppresses), or literally when
    ``neg_mode == "literal"``. The sum is clipped to [0, 1 + weight] and
    min-max renormalized per channel; inactive channels stay zero.
    """
    if m_t.data.shape != m_s_pos.data.shape:
        raise ShapeMismatch(f"CAM shapes differ: {m_t.data.shape} vs {m_s_pos.data.shape}")
    if m_s_neg.shape != m_t.data.shape[:2] + (1,):
        raise ShapeMismatch(f"background plane shape {m_s_neg.shape} does not broadcast")
    gate = (1.0 - m_s_neg) if cfg.neg_mode == "complement" else m_s_neg
    fused = m_t.data + cfg.cache_weight * m_s_pos.data * gate
    return Cam(data=_renormalize_cam(fused, 1.0 + cfg.cache_weight), has_background=False)
