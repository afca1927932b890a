"""Attention enhancement: cluster diffusion attention into semantic groups,
sharpen it through the induced affinity, and additively calibrate the smooth
per-layer attention before aggregating value tensors into enhanced features.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DegenerateInput, ShapeMismatch, UsageError

log = logging.getLogger("camforge.attention")


@dataclass
class AttentionMap:
    """Square patch-to-patch affinity over an H x W grid; entries >= 0."""

    data: np.ndarray  # (H*W, H*W) float64
    grid: tuple

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        h, w = self.grid
        if self.data.shape != (h * w, h * w):
            raise ShapeMismatch(f"attention shape {self.data.shape} does not match grid {self.grid}")
        if not np.isfinite(self.data).all():
            raise DataError("attention contains non-finite entries")
        if (self.data < 0).any():
            raise DataError("attention contains negative entries")


@dataclass
class ClusterMask:
    labels: np.ndarray  # (H, W) int
    num_groups: int


@dataclass
class AffinityLabel:
    """Block-structured {0,1} equivalence relation induced by a cluster mask."""

    data: np.ndarray  # (H*W, H*W) float64


@dataclass
class VceConfig:
    num_groups: int = 9
    refine_iters: int = 3
    attn_threshold: float = 5e-4
    fusion_weight: float = 1.0
    num_layers: int = 3
    cluster_seed: int = 0
    cluster_max_iters: int = 100

    def __post_init__(self):
        if self.num_groups < 2:
            raise UsageError(f"num_groups must be >= 2, got {self.num_groups}")
        if self.refine_iters < 0:
            raise UsageError(f"refine_iters must be >= 0, got {self.refine_iters}")
        if self.attn_threshold < 0:
            raise UsageError(f"attn_threshold must be >= 0, got {self.attn_threshold}")
        if self.num_layers < 1:
            raise UsageError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.cluster_max_iters < 1:
            raise UsageError(f"cluster_max_iters must be >= 1, got {self.cluster_max_iters}")


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return x / safe


def _kmeans_pp_indices(points, k, rng):
    """Seeded k-means++ choice of k rows, weighting by squared distance."""
    n = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum((points - points[chosen[0]]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            chosen[j] = rng.integers(n)
        else:
            chosen[j] = rng.choice(n, p=d2 / total)
        d2 = np.minimum(d2, np.sum((points - points[chosen[j]]) ** 2, axis=1))
    return chosen


def cluster_attention(a: AttentionMap, cfg: VceConfig) -> ClusterMask:
    """Group patches by cosine similarity of their attention rows.

    Spherical k-means over the rows of ``a``: k-means++ initialization from
    ``cluster_seed``, assignment by maximum cosine similarity (ties toward the
    lowest group index), centroids renormalized each round. Deterministic for
    a fixed seed; groups left empty after convergence are kept and logged.
    """
    h, w = a.grid
    hw = h * w
    k = cfg.num_groups
    if k > hw:
        raise UsageError(f"cannot form {k} groups from {hw} patches")
    rows = a.data
    if not rows.any():
        raise DegenerateInput("attention is all-zero; rows carry no direction to cluster")
    unit = _unit_rows(rows)
    rng = np.random.default_rng(cfg.cluster_seed)
    centroids = unit[_kmeans_pp_indices(unit, k, rng)].copy()

    labels = None
    for _ in range(cfg.cluster_max_iters):
        sims = unit @ centroids.T
        new_labels = np.argmax(sims, axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for g in range(k):
            members = unit[labels == g]
            if len(members) == 0:
                continue  # empty group keeps its old centroid
            c = members.mean(axis=0)
            norm = np.linalg.norm(c)
            if norm > 0:
                centroids[g] = c / norm
    used = np.unique(labels)
    if len(used) < k:
        log.info("clustering left %d of %d groups empty", k - len(used), k)
    return ClusterMask(labels=labels.reshape(h, w), num_groups=k)


def affinity_from_clusters(m: ClusterMask) -> AffinityLabel:
    """Patch-pair indicator of shared group membership."""
    flat = m.labels.reshape(-1)
    return AffinityLabel(data=(flat[:, None] == flat[None, :]).astype(np.float64))


def threshold_filter(a: AttentionMap, threshold: float) -> AttentionMap:
    """Zero out entries at or below ``threshold``; keep the rest unchanged."""
    if threshold < 0:
        raise UsageError(f"threshold must be >= 0, got {threshold}")
    return AttentionMap(data=np.where(a.data > threshold, a.data, 0.0), grid=a.grid)


def _renormalize_rows(x):
    sums = x.sum(axis=1, keepdims=True)
    return np.divide(x, sums, out=np.zeros_like(x), where=sums > 0)


def acr_refine(a0: AttentionMap, ac: AffinityLabel, iters: int) -> AttentionMap:
    """Recursively propagate attention mass along the group affinity.

    Each round redistributes every patch's attention over whole groups
    (product with the affinity on the target axis) and renormalizes rows to
    unit L1 mass; rows with zero mass stay zero. ``iters == 0`` returns the
    input unchanged.
    """
    if iters < 0:
        raise UsageError(f"iteration count must be >= 0, got {iters}")
    if ac.data.shape != a0.data.shape:
        raise ShapeMismatch(f"affinity shape {ac.data.shape} does not match attention {a0.data.shape}")
    out = a0.data
    for _ in range(iters):
        out = _renormalize_rows(out @ ac.data)
    return AttentionMap(data=out.copy(), grid=a0.grid)


def fuse_attention(clip_attn: AttentionMap, refined: AttentionMap, weight: float) -> AttentionMap:
    """Add the refined map as a distributional shift onto the smooth attention."""
    if clip_attn.data.shape != refined.data.shape:
        raise ShapeMismatch(
            f"attention shapes differ: {clip_attn.data.shape} vs {refined.data.shape}"
        )
    return AttentionMap(data=clip_attn.data + weight * refined.data, grid=clip_attn.grid)


def apply_attention(attn: AttentionMap, values: np.ndarray) -> np.ndarray:
    """Aggregate value rows by attention weights: plain matrix product."""
    values = np.asarray(values, dtype=np.float64)
    if attn.data.shape[1] != values.shape[0]:
        raise ShapeMismatch(
            f"attention columns {attn.data.shape[1]} do not match value rows {values.shape[0]}"
        )
    return attn.data @ values


def refine_sd_attention(sd_attn: AttentionMap, cfg: VceConfig) -> AttentionMap:
    """Threshold, cluster, and recursively refine a diffusion attention map."""
    filtered = threshold_filter(sd_attn, cfg.attn_threshold)
    mask = cluster_attention(filtered, cfg)
    affinity = affinity_from_clusters(mask)
    return acr_refine(filtered, affinity, cfg.refine_iters)


def enhance_features(sample, cfg: VceConfig) -> np.ndarray:
    """Produce enhanced patch features for one sample.

    ``sample`` may be a SampleRecord (loaded on demand) or an already loaded
    SampleTensors. The refined diffusion attention is added onto each of the
    exported attention layers in order; each calibrated layer aggregates its
    own value tensor and the last layer's aggregate, reshaped to (H, W, D),
    is the result.
    """
    tensors = sample.load() if hasattr(sample, "load") else sample
    h, w = tensors.grid
    if len(tensors.clip_attn) < cfg.num_layers:
        raise UsageError(
            f"sample provides {len(tensors.clip_attn)} attention layers, config wants {cfg.num_layers}"
        )
    refined = refine_sd_attention(AttentionMap(tensors.sd_attn, (h, w)), cfg)
    layers_attn = tensors.clip_attn[-cfg.num_layers :]
    layers_values = tensors.clip_values[-cfg.num_layers :]
    out = None
    for attn, values in zip(layers_attn, layers_values):
        fused = fuse_attention(AttentionMap(attn, (h, w)), refined, cfg.fusion_weight)
        out = apply_attention(fused, values)
    return out.reshape(h, w, -1)
