"""Deterministic synthetic datasets with planted class structure.

Every sample is built from a fixed set of orthonormal class prototypes: the
grid is split into rectangular class regions plus background, patch features
are the region's prototype plus optional isotropic noise, the diffusion-style
attention is block structured over the regions, and the smooth per-layer
attention is a uniform blur with a small self-emphasis. Text embeddings equal
the class prototypes, so at zero noise patch-text scoring recovers the planted
regions exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from camforge import write_tensor


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    grid: int = 8
    feature_dim: int = 16
    seed: int = 0
    noise: float = 0.0
    cache_per_class: int = 3
    num_samples: int = 6
    layers: int = 3
    blur: float = 0.6  # weight of the uniform component in the smooth attention
    class_correlation: float = 0.6  # shared-direction mix making prototypes non-orthogonal
    cross_attention_noise: float = 2e-4  # below the default filter threshold

    def __post_init__(self):
        if self.feature_dim < self.num_classes + 2:
            raise ValueError("feature_dim too small for the prototype basis (need num_classes + 2)")
        if not 0 <= self.class_correlation < 1:
            raise ValueError("class_correlation must lie in [0, 1)")
        if self.grid < 2:
            raise ValueError("grid must be at least 2")
        if self.num_classes < 1:
            raise ValueError("need at least one class")


def _prototypes(rng, dim, count, correlation):
    """Unit prototype columns sharing a common direction.

    With correlation 0 the columns are orthonormal; larger values mix in one
    shared basis vector, giving pairwise cosines near real text embeddings.
    """
    q, _ = np.linalg.qr(rng.standard_normal((dim, count + 1)))
    mixed = (1.0 - correlation) * q[:, :count] + correlation * q[:, count : count + 1]
    return mixed / np.linalg.norm(mixed, axis=0, keepdims=True)


def _region_layout_single(rng, grid, label):
    """One class block plus background; roughly half the rows are foreground."""
    h0 = int(rng.integers(0, grid // 4 + 1))
    h1 = h0 + grid // 2
    regions = np.zeros((grid, grid), dtype=np.int64)
    regions[h0:h1, :] = label + 1
    return regions


def _region_layout_pair(rng, grid, label_a, label_b):
    """Two class stripes and a background stripe, with jittered boundaries."""
    w1 = grid // 3 + int(rng.integers(-1, 2))
    w2 = 2 * grid // 3 + int(rng.integers(-1, 2))
    w1 = max(1, min(w1, grid - 2))
    w2 = max(w1 + 1, min(w2, grid - 1))
    regions = np.zeros((grid, grid), dtype=np.int64)
    regions[:, :w1] = label_a + 1
    regions[:, w1:w2] = label_b + 1
    return regions


def _block_attention(rng, regions, cross_noise):
    flat = regions.reshape(-1)
    hw = flat.size
    attn = rng.uniform(0.0, cross_noise, size=(hw, hw))
    same = flat[:, None] == flat[None, :]
    sizes = {label: int((flat == label).sum()) for label in np.unique(flat)}
    weights = np.array([1.0 / sizes[label] for label in flat])
    attn[same] = np.broadcast_to(weights[:, None], (hw, hw))[same]
    return attn


def _smooth_attention(hw, blur):
    return blur * np.full((hw, hw), 1.0 / hw) + (1.0 - blur) * np.eye(hw)


def _features(rng, regions, prototypes, noise):
    grid = regions.shape[0]
    dim = prototypes.shape[0]
    feats = prototypes.T[regions.reshape(-1)].reshape(grid, grid, dim).copy()
    if noise > 0:
        feats += noise * rng.standard_normal(feats.shape)  # per-component std
    return feats


def gen_synthetic(out_dir, spec: SyntheticSpec | None = None, **kwargs) -> Path:
    """Write a planted dataset under ``out_dir`` and return the manifest path.

    Prototype index for region label r is r - 1; index num_classes is the
    background prototype. Region labels double as the ground-truth mask.
    """
    spec = spec or SyntheticSpec(**kwargs)
    rng = np.random.default_rng(spec.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid, c = spec.grid, spec.num_classes
    hw = grid * grid

    columns = _prototypes(rng, spec.feature_dim, c + 1, spec.class_correlation)
    # background prototype last; region label r>0 maps to column r-1
    by_region = np.concatenate([columns[:, c:], columns[:, :c]], axis=1).T  # (C+1, D) rows
    write_tensor(columns[:, :c].astype(np.float32), out_dir / "text.cft")

    smooth = _smooth_attention(hw, spec.blur)

    def write_sample(name, regions, labels):
        feats = _features(rng, regions, by_region.T, spec.noise)
        write_tensor(feats.astype(np.float32), out_dir / f"{name}_feat.cft")
        attn_paths, value_paths = [], []
        flat = feats.reshape(hw, -1)
        for layer in range(spec.layers):
            write_tensor(smooth.astype(np.float32), out_dir / f"{name}_attn{layer}.cft")
            write_tensor(flat.astype(np.float32), out_dir / f"{name}_val{layer}.cft")
            attn_paths.append(f"{name}_attn{layer}.cft")
            value_paths.append(f"{name}_val{layer}.cft")
        sd = _block_attention(rng, regions, spec.cross_attention_noise)
        write_tensor(sd.astype(np.float32), out_dir / f"{name}_sd.cft")
        write_tensor(regions.astype(np.uint32), out_dir / f"{name}_gt.cft")
        return {
            "id": name,
            "feature_path": f"{name}_feat.cft",
            "clip_attn_paths": attn_paths,
            "clip_value_paths": value_paths,
            "sd_attn_path": f"{name}_sd.cft",
            "image_labels": sorted(labels),
            "gt_mask_path": f"{name}_gt.cft",
        }

    cache_samples = []
    for label in range(c):
        for j in range(spec.cache_per_class):
            regions = _region_layout_single(rng, grid, label)
            cache_samples.append(write_sample(f"cache_{label}_{j}", regions, {label}))

    samples = []
    for i in range(spec.num_samples):
        a = i % c
        b = (i + 1 + i // c) % c
        if a == b:
            b = (b + 1) % c
        regions = _region_layout_pair(rng, grid, a, b)
        samples.append(write_sample(f"sample_{i}", regions, {a, b}))

    doc = {
        "version": 1,
        "num_classes": c,
        "feature_dim": spec.feature_dim,
        "class_names": [f"class{i}" for i in range(c)],
        "text_embed_path": "text.cft",
        "samples": samples,
        "cache_samples": cache_samples,
    }
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return manifest


def dataset_digest(manifest_path) -> str:
    """SHA-256 over the manifest and every referenced file, for determinism checks."""
    manifest_path = Path(manifest_path)
    digest = hashlib.sha256(manifest_path.read_bytes())
    for path in sorted(p for p in manifest_path.parent.iterdir() if p != manifest_path):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()
