import json

import numpy as np
import pytest

from camforge import write_tensor


def build_random_dataset(root, seed=0, num_classes=2, h=2, w=2, d=4, layers=2,
                         n_samples=2, cache_per_class=2, with_gt=True):
    """Write a small, unstructured but valid dataset and return its manifest path.

    Tensors are random; this exercises plumbing, not planted semantics.
    """
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    hw = h * w

    def rand_attention():
        a = rng.random((hw, hw)) + 0.05
        return (a / a.sum(axis=1, keepdims=True)).astype(np.float32)

    write_tensor(rng.standard_normal((d, num_classes)).astype(np.float32), root / "text.cft")

    def write_sample(name, labels, gt):
        write_tensor(rng.standard_normal((h, w, d)).astype(np.float32), root / f"{name}_feat.cft")
        attn_paths, value_paths = [], []
        for layer in range(layers):
            write_tensor(rand_attention(), root / f"{name}_attn{layer}.cft")
            write_tensor(rng.standard_normal((hw, d)).astype(np.float32), root / f"{name}_val{layer}.cft")
            attn_paths.append(f"{name}_attn{layer}.cft")
            value_paths.append(f"{name}_val{layer}.cft")
        write_tensor(rand_attention(), root / f"{name}_sd.cft")
        record = {
            "id": name,
            "feature_path": f"{name}_feat.cft",
            "clip_attn_paths": attn_paths,
            "clip_value_paths": value_paths,
            "sd_attn_path": f"{name}_sd.cft",
            "image_labels": sorted(labels),
        }
        if gt is not None:
            write_tensor(gt.astype(np.uint32), root / f"{name}_gt.cft")
            record["gt_mask_path"] = f"{name}_gt.cft"
        return record

    samples = []
    for i in range(n_samples):
        labels = {i % num_classes, (i + 1) % num_classes}
        gt = rng.integers(0, num_classes + 1, (h, w)) if with_gt else None
        samples.append(write_sample(f"s{i}", labels, gt))
    cache_samples = []
    for c in range(num_classes):
        for j in range(cache_per_class):
            gt = rng.integers(0, 2, (h, w)) * (c + 1) if with_gt else None
            cache_samples.append(write_sample(f"c{c}_{j}", {c}, gt))

    doc = {
        "version": 1,
        "num_classes": num_classes,
        "feature_dim": d,
        "class_names": [f"class{c}" for c in range(num_classes)],
        "text_embed_path": "text.cft",
        "samples": samples,
        "cache_samples": cache_samples,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=1))
    return path


@pytest.fixture
def random_dataset(tmp_path):
    return build_random_dataset(tmp_path / "data", seed=123)
