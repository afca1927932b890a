"""Train the retrieval adapter on static pseudo masks and compare the three
CAM stages: plain, statically enhanced, and dynamically enhanced.

Run:  python3 demos/05_adapter_training.py
"""

import tempfile
from pathlib import Path

from export_tools import SyntheticSpec, gen_synthetic

from camforge import (
    PrototypeSet,
    RetrievalConfig,
    TrainConfig,
    VceConfig,
    adapter_forward,
    assemble_cache,
    build_keys,
    build_values,
    cam_to_mask,
    enhance_features,
    fuse_dynamic,
    fuse_static,
    generate_patch_text_cam,
    load_manifest,
    mask_average_pool,
    negative_values,
    static_retrieve,
    train_adapter,
)
from camforge.errors import EmptyRegion

root = Path(tempfile.mkdtemp(prefix="camforge_demo_"))
manifest = load_manifest(gen_synthetic(root, SyntheticSpec(seed=0, noise=0.3, num_samples=12)))
text = manifest.load_text_embeddings()
vce = VceConfig()
rc = RetrievalConfig(centroids_per_class=2)
bg_threshold = 0.45

protos = PrototypeSet.empty(manifest.num_classes)
for sample in manifest.cache_samples:
    (label,) = sample.image_labels
    features = enhance_features(sample, vce)
    mask = cam_to_mask(generate_patch_text_cam(features, text, {label}), {label}, bg_threshold)
    try:
        protos.foreground[label].append(mask_average_pool(features, mask, label))
        protos.background.append(mask_average_pool(features, mask, None))
    except EmptyRegion:
        pass
k_pos, k_neg = build_keys(protos, rc)
cache = assemble_cache(k_pos, build_values(k_pos, text), k_neg,
                       negative_values(k_neg.shape[0], manifest.num_classes))

train_cfg = TrainConfig(iterations=500, prompt_count=8, seed=0)
state, history = train_adapter(manifest, cache, train_cfg, vce, rc, bg_threshold=bg_threshold)
print(f"trained {state.step_count} steps; adapter holds {state.w1.shape[0]} key rows "
      f"({cache.keys.shape[0]} from the cache + {train_cfg.prompt_count} prompts)")
window = max(1, len(history) // 10)
print("loss trajectory (windowed means):")
for start in range(0, len(history), window * 2):
    chunk = history[start : start + window]
    print(f"  steps {start:4d}-{start + len(chunk) - 1:4d}: {sum(chunk) / len(chunk):.5f}")


def accuracies():
    totals = {"plain": 0, "static": 0, "dynamic": 0}
    pixels = 0
    for sample in manifest.samples:
        features = enhance_features(sample, vce)
        m_t = generate_patch_text_cam(features, text, sample.image_labels)
        pos, neg = static_retrieve(features, cache, rc, sample.image_labels)
        m_es = fuse_static(m_t, pos, neg, rc)
        logits, _ = adapter_forward(state, features)
        m_ed = fuse_dynamic(m_t, logits, sample.image_labels, rc)
        gt = sample.load_gt_mask()
        pixels += gt.size
        for name, cam in (("plain", m_t), ("static", m_es), ("dynamic", m_ed)):
            pred = cam_to_mask(cam, sample.image_labels, bg_threshold)
            totals[name] += int((pred.labels == gt).sum())
    return {name: count / pixels for name, count in totals.items()}


result = accuracies()
print(f"\npixel accuracy, plain CAMs:        {result['plain']:.4f}")
print(f"pixel accuracy, static retrieval:  {result['static']:.4f}")
print(f"pixel accuracy, trained adapter:   {result['dynamic']:.4f}")
