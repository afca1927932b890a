import pytest

from camforge import (
    VceConfig,
    cam_to_mask,
    enhance_features,
    generate_patch_text_cam,
    load_manifest,
)
from export_tools import SyntheticSpec, dataset_digest, gen_synthetic
from export_tools.cli import main_gen_synthetic


def test_output_validates_under_manifest_loader(tmp_path):
    manifest_path = gen_synthetic(tmp_path / "d", SyntheticSpec(seed=5, noise=0.1))
    manifest = load_manifest(manifest_path)
    assert manifest.num_classes == 4
    assert len(manifest.cache_samples) == 4 * 3
    text = manifest.load_text_embeddings()
    assert text.shape == (16, 4)
    for sample in manifest.samples[:2] + manifest.cache_samples[:2]:
        tensors = sample.load()
        assert tensors.grid == (8, 8)
        assert tensors.gt_mask is not None


def test_digest_stable_for_fixed_seed(tmp_path):
    spec = SyntheticSpec(seed=9, noise=0.25)
    a = dataset_digest(gen_synthetic(tmp_path / "a", spec))
    b = dataset_digest(gen_synthetic(tmp_path / "b", spec))
    c = dataset_digest(gen_synthetic(tmp_path / "c", SyntheticSpec(seed=10, noise=0.25)))
    assert a == b
    assert a != c


def _pixel_accuracy(manifest, bg_threshold=0.45):
    text = manifest.load_text_embeddings()
    vce = VceConfig()
    correct = total = 0
    for sample in manifest.samples:
        p_e = enhance_features(sample, vce)
        cam = generate_patch_text_cam(p_e, text, sample.image_labels)
        mask = cam_to_mask(cam, sample.image_labels, bg_threshold)
        gt = sample.load_gt_mask()
        correct += int((mask.labels == gt).sum())
        total += gt.size
    return correct / total


def test_two_class_planted_accuracy_above_point_nine(tmp_path):
    spec = SyntheticSpec(num_classes=2, seed=0, noise=0.2)
    manifest = load_manifest(gen_synthetic(tmp_path / "d", spec))
    assert _pixel_accuracy(manifest) > 0.9


def test_zero_noise_accuracy_is_one(tmp_path):
    spec = SyntheticSpec(num_classes=2, seed=1, noise=0.0)
    manifest = load_manifest(gen_synthetic(tmp_path / "d", spec))
    assert _pixel_accuracy(manifest) == 1.0


def test_cache_samples_are_single_class(tmp_path):
    manifest = load_manifest(gen_synthetic(tmp_path / "d", SyntheticSpec(seed=2)))
    for sample in manifest.cache_samples:
        assert len(sample.image_labels) == 1


def test_region_attention_is_block_structured(tmp_path):
    manifest = load_manifest(gen_synthetic(tmp_path / "d", SyntheticSpec(seed=3, noise=0.0)))
    sample = manifest.samples[0]
    tensors = sample.load()
    regions = tensors.gt_mask.reshape(-1)
    same = regions[:, None] == regions[None, :]
    within = tensors.sd_attn[same]
    cross = tensors.sd_attn[~same]
    assert within.min() > cross.max()


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(num_classes=4, feature_dim=4)
    with pytest.raises(ValueError):
        SyntheticSpec(class_correlation=1.5)


def test_cli_round_trip(tmp_path, capsys):
    assert main_gen_synthetic([
        "--out", str(tmp_path / "cli"), "--classes", "3", "--grid", "6", "--dim", "8",
        "--seed", "4", "--noise", "0.2", "--samples", "2", "--cache-per-class", "2",
        "--digest",
    ]) == 0
    out = capsys.readouterr().out
    assert "manifest.json" in out
    manifest = load_manifest(tmp_path / "cli" / "manifest.json")
    assert manifest.num_classes == 3
    assert len(manifest.samples) == 2
