import pytest

from camforge import PipelineConfig, build_config, errors, load_config_file, write_config_file
from camforge.config import parse_override


def test_defaults_carry_published_values():
    cfg = PipelineConfig()
    assert cfg.vce.num_groups == 9
    assert cfg.vce.refine_iters == 3
    assert cfg.vce.attn_threshold == 5e-4
    assert cfg.vce.fusion_weight == 1.0
    assert cfg.vce.num_layers == 3
    assert cfg.retrieval.centroids_per_class == 10
    assert cfg.retrieval.cache_weight == 0.5
    assert cfg.train.learning_rate == 2e-4
    assert cfg.train.weight_decay == 1e-2
    assert cfg.train.loss_weight == 0.1
    assert cfg.train.prompt_count == 92
    assert cfg.bg_threshold == 0.45


def test_dict_round_trip():
    cfg = build_config(overrides=["vce.num_groups=4", "retrieval.cache_weight=0.25", "pipeline.mode=trained"])
    again = PipelineConfig.from_dict(cfg.to_dict())
    assert again == cfg
    assert again.sha256() == cfg.sha256()


def test_file_round_trip(tmp_path):
    cfg = build_config(overrides=["train.iterations=12", "pipeline.bg_threshold=0.3"])
    path = tmp_path / "conf.ini"
    write_config_file(cfg, path)
    loaded = build_config(config_path=path)
    assert loaded == cfg


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "conf.ini"
    path.write_text("[nonsense]\nx = 1\n")
    with pytest.raises(errors.UsageError):
        load_config_file(path)


def test_unknown_key_rejected():
    with pytest.raises(errors.UsageError):
        build_config(overrides=["vce.bogus=1"])


def test_bad_value_rejected():
    with pytest.raises(errors.UsageError):
        build_config(overrides=["vce.num_groups=many"])
    with pytest.raises(errors.UsageError):
        build_config(overrides=["pipeline.mode=sideways"])


def test_out_of_range_rejected():
    with pytest.raises(errors.UsageError):
        build_config(overrides=["vce.num_groups=1"])
    with pytest.raises(errors.UsageError):
        build_config(overrides=["pipeline.bg_threshold=1.5"])
    with pytest.raises(errors.UsageError):
        build_config(overrides=["retrieval.sharpness=0"])


def test_override_precedence(tmp_path):
    path = tmp_path / "conf.ini"
    path.write_text("[vce]\nnum_groups = 5\nrefine_iters = 7\n")
    cfg = build_config(config_path=path, overrides=["vce.num_groups=6"])
    assert cfg.vce.num_groups == 6  # --set beats the file
    assert cfg.vce.refine_iters == 7  # file beats defaults


def test_seed_flag_rewrites_every_seed(tmp_path):
    cfg = build_config(overrides=["vce.cluster_seed=1", "train.seed=2", "retrieval.seed=3"], seed=99)
    assert cfg.vce.cluster_seed == 99
    assert cfg.train.seed == 99
    assert cfg.retrieval.seed == 99


def test_parse_override_shape():
    assert parse_override("train.iterations=3") == ("train", "iterations", 3)
    with pytest.raises(errors.UsageError):
        parse_override("iterations=3")
    with pytest.raises(errors.UsageError):
        parse_override("train.iterations")
