"""Pipeline configuration: defaults, key=value config files, and overrides.

Config files are INI-style text with one section per module config::

    [vce]
    num_groups = 9
    refine_iters = 3

    [retrieval]
    cache_weight = 0.5

    [train]
    iterations = 500

    [pipeline]
    bg_threshold = 0.45
    mode = training-free

Command-line ``--set section.key=value`` overrides beat file values, and the
dedicated ``--seed`` flag beats both (it rewrites every seed field at once).
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .adapter import TrainConfig
from .attention import VceConfig
from .cache import RetrievalConfig
from .errors import UsageError

MODES = ("training-free", "trained")


@dataclass
class PathsConfig:
    """Optional artifact locations; dedicated CLI flags take precedence."""

    manifest: str = ""
    cache_dir: str = ""
    adapter_dir: str = ""
    out_dir: str = ""
    cam_dir: str = ""


@dataclass
class PipelineConfig:
    vce: VceConfig = field(default_factory=VceConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    bg_threshold: float = 0.45
    mode: str = "training-free"

    def __post_init__(self):
        if not 0 < self.bg_threshold < 1:
            raise UsageError(f"bg_threshold must lie in (0, 1), got {self.bg_threshold}")
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        return {
            "vce": dataclasses.asdict(self.vce),
            "retrieval": dataclasses.asdict(self.retrieval),
            "train": dataclasses.asdict(self.train),
            "paths": dataclasses.asdict(self.paths),
            "pipeline": {"bg_threshold": self.bg_threshold, "mode": self.mode},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        unknown = set(doc) - set(_SECTIONS)
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        merged = {name: dict(values) for name, values in cls().to_dict().items()}
        for section, values in doc.items():
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be a table")
            for key, value in values.items():
                _check_key(section, key)
                merged[section][key] = value
        return cls(
            vce=VceConfig(**merged["vce"]),
            retrieval=RetrievalConfig(**merged["retrieval"]),
            train=TrainConfig(**merged["train"]),
            paths=PathsConfig(**merged["paths"]),
            **merged["pipeline"],
        )

    def replace_seeds(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(
            self,
            vce=dataclasses.replace(self.vce, cluster_seed=seed),
            retrieval=dataclasses.replace(self.retrieval, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )

    def sha256(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_SECTIONS = {
    "vce": VceConfig,
    "retrieval": RetrievalConfig,
    "train": TrainConfig,
    "paths": PathsConfig,
    "pipeline": None,
}
_PIPELINE_FIELDS = {"bg_threshold": float, "mode": str}


def _field_types(section: str) -> dict:
    if section == "pipeline":
        return dict(_PIPELINE_FIELDS)
    return {f.name: f.type for f in dataclasses.fields(_SECTIONS[section])}


def _check_key(section: str, key: str):
    if section not in _SECTIONS:
        raise UsageError(f"unknown config section {section!r}")
    if key not in _field_types(section):
        raise UsageError(f"unknown config key {section}.{key}")


_TYPE_PARSERS = {
    "int": int,
    "float": float,
    "str": str,
    int: int,
    float: float,
    str: str,
}


def _coerce(section: str, key: str, raw: str):
    _check_key(section, key)
    ftype = _field_types(section)[key]
    parser = _TYPE_PARSERS.get(ftype)
    if parser is None:
        raise UsageError(f"config key {section}.{key} has unsupported type {ftype}")
    try:
        return parser(raw)
    except ValueError as exc:
        raise UsageError(f"config key {section}.{key}: cannot parse {raw!r} as {ftype}") from exc


def load_config_file(path) -> dict:
    """Parse a key=value config file into a nested {section: {key: value}} dict."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc
    doc: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise UsageError(f"unknown config section [{section}] in {path}")
        doc[section] = {}
        for key, raw in parser.items(section):
            doc[section][key] = _coerce(section, key, raw)
    return doc


def parse_override(text: str):
    """Split one ``section.key=value`` override into (section, key, value)."""
    if "=" not in text:
        raise UsageError(f"override {text!r} is not of the form section.key=value")
    dotted, raw = text.split("=", 1)
    if "." not in dotted:
        raise UsageError(f"override key {dotted!r} must be section.key")
    section, key = dotted.split(".", 1)
    return section, key, _coerce(section.strip(), key.strip(), raw.strip())


def build_config(config_path=None, overrides=(), seed=None) -> PipelineConfig:
    """Defaults, then the config file, then --set overrides, then --seed."""
    doc = load_config_file(config_path) if config_path else {}
    for text in overrides:
        section, key, value = parse_override(text)
        doc.setdefault(section, {})[key] = value
    cfg = PipelineConfig.from_dict(doc)
    if seed is not None:
        cfg = cfg.replace_seeds(seed)
    return cfg


def write_config_file(cfg: PipelineConfig, path) -> None:
    """Emit a config file that round-trips through :func:`load_config_file`."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
