"""Binary tensor interchange format and the JSON dataset manifest.

Tensor file layout, little-endian throughout:

    bytes 0..7   magic ``CAMFORG1``
    byte  8      dtype code: 0 = float32, 1 = uint32
    byte  9      rank, 1..4
    next 8*rank  dims as uint64
    rest         row-major payload

The manifest is a UTF-8 JSON document listing samples of precomputed tensors.
Relative paths inside a manifest resolve against the manifest's directory.
Loading a manifest never opens the referenced tensor files; they are read and
cross-checked only when a sample is accessed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadRank,
    DuplicateClassName,
    IoFailure,
    LabelOutOfRange,
    NonFiniteValue,
    SchemaError,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
)

MAGIC = b"CAMFORG1"
DTYPE_FLOAT32 = 0
DTYPE_UINT32 = 1
IGNORE_LABEL = 255

_CODE_TO_DTYPE = {DTYPE_FLOAT32: np.dtype("<f4"), DTYPE_UINT32: np.dtype("<u4")}
_HEADER_FIXED = 10  # magic + dtype + rank


def header_size(rank: int) -> int:
    return _HEADER_FIXED + 8 * rank


def load_tensor(path) -> np.ndarray:
    """Read one tensor file, validating the header and payload byte-for-byte.

    Returns a float32 or uint32 array shaped by the header dims. Raises a
    typed error naming the file and byte offset for any format violation.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read tensor file {path}: {exc}") from exc

    prefix = blob[:8]
    if prefix != MAGIC:
        bad = next((i for i in range(8) if i >= len(prefix) or prefix[i : i + 1] != MAGIC[i : i + 1]), 0)
        raise BadMagic("bad magic", path, bad)
    if len(blob) < _HEADER_FIXED:
        raise TruncatedPayload("header cut short", path, len(blob))
    code = blob[8]
    if code not in _CODE_TO_DTYPE:
        raise UnsupportedDtype(f"unknown dtype code {code}", path, 8)
    rank = blob[9]
    if not 1 <= rank <= 4:
        raise BadRank(f"rank {rank} outside [1, 4]", path, 9)
    hsize = header_size(rank)
    if len(blob) < hsize:
        raise TruncatedPayload("dims cut short", path, len(blob))
    dims = np.frombuffer(blob, dtype="<u8", count=rank, offset=_HEADER_FIXED)
    dtype = _CODE_TO_DTYPE[code]
    numel = 1
    for d in dims:
        numel *= int(d)
    expected = hsize + dtype.itemsize * numel
    if len(blob) != expected:
        raise TruncatedPayload(
            f"payload length mismatch: expected {expected} bytes total, found {len(blob)}",
            path,
            min(len(blob), expected),
        )
    data = np.frombuffer(blob, dtype=dtype, count=numel, offset=hsize)
    if code == DTYPE_FLOAT32:
        finite = np.isfinite(data)
        if not finite.all():
            bad = int(np.argmin(finite))
            raise NonFiniteValue(
                f"non-finite value {data[bad]!r} at element {bad}", path, hsize + 4 * bad
            )
    return data.reshape(tuple(int(d) for d in dims)).copy()


def write_tensor(tensor, path) -> None:
    """Write an array in the interchange format; floats as float32, ints as uint32."""
    arr = np.asarray(tensor)
    if not 1 <= arr.ndim <= 4:
        raise BadRank(f"rank {arr.ndim} outside [1, 4]", path)
    if arr.dtype.kind == "f":
        code, out = DTYPE_FLOAT32, arr.astype("<f4")
    elif arr.dtype.kind in "ui":
        if arr.dtype.kind == "i" and arr.size and int(arr.min()) < 0:
            raise IoFailure(f"negative values cannot be stored as uint32: {path}")
        code, out = DTYPE_UINT32, arr.astype("<u4")
    else:
        raise UnsupportedDtype(f"cannot encode dtype {arr.dtype}", path)
    header = MAGIC + bytes([code, arr.ndim]) + np.asarray(arr.shape, dtype="<u8").tobytes()
    try:
        Path(path).write_bytes(header + np.ascontiguousarray(out).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write tensor file {path}: {exc}") from exc


@dataclass
class SampleTensors:
    """All tensors of one sample, loaded and cross-checked."""

    features: np.ndarray  # (H, W, D) float64
    clip_attn: list  # L arrays (H*W, H*W) float64
    clip_values: list  # L arrays (H*W, D) float64
    sd_attn: np.ndarray  # (H*W, H*W) float64
    gt_mask: np.ndarray | None  # (H, W) int64 or None
    grid: tuple  # (H, W)


@dataclass
class SampleRecord:
    id: str
    feature_path: Path
    clip_attn_paths: list
    clip_value_paths: list
    sd_attn_path: Path
    image_labels: frozenset
    gt_mask_path: Path | None = None

    def load(self) -> SampleTensors:
        """Load every referenced tensor and verify the shared H, W, D geometry."""
        features = load_tensor(self.feature_path).astype(np.float64)
        if features.ndim != 3:
            raise ShapeMismatch(f"{self.feature_path}: features must be rank 3, got {features.ndim}")
        h, w, d = features.shape
        hw = h * w

        def square(p):
            a = load_tensor(p).astype(np.float64)
            if a.shape != (hw, hw):
                raise ShapeMismatch(f"{p}: expected ({hw}, {hw}) attention, got {a.shape}")
            return a

        clip_attn = [square(p) for p in self.clip_attn_paths]
        clip_values = []
        for p in self.clip_value_paths:
            v = load_tensor(p).astype(np.float64)
            if v.shape != (hw, d):
                raise ShapeMismatch(f"{p}: expected ({hw}, {d}) values, got {v.shape}")
            clip_values.append(v)
        sd_attn = square(self.sd_attn_path)
        gt = None
        if self.gt_mask_path is not None:
            gt = load_tensor(self.gt_mask_path)
            if gt.shape != (h, w):
                raise ShapeMismatch(f"{self.gt_mask_path}: expected ({h}, {w}) mask, got {gt.shape}")
            gt = gt.astype(np.int64)
        return SampleTensors(features, clip_attn, clip_values, sd_attn, gt, (h, w))

    def load_gt_mask(self) -> np.ndarray | None:
        if self.gt_mask_path is None:
            return None
        return load_tensor(self.gt_mask_path).astype(np.int64)


@dataclass
class Manifest:
    version: int
    num_classes: int
    feature_dim: int
    class_names: list
    text_embed_path: Path
    samples: list
    cache_samples: list = field(default_factory=list)
    base_dir: Path = Path(".")

    def load_text_embeddings(self) -> np.ndarray:
        t = load_tensor(self.text_embed_path).astype(np.float64)
        if t.shape != (self.feature_dim, self.num_classes):
            raise ShapeMismatch(
                f"{self.text_embed_path}: expected ({self.feature_dim}, {self.num_classes}) "
                f"text embeddings, got {t.shape}"
            )
        return t


_TOP_KEYS = {"version", "num_classes", "feature_dim", "class_names", "text_embed_path", "samples", "cache_samples"}
_SAMPLE_KEYS = {"id", "feature_path", "clip_attn_paths", "clip_value_paths", "sd_attn_path", "image_labels", "gt_mask_path"}


def _expect(cond, field_name, detail):
    if not cond:
        raise SchemaError(f"{field_name}: {detail}")


def _parse_sample(obj, where, num_classes, base, single_class):
    _expect(isinstance(obj, dict), where, "must be an object")
    unknown = set(obj) - _SAMPLE_KEYS
    _expect(not unknown, where, f"unknown keys {sorted(unknown)}")
    for key in ("id", "feature_path", "clip_attn_paths", "clip_value_paths", "sd_attn_path", "image_labels"):
        _expect(key in obj, f"{where}.{key}", "missing")
    _expect(isinstance(obj["id"], str) and obj["id"], f"{where}.id", "must be a non-empty string")
    for key in ("feature_path", "sd_attn_path"):
        _expect(isinstance(obj[key], str) and obj[key], f"{where}.{key}", "must be a non-empty string")
    for key in ("clip_attn_paths", "clip_value_paths"):
        v = obj[key]
        _expect(isinstance(v, list) and all(isinstance(p, str) and p for p in v), f"{where}.{key}", "must be a list of paths")
    n_attn, n_val = len(obj["clip_attn_paths"]), len(obj["clip_value_paths"])
    _expect(n_attn == n_val and n_attn >= 1, f"{where}.clip_attn_paths",
            f"need equal, nonzero counts of attention and value layers (got {n_attn} and {n_val})")
    labels = obj["image_labels"]
    _expect(isinstance(labels, list) and all(isinstance(x, int) and not isinstance(x, bool) for x in labels),
            f"{where}.image_labels", "must be a list of integers")
    for x in labels:
        if not 0 <= x < num_classes:
            raise LabelOutOfRange(f"{where}.image_labels: label {x} outside [0, {num_classes})")
    label_set = frozenset(labels)
    if single_class and len(label_set) != 1:
        raise SchemaError(f"{where}.image_labels: cache samples must carry exactly one class, got {sorted(label_set)}")
    gt = obj.get("gt_mask_path")
    _expect(gt is None or (isinstance(gt, str) and gt), f"{where}.gt_mask_path", "must be a path or null")
    return SampleRecord(
        id=obj["id"],
        feature_path=base / obj["feature_path"],
        clip_attn_paths=[base / p for p in obj["clip_attn_paths"]],
        clip_value_paths=[base / p for p in obj["clip_value_paths"]],
        sd_attn_path=base / obj["sd_attn_path"],
        image_labels=label_set,
        gt_mask_path=(base / gt) if gt else None,
    )


def load_manifest(path) -> Manifest:
    """Parse and validate a manifest document without touching any tensor file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc

    _expect(isinstance(doc, dict), "manifest", "top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    _expect(not unknown, "manifest", f"unknown keys {sorted(unknown)}")
    for key in ("version", "num_classes", "feature_dim", "class_names", "text_embed_path", "samples"):
        _expect(key in doc, key, "missing")
    for key in ("version", "num_classes", "feature_dim"):
        _expect(isinstance(doc[key], int) and not isinstance(doc[key], bool), key, "must be an integer")
    _expect(doc["num_classes"] >= 1, "num_classes", "must be at least 1")
    _expect(doc["feature_dim"] >= 1, "feature_dim", "must be at least 1")
    names = doc["class_names"]
    _expect(isinstance(names, list) and all(isinstance(n, str) for n in names), "class_names", "must be a list of strings")
    _expect(len(names) == doc["num_classes"], "class_names",
            f"expected {doc['num_classes']} entries, got {len(names)}")
    seen = set()
    for n in names:
        if n in seen:
            raise DuplicateClassName(f"class_names: duplicate entry {n!r}")
        seen.add(n)
    _expect(isinstance(doc["text_embed_path"], str) and doc["text_embed_path"], "text_embed_path", "must be a path")
    _expect(isinstance(doc["samples"], list), "samples", "must be a list")
    cache_raw = doc.get("cache_samples") or []
    _expect(isinstance(cache_raw, list), "cache_samples", "must be a list")

    base = path.parent
    samples = [_parse_sample(s, f"samples[{i}]", doc["num_classes"], base, False) for i, s in enumerate(doc["samples"])]
    cache_samples = [_parse_sample(s, f"cache_samples[{i}]", doc["num_classes"], base, True) for i, s in enumerate(cache_raw)]
    return Manifest(
        version=doc["version"],
        num_classes=doc["num_classes"],
        feature_dim=doc["feature_dim"],
        class_names=list(names),
        text_embed_path=base / doc["text_embed_path"],
        samples=samples,
        cache_samples=cache_samples,
        base_dir=base,
    )
