"""Patch-text activation maps and their conversion into hard pseudo masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, UsageError, ZeroNormVector


@dataclass
class Cam:
    """Per-class spatial score map, min-max normalized to [0, 1] per channel."""

    data: np.ndarray  # (H, W, K) float64
    has_background: bool = False


@dataclass
class PseudoMask:
    """Hard per-pixel labels: 0 is background, c + 1 is foreground class c."""

    labels: np.ndarray  # (H, W) int64


def cosine_sim(features: np.ndarray, text: np.ndarray) -> np.ndarray:
    """Cosine similarity of every patch feature against every text column.

    features: (H, W, D), text: (D, C); result (H, W, C) in [-1, 1].
    """
    features = np.asarray(features, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    h, w, d = features.shape
    if text.shape[0] != d:
        raise ShapeMismatch(f"feature dim {d} does not match text dim {text.shape[0]}")
    flat = features.reshape(h * w, d)
    fnorm = np.linalg.norm(flat, axis=1)
    bad = np.nonzero(fnorm == 0)[0]
    if len(bad):
        i = int(bad[0])
        raise ZeroNormVector(f"patch ({i // w}, {i % w}) has zero-norm feature vector")
    tnorm = np.linalg.norm(text, axis=0)
    bad = np.nonzero(tnorm == 0)[0]
    if len(bad):
        raise ZeroNormVector(f"text column {int(bad[0])} has zero norm")
    scores = (flat / fnorm[:, None]) @ (text / tnorm[None, :])
    return scores.reshape(h, w, -1)


def minmax_norm(raw: np.ndarray, class_filter) -> Cam:
    """Min-max normalize each selected channel over spatial positions.

    Channels outside ``class_filter`` are zeroed; a channel that is spatially
    constant maps to all zeros instead of dividing by zero.
    """
    raw = np.asarray(raw, dtype=np.float64)
    h, w, c = raw.shape
    out = np.zeros_like(raw)
    for ch in sorted(class_filter):
        if not 0 <= ch < c:
            raise UsageError(f"class index {ch} outside [0, {c})")
        plane = raw[:, :, ch]
        lo, hi = plane.min(), plane.max()
        if hi > lo:
            out[:, :, ch] = (plane - lo) / (hi - lo)
    return Cam(data=out, has_background=False)


def generate_patch_text_cam(features: np.ndarray, text: np.ndarray, image_labels) -> Cam:
    """Patch-text CAM: cosine scores min-max normalized per active class."""
    return minmax_norm(cosine_sim(features, text), image_labels)


def cam_to_mask(cam: Cam, image_labels, bg_threshold: float) -> PseudoMask:
    """Harden a CAM: background below threshold, else the best active class.

    Ties break toward the lowest class index. Only foreground channels listed
    in ``image_labels`` compete; everything else is background.
    """
    if not 0 < bg_threshold < 1:
        raise UsageError(f"bg_threshold must lie in (0, 1), got {bg_threshold}")
    h, w, c = cam.data.shape
    n_fg = c - 1 if cam.has_background else c
    labels = np.zeros((h, w), dtype=np.int64)
    active = sorted(x for x in image_labels if 0 <= x < n_fg)
    if len(active) != len(image_labels):
        raise UsageError(f"image labels {sorted(image_labels)} outside [0, {n_fg})")
    if not active:
        return PseudoMask(labels=labels)
    stack = cam.data[:, :, active]  # (H, W, A)
    best = np.argmax(stack, axis=2)
    peak = np.take_along_axis(stack, best[:, :, None], axis=2)[:, :, 0]
    fg = peak >= bg_threshold
    chosen = np.asarray(active, dtype=np.int64)[best]
    labels[fg] = chosen[fg] + 1
    return PseudoMask(labels=labels)
