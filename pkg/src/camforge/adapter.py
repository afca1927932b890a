"""Learnable retrieval adapter: a two-layer mapping initialized from the cache,
trained with cross-entropy against pseudo masks from the static path.

Forward pass for a unit-normalized patch query q:

    hidden = exp(-sharpness * (1 - (q @ W1.T + b1)))
    logits = hidden @ W2 + b2

so with zero biases and no extra prompt rows the adapter reproduces static
retrieval exactly. Gradients are computed analytically in closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .attention import VceConfig, enhance_features
from .cache import CacheModel, RetrievalConfig, fuse_static, normalize_rows, static_retrieve
from .cam import Cam, PseudoMask, cam_to_mask, generate_patch_text_cam, minmax_norm
from .errors import IoFailure, ShapeMismatch, UsageError

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    iterations: int = 500
    loss_weight: float = 0.1
    prompt_count: int = 92
    prompt_init_scale: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise UsageError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise UsageError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.prompt_count < 0:
            raise UsageError(f"prompt_count must be >= 0, got {self.prompt_count}")
        if self.iterations < 0:
            raise UsageError(f"iterations must be >= 0, got {self.iterations}")
        if self.loss_weight < 0:
            raise UsageError(f"loss_weight must be >= 0, got {self.loss_weight}")


@dataclass
class AdapterState:
    w1: np.ndarray  # (M, D)
    b1: np.ndarray  # (M,)
    w2: np.ndarray  # (M, C+1)
    b2: np.ndarray  # (C+1,)
    sharpness: float
    step_count: int = 0
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)

    def params(self):
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def save(self, directory, config_echo=None, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, value in self.params().items():
            tensorio.write_tensor(value.astype(np.float32), directory / f"{name}.cft")
        sidecar = {"step_count": self.step_count, "sharpness": self.sharpness}
        if config_echo is not None:
            sidecar["config"] = config_echo
        if extra:
            sidecar.update(extra)
        (directory / "adapter.json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        try:
            sidecar = json.loads((directory / "adapter.json").read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read adapter sidecar in {directory}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise IoFailure(f"malformed adapter sidecar in {directory}: {exc}") from exc
        arrays = {
            name: tensorio.load_tensor(directory / f"{name}.cft").astype(np.float64)
            for name in PARAM_NAMES
        }
        state = cls(sharpness=sidecar["sharpness"], step_count=sidecar["step_count"], **arrays)
        state._zero_moments()
        return state

    def _zero_moments(self):
        self.moment1 = {k: np.zeros_like(v) for k, v in self.params().items()}
        self.moment2 = {k: np.zeros_like(v) for k, v in self.params().items()}


def init_adapter(cache: CacheModel, cfg: TrainConfig, sharpness: float = 5.0) -> AdapterState:
    """Stack cache keys/values with fresh prompt rows as the initial weights.

    Prompt key rows are small seeded Gaussians; prompt value rows start at
    zero so an untrained prompt cannot perturb class scores. Biases are zero.
    """
    rng = np.random.default_rng(cfg.seed)
    n, d = cfg.prompt_count, cache.keys.shape[1]
    k = cache.values.shape[1]
    prompt_keys = cfg.prompt_init_scale * rng.standard_normal((n, d))
    state = AdapterState(
        w1=np.vstack([cache.keys, prompt_keys]) if n else cache.keys.copy(),
        b1=np.zeros(cache.keys.shape[0] + n),
        w2=np.vstack([cache.values, np.zeros((n, k))]) if n else cache.values.copy(),
        b2=np.zeros(k),
        sharpness=sharpness,
    )
    state._zero_moments()
    return state


@dataclass
class ForwardCache:
    queries: np.ndarray  # (H*W, D) unit rows
    hidden: np.ndarray  # (H*W, M) activations
    grid: tuple


def adapter_forward(state: AdapterState, p_e: np.ndarray):
    """Raw logits (H, W, C+1) plus the intermediates the backward pass needs."""
    p_e = np.asarray(p_e, dtype=np.float64)
    h, w, d = p_e.shape
    if d != state.w1.shape[1]:
        raise ShapeMismatch(f"feature dim {d} does not match adapter input dim {state.w1.shape[1]}")
    queries = normalize_rows(p_e.reshape(h * w, d), what="query patch")
    pre = queries @ state.w1.T + state.b1
    hidden = np.exp(-state.sharpness * (1.0 - pre))
    logits = hidden @ state.w2 + state.b2
    return logits.reshape(h, w, -1), ForwardCache(queries=queries, hidden=hidden, grid=(h, w))


def adapter_loss(logits: np.ndarray, target: PseudoMask):
    """Mean softmax cross-entropy over pixels, with its gradient on the logits.

    Mask label 0 maps to the last (background) channel, label c + 1 to
    channel c.
    """
    h, w, k = logits.shape
    if target.labels.shape != (h, w):
        raise ShapeMismatch(f"target shape {target.labels.shape} does not match logits ({h}, {w})")
    flat = logits.reshape(-1, k)
    labels = target.labels.reshape(-1)
    channel = np.where(labels == 0, k - 1, labels - 1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expo = np.exp(shifted)
    soft = expo / expo.sum(axis=1, keepdims=True)
    n = flat.shape[0]
    picked = soft[np.arange(n), channel]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    grad = soft.copy()
    grad[np.arange(n), channel] -= 1.0
    grad /= n
    return loss, grad.reshape(h, w, k)


def adapter_backward(state: AdapterState, inter: ForwardCache, dlogits: np.ndarray) -> dict:
    """Exact reverse-mode gradients of the forward composition.

    The query normalization is treated as fixed input, so no Jacobian term
    flows into the features.
    """
    h, w = inter.grid
    k = state.w2.shape[1]
    dflat = np.asarray(dlogits, dtype=np.float64).reshape(h * w, k)
    d_w2 = inter.hidden.T @ dflat
    d_b2 = dflat.sum(axis=0)
    d_hidden = dflat @ state.w2.T
    d_pre = d_hidden * (state.sharpness * inter.hidden)  # activation derivative
    d_w1 = d_pre.T @ inter.queries
    d_b1 = d_pre.sum(axis=0)
    return {"w1": d_w1, "b1": d_b1, "w2": d_w2, "b2": d_b2}


def adamw_step(state: AdapterState, grads: dict, cfg: TrainConfig) -> AdapterState:
    """One decoupled-weight-decay Adam update with bias correction, in place."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    params = state.params()
    for name in PARAM_NAMES:
        g = grads[name]
        m = state.moment1[name]
        v = state.moment2[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = params[name]
        p *= 1.0 - cfg.learning_rate * cfg.weight_decay
        p -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return state


def train_adapter(
    manifest,
    cache: CacheModel,
    cfg: TrainConfig,
    vce: VceConfig,
    rc: RetrievalConfig,
    bg_threshold: float = 0.45,
):
    """Train against pseudo masks recomputed from the frozen static path.

    One sample per step, drawn by seeded epoch shuffles. Returns the final
    state and the per-step training loss history (already loss-weighted).
    """
    if not manifest.samples:
        raise UsageError("manifest has no training samples")
    text = manifest.load_text_embeddings()
    state = init_adapter(cache, cfg, sharpness=rc.sharpness)
    rng = np.random.default_rng(cfg.seed)
    order: list = []
    history = []
    for _ in range(cfg.iterations):
        if not order:
            order = list(rng.permutation(len(manifest.samples)))
        sample = manifest.samples[order.pop(0)]
        p_e = enhance_features(sample, vce)
        m_t = generate_patch_text_cam(p_e, text, sample.image_labels)
        pos, neg = static_retrieve(p_e, cache, rc, sample.image_labels)
        m_es = fuse_static(m_t, pos, neg, rc)
        target = cam_to_mask(m_es, sample.image_labels, bg_threshold)
        logits, inter = adapter_forward(state, p_e)
        loss, dlogits = adapter_loss(logits, target)
        loss *= cfg.loss_weight
        grads = adapter_backward(state, inter, cfg.loss_weight * dlogits)
        adamw_step(state, grads, cfg)
        history.append(loss)
    return state, history


def class_distribution(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the C+1 channels of raw adapter logits."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=2, keepdims=True)
    expo = np.exp(shifted)
    return expo / expo.sum(axis=2, keepdims=True)


def fuse_dynamic(m_t: Cam, logits: np.ndarray, image_labels, cfg: RetrievalConfig) -> Cam:
    """Fold the adapter's foreground scores into the patch-text CAM.

    The raw logits are first normalized into a per-pixel class distribution,
    so a confident background channel suppresses the foreground scores the
    same way the static path's negative branch does. The foreground channels
    are then min-max normalized with inactive classes zeroed, weighted, added,
    and renormalized like the static fusion.
    """
    from .cache import _renormalize_cam  # shared renormalization rule

    h, w, k = logits.shape
    if m_t.data.shape != (h, w, k - 1):
        raise ShapeMismatch(f"CAM shape {m_t.data.shape} does not match logits ({h}, {w}, {k - 1})")
    probs = class_distribution(logits)
    fg = minmax_norm(probs[:, :, : k - 1], image_labels)
    fused = m_t.data + cfg.cache_weight * fg.data
    return Cam(data=_renormalize_cam(fused, 1.0 + cfg.cache_weight), has_background=False)
