import numpy as np
import pytest

from camforge import (
    CacheModel,
    PseudoMask,
    RetrievalConfig,
    TrainConfig,
    adamw_step,
    adapter_backward,
    adapter_forward,
    adapter_loss,
    errors,
    fuse_dynamic,
    init_adapter,
    load_manifest,
    minmax_norm,
    train_adapter,
)
from camforge.adapter import AdapterState
from camforge.cache import retrieval_scores


def random_cache(rng, num_classes=2, per_class=2, d=3):
    u = (num_classes + 1) * per_class
    keys = rng.standard_normal((u, d))
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    values = np.zeros((u, num_classes + 1))
    provenance = np.repeat(np.arange(num_classes + 1), per_class)
    values[np.arange(u), provenance] = rng.uniform(0.5, 1.0, size=u)
    values[provenance == num_classes] = 0.0
    values[np.arange(u)[provenance == num_classes], num_classes] = 1.0
    return CacheModel(
        keys=keys,
        values=values,
        provenance=provenance.astype(np.int64),
        num_classes=num_classes,
        centroids_per_class=per_class,
    )


# --------------------------------------------------------------------- init


def test_init_without_prompts_copies_cache():
    rng = np.random.default_rng(0)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=0, seed=1))
    assert np.array_equal(state.w1, cache.keys)
    assert np.array_equal(state.w2, cache.values)
    assert (state.b1 == 0).all() and (state.b2 == 0).all()
    assert state.step_count == 0
    assert all((m == 0).all() for m in state.moment1.values())


def test_init_prompt_rows_shapes_and_zero_values():
    rng = np.random.default_rng(1)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=92, seed=2))
    u = cache.keys.shape[0]
    assert state.w1.shape == (u + 92, cache.keys.shape[1])
    assert state.w2.shape == (u + 92, cache.values.shape[1])
    assert (state.w2[u:] == 0).all()
    assert (state.w1[u:] != 0).any()


def test_init_deterministic_bitwise():
    rng = np.random.default_rng(2)
    cache = random_cache(rng)
    a = init_adapter(cache, TrainConfig(prompt_count=5, seed=7))
    b = init_adapter(cache, TrainConfig(prompt_count=5, seed=7))
    assert np.array_equal(a.w1, b.w1) and np.array_equal(a.w2, b.w2)


# ------------------------------------------------------------------ forward


def test_forward_init_identity_with_static_scores():
    rng = np.random.default_rng(3)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=0, seed=0), sharpness=5.0)
    p_e = rng.standard_normal((2, 2, 3))
    logits, _ = adapter_forward(state, p_e)
    queries = p_e.reshape(4, 3)
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    raw = retrieval_scores(queries, cache, 5.0).reshape(2, 2, -1)
    assert np.allclose(logits, raw, atol=1e-6)


def test_forward_zero_feature_patch_raises():
    rng = np.random.default_rng(4)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=0))
    p_e = rng.standard_normal((1, 2, 3))
    p_e[0, 1] = 0.0
    with pytest.raises(errors.ZeroNormVector):
        adapter_forward(state, p_e)


def test_forward_matches_scalar_computation():
    state = AdapterState(
        w1=np.array([[1.0, 0.0], [0.6, 0.8]]),
        b1=np.array([0.1, -0.2]),
        w2=np.array([[0.5, -1.0], [2.0, 0.3]]),
        b2=np.array([0.05, 0.6]),
        sharpness=3.0,
    )
    state._zero_moments()
    p_e = np.array([[[3.0, 4.0]]])
    logits, inter = adapter_forward(state, p_e)
    q = np.array([0.6, 0.8])
    hidden = [np.exp(-3.0 * (1.0 - (q @ state.w1[i] + state.b1[i]))) for i in range(2)]
    expected = [
        hidden[0] * 0.5 + hidden[1] * 2.0 + 0.05,
        hidden[0] * -1.0 + hidden[1] * 0.3 + 0.6,
    ]
    assert np.allclose(logits[0, 0], expected, atol=1e-6)
    assert np.allclose(inter.hidden[0], hidden, atol=1e-6)


# --------------------------------------------------------------------- loss


def test_loss_uniform_logits_ln_k():
    for k in (2, 3, 5):
        logits = np.zeros((2, 2, k))
        target = PseudoMask(labels=np.zeros((2, 2), dtype=int))
        loss, _ = adapter_loss(logits, target)
        assert loss == pytest.approx(np.log(k), abs=1e-12)


def test_loss_saturated_correct_logits_vanish():
    logits = np.zeros((1, 2, 3))
    logits[0, 0, 2] = 50.0  # background channel for label 0
    logits[0, 1, 0] = 50.0  # channel for label 1
    target = PseudoMask(labels=np.array([[0, 1]]))
    loss, _ = adapter_loss(logits, target)
    assert loss < 1e-3


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((2, 2, 3))
    target = PseudoMask(labels=rng.integers(0, 3, (2, 2)))
    loss, grad = adapter_loss(logits, target)
    eps = 1e-6
    for h in range(2):
        for w in range(2):
            for c in range(3):
                up = logits.copy()
                up[h, w, c] += eps
                down = logits.copy()
                down[h, w, c] -= eps
                fd = (adapter_loss(up, target)[0] - adapter_loss(down, target)[0]) / (2 * eps)
                assert grad[h, w, c] == pytest.approx(fd, abs=1e-6)


# ----------------------------------------------------------------- backward


def flatten_params(state):
    return {name: value.copy() for name, value in state.params().items()}


def loss_of_params(state, values, p_e, target, gamma=1.0):
    probe = AdapterState(
        w1=values["w1"], b1=values["b1"], w2=values["w2"], b2=values["b2"],
        sharpness=state.sharpness,
    )
    probe._zero_moments()
    logits, _ = adapter_forward(probe, p_e)
    loss, _ = adapter_loss(logits, target)
    return gamma * loss


def test_backward_zero_upstream_gradient():
    rng = np.random.default_rng(6)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=1, seed=0))
    p_e = rng.standard_normal((1, 2, 3))
    _, inter = adapter_forward(state, p_e)
    grads = adapter_backward(state, inter, np.zeros((1, 2, 3)))
    assert all((g == 0).all() for g in grads.values())


def test_backward_bias2_is_column_sum():
    rng = np.random.default_rng(7)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=0))
    p_e = rng.standard_normal((2, 2, 3))
    _, inter = adapter_forward(state, p_e)
    dlogits = rng.standard_normal((2, 2, 3))
    grads = adapter_backward(state, inter, dlogits)
    assert np.allclose(grads["b2"], dlogits.reshape(-1, 3).sum(axis=0), atol=1e-9)


def central_difference_check(seed, h=1, w=2, d=3, m_extra=1, abs_floor=1e-7):
    rng = np.random.default_rng(seed)
    cache = random_cache(rng, num_classes=2, per_class=1, d=d)  # 3 cache rows
    state = init_adapter(cache, TrainConfig(prompt_count=m_extra, seed=seed), sharpness=2.0)
    p_e = rng.standard_normal((h, w, d))
    target = PseudoMask(labels=rng.integers(0, 3, (h, w)))
    logits, inter = adapter_forward(state, p_e)
    _, dlogits = adapter_loss(logits, target)
    grads = adapter_backward(state, inter, dlogits)

    step = 1e-4
    for name in ("w1", "b1", "w2", "b2"):
        base = flatten_params(state)
        flat = base[name].reshape(-1)
        analytic = grads[name].reshape(-1)
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + step
            up = loss_of_params(state, base, p_e, target)
            flat[idx] = saved - step
            down = loss_of_params(state, base, p_e, target)
            flat[idx] = saved
            fd = (up - down) / (2 * step)
            scale = max(abs(fd), abs(analytic[idx]), abs_floor)
            assert abs(analytic[idx] - fd) / scale < 1e-4, (name, idx)


def test_backward_matches_finite_differences_many_instances():
    for seed in range(20):
        central_difference_check(seed)


# -------------------------------------------------------------------- adamw


def scalar_state(value):
    state = AdapterState(
        w1=np.array([[value]]), b1=np.zeros(1), w2=np.zeros((1, 1)), b2=np.zeros(1),
        sharpness=1.0,
    )
    state._zero_moments()
    return state


def test_adamw_zero_gradient_no_decay_is_identity():
    state = scalar_state(0.7)
    zero = {k: np.zeros_like(v) for k, v in state.params().items()}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    adamw_step(state, zero, cfg)
    assert state.w1[0, 0] == 0.7
    assert state.step_count == 1


def test_adamw_first_step_magnitude():
    state = scalar_state(0.0)
    grads = {k: np.zeros_like(v) for k, v in state.params().items()}
    grads["w1"] = np.array([[1.0]])
    cfg = TrainConfig(learning_rate=0.05, weight_decay=0.0, adam_eps=1e-8)
    adamw_step(state, grads, cfg)
    assert state.w1[0, 0] == pytest.approx(-0.05 / (1 + 1e-8), rel=1e-9)


def test_adamw_three_step_trajectory_matches_scalar_oracle():
    lr, wd, b1, b2, eps = 0.01, 0.02, 0.9, 0.999, 1e-8
    cfg = TrainConfig(learning_rate=lr, weight_decay=wd, adam_beta1=b1, adam_beta2=b2, adam_eps=eps)
    state = scalar_state(0.5)
    grad_values = [0.3, -0.7, 1.1]

    p, m, v = 0.5, 0.0, 0.0
    for t, g in enumerate(grad_values, start=1):
        grads = {k: np.zeros_like(val) for k, val in state.params().items()}
        grads["w1"] = np.array([[g]])
        adamw_step(state, grads, cfg)

        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p * (1 - lr * wd)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert state.w1[0, 0] == pytest.approx(p, abs=1e-10)


# ----------------------------------------------------------------- training


def test_train_zero_iterations_equals_init(random_dataset):
    manifest = load_manifest(random_dataset)
    rng = np.random.default_rng(8)
    cache = random_cache(rng, num_classes=2, per_class=2, d=4)
    cfg = TrainConfig(iterations=0, prompt_count=3, seed=5)
    from camforge import VceConfig

    state, history = train_adapter(manifest, cache, cfg, VceConfig(num_groups=2, num_layers=2), RetrievalConfig())
    init = init_adapter(cache, cfg, sharpness=RetrievalConfig().sharpness)
    assert history == []
    assert np.array_equal(state.w1, init.w1)
    assert np.array_equal(state.w2, init.w2)


def test_train_deterministic_bitwise(random_dataset):
    from camforge import VceConfig

    manifest = load_manifest(random_dataset)
    rng = np.random.default_rng(9)
    cache = random_cache(rng, num_classes=2, per_class=2, d=4)
    cfg = TrainConfig(iterations=5, prompt_count=2, seed=11)
    vce = VceConfig(num_groups=2, num_layers=2)
    a, hist_a = train_adapter(manifest, cache, cfg, vce, RetrievalConfig())
    b, hist_b = train_adapter(manifest, cache, cfg, vce, RetrievalConfig())
    assert hist_a == hist_b
    for name in ("w1", "b1", "w2", "b2"):
        assert np.array_equal(a.params()[name], b.params()[name])


def test_train_zero_learning_rate_freezes_parameters(random_dataset):
    from camforge import VceConfig

    manifest = load_manifest(random_dataset)
    rng = np.random.default_rng(10)
    cache = random_cache(rng, num_classes=2, per_class=2, d=4)
    cfg = TrainConfig(iterations=4, prompt_count=2, seed=3, learning_rate=0.0)
    state, _ = train_adapter(manifest, cache, cfg, VceConfig(num_groups=2, num_layers=2), RetrievalConfig())
    init = init_adapter(cache, cfg, sharpness=RetrievalConfig().sharpness)
    assert np.array_equal(state.w1, init.w1)
    assert np.array_equal(state.w2, init.w2)


def test_train_default_loss_weight():
    assert TrainConfig().loss_weight == 0.1


# ------------------------------------------------------------ dynamic fusion


def test_fuse_dynamic_weight_zero_identity():
    rng = np.random.default_rng(11)
    m_t = minmax_norm(rng.standard_normal((2, 2, 2)), {0, 1})
    logits = rng.standard_normal((2, 2, 3))
    out = fuse_dynamic(m_t, logits, {0, 1}, RetrievalConfig(cache_weight=0.0))
    assert np.array_equal(out.data, m_t.data)


def test_fuse_dynamic_init_scores_share_static_raw_path():
    # at init with no prompts the raw logits equal static retrieval scores, so
    # the dynamic fusion is a deterministic recalibration of the same signal
    rng = np.random.default_rng(12)
    cache = random_cache(rng, num_classes=2, per_class=2, d=3)
    rc = RetrievalConfig(cache_weight=0.5)
    state = init_adapter(cache, TrainConfig(prompt_count=0), sharpness=rc.sharpness)
    p_e = rng.standard_normal((2, 2, 3))
    m_t = minmax_norm(rng.standard_normal((2, 2, 2)), {0, 1})

    logits, _ = adapter_forward(state, p_e)
    queries = p_e.reshape(4, 3)
    queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
    raw = retrieval_scores(queries, cache, rc.sharpness).reshape(2, 2, 3)
    assert np.allclose(logits, raw, atol=1e-9)
    via_logits = fuse_dynamic(m_t, logits, {0, 1}, rc)
    via_static_raw = fuse_dynamic(m_t, raw, {0, 1}, rc)
    assert np.allclose(via_logits.data, via_static_raw.data, atol=1e-9)


def test_fuse_dynamic_matches_composition_oracle():
    rng = np.random.default_rng(13)
    m_t = minmax_norm(rng.standard_normal((3, 2, 3)), {0, 2})
    logits = rng.standard_normal((3, 2, 4))
    rc = RetrievalConfig(cache_weight=0.7)
    out = fuse_dynamic(m_t, logits, {0, 2}, rc)
    probs = np.exp(logits - logits.max(axis=2, keepdims=True))
    probs /= probs.sum(axis=2, keepdims=True)
    fg = minmax_norm(probs[:, :, :3], {0, 2})
    fused = np.clip(m_t.data + 0.7 * fg.data, 0, 1.7)
    expected = np.zeros_like(fused)
    for ch in range(3):
        lo, hi = fused[:, :, ch].min(), fused[:, :, ch].max()
        if hi > lo:
            expected[:, :, ch] = (fused[:, :, ch] - lo) / (hi - lo)
    assert np.allclose(out.data, expected, atol=1e-9)


def test_fuse_dynamic_background_channel_suppresses():
    # a pixel whose background logit dominates contributes almost nothing to
    # the fused foreground, even when its raw foreground logit is large
    m_t = minmax_norm(np.zeros((1, 2, 1)), {0})
    logits = np.zeros((1, 2, 2))
    logits[0, 0] = [3.0, -3.0]  # confident foreground
    logits[0, 1] = [3.0, 9.0]  # same fg logit, dominant background
    out = fuse_dynamic(m_t, logits, {0}, RetrievalConfig(cache_weight=0.5))
    assert out.data[0, 0, 0] > out.data[0, 1, 0]


def test_adapter_state_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    cache = random_cache(rng)
    state = init_adapter(cache, TrainConfig(prompt_count=2, seed=1), sharpness=4.0)
    state.step_count = 17
    state.save(tmp_path / "adapter")
    back = AdapterState.load(tmp_path / "adapter")
    assert back.step_count == 17
    assert back.sharpness == 4.0
    assert np.allclose(back.w1, state.w1, atol=1e-6)
