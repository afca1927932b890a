import numpy as np
import pytest

from camforge import (
    Cam,
    cam_to_mask,
    cosine_sim,
    errors,
    generate_patch_text_cam,
    minmax_norm,
)


def test_cosine_self_similarity_is_one():
    t = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])  # D=3, C=2
    p = np.zeros((1, 2, 3))
    p[0, 0] = [1.0, 0.0, 0.0]
    p[0, 1] = [0.0, 5.0, 0.0]
    s = cosine_sim(p, t)
    assert s[0, 0, 0] == pytest.approx(1.0)
    assert s[0, 1, 1] == pytest.approx(1.0)


def test_cosine_orthogonal_is_zero():
    t = np.array([[1.0], [0.0]])
    p = np.array([[[0.0, 3.0]]])
    assert cosine_sim(p, t)[0, 0, 0] == pytest.approx(0.0)


def test_cosine_matches_scalar_loop():
    rng = np.random.default_rng(0)
    p = rng.standard_normal((2, 2, 3))
    t = rng.standard_normal((3, 4))
    s = cosine_sim(p, t)
    for h in range(2):
        for w in range(2):
            for c in range(4):
                v, u = p[h, w], t[:, c]
                expected = float(np.dot(v, u) / (np.linalg.norm(v) * np.linalg.norm(u)))
                assert s[h, w, c] == pytest.approx(expected, abs=1e-6)
    assert (s >= -1 - 1e-12).all() and (s <= 1 + 1e-12).all()


def test_cosine_zero_norm_patch_named():
    p = np.zeros((1, 2, 3))
    p[0, 0] = [1.0, 0.0, 0.0]
    t = np.eye(3)
    with pytest.raises(errors.ZeroNormVector) as exc:
        cosine_sim(p, t)
    assert "(0, 1)" in str(exc.value)


def test_cosine_zero_norm_text_column():
    p = np.ones((1, 1, 2))
    t = np.array([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(errors.ZeroNormVector) as exc:
        cosine_sim(p, t)
    assert "column 1" in str(exc.value)


def test_minmax_basic_channel():
    raw = np.zeros((1, 2, 1))
    raw[0, 0, 0], raw[0, 1, 0] = 0.2, 0.8
    out = minmax_norm(raw, {0})
    assert out.data[0, 0, 0] == 0.0
    assert out.data[0, 1, 0] == 1.0


def test_minmax_constant_channel_zeroed():
    raw = np.full((2, 2, 1), 0.7)
    assert (minmax_norm(raw, {0}).data == 0).all()


def test_minmax_filter_zeroes_inactive():
    rng = np.random.default_rng(1)
    raw = rng.standard_normal((3, 3, 4))
    out = minmax_norm(raw, {1, 3})
    full = minmax_norm(raw, {0, 1, 2, 3})
    assert (out.data[:, :, 0] == 0).all()
    assert (out.data[:, :, 2] == 0).all()
    # active channels agree with the unfiltered normalization
    assert np.array_equal(out.data[:, :, 1], full.data[:, :, 1])
    assert np.array_equal(out.data[:, :, 3], full.data[:, :, 3])


def test_patch_text_cam_peak_at_matching_patch():
    rng = np.random.default_rng(2)
    t = rng.standard_normal((4, 1))
    p = rng.standard_normal((2, 2, 4))
    p[1, 1] = t[:, 0]
    cam = generate_patch_text_cam(p, t, {0})
    assert cam.data[1, 1, 0] == pytest.approx(1.0)
    assert cam.data.argmax() == np.ravel_multi_index((1, 1, 0), cam.data.shape)


def test_patch_text_cam_empty_labels_all_zero():
    rng = np.random.default_rng(3)
    cam = generate_patch_text_cam(rng.random((2, 2, 3)) + 0.1, rng.standard_normal((3, 2)), set())
    assert (cam.data == 0).all()


def test_patch_text_cam_equals_composition():
    rng = np.random.default_rng(4)
    p = rng.standard_normal((3, 2, 5))
    t = rng.standard_normal((5, 3))
    labels = {0, 2}
    composed = minmax_norm(cosine_sim(p, t), labels)
    assert np.array_equal(generate_patch_text_cam(p, t, labels).data, composed.data)


def test_patch_text_cam_scale_invariance():
    rng = np.random.default_rng(5)
    p = rng.standard_normal((2, 2, 4))
    t = rng.standard_normal((4, 2))
    base = generate_patch_text_cam(p, t, {0, 1})
    p2 = p.copy()
    p2[0, 1] *= 17.0
    t2 = t.copy()
    t2[:, 1] *= 0.03
    rescaled = generate_patch_text_cam(p2, t2, {0, 1})
    assert np.allclose(base.data, rescaled.data, atol=1e-6)


def test_mask_all_below_threshold_is_background():
    cam = Cam(data=np.full((2, 2, 2), 0.1))
    mask = cam_to_mask(cam, {0, 1}, 0.45)
    assert (mask.labels == 0).all()


def test_mask_dominant_channel_everywhere():
    data = np.zeros((2, 2, 3))
    data[:, :, 1] = 1.0
    mask = cam_to_mask(Cam(data=data), {0, 1, 2}, 0.45)
    assert (mask.labels == 2).all()


def test_mask_matches_per_pixel_rule():
    data = np.array(
        [
            [[0.9, 0.2], [0.4, 0.44]],
            [[0.5, 0.5], [0.1, 0.7]],
        ]
    )
    mask = cam_to_mask(Cam(data=data), {0, 1}, 0.45)
    for h in range(2):
        for w in range(2):
            scores = data[h, w]
            if scores.max() < 0.45:
                expected = 0
            else:
                expected = int(np.argmax(scores)) + 1  # ties toward lowest
            assert mask.labels[h, w] == expected
    assert mask.labels[0, 1] == 0  # both channels below threshold
    assert mask.labels[1, 0] == 1  # exact tie goes to class 0


def test_mask_ignores_channels_outside_labels():
    data = np.zeros((1, 1, 3))
    data[0, 0] = [0.9, 0.95, 0.2]
    mask = cam_to_mask(Cam(data=data), {0}, 0.45)
    assert mask.labels[0, 0] == 1  # channel 1 never competes


def test_mask_invariant_to_monotone_prenorm_transform():
    rng = np.random.default_rng(6)
    raw = rng.standard_normal((3, 3, 2))
    labels = {0, 1}
    base = cam_to_mask(minmax_norm(raw, labels), labels, 0.45)
    warped = raw.copy()
    warped[:, :, 0] = 3.0 * warped[:, :, 0] + 11.0
    warped[:, :, 1] = 0.25 * warped[:, :, 1] - 2.0
    again = cam_to_mask(minmax_norm(warped, labels), labels, 0.45)
    assert np.array_equal(base.labels, again.labels)
