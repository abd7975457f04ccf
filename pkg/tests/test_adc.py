import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import rand_scene
from texgs.adam import OptimizerState, adam_step
from texgs.adc import (
    AdcConfig,
    AdcState,
    adc_step,
    densify_score_update,
    importance,
    prune_to_fraction,
    reset_opacity,
)
from texgs.geometry import logit, quat_to_rotation, sigmoid


def plain(rng, n, scale=(0.3, 0.9)):
    return rand_scene(rng, "none", n=n, deg=0, scale=scale)


# ---- score accumulation -------------------------------------------------

def test_single_pixel_contribution():
    adc = AdcState.zeros(1)
    densify_score_update(adc, [np.array([[3.0, 4.0]])])
    assert adc.score[0] == adc.score_sum_first[0] == 5.0


def test_cancelling_pair():
    g = np.array([0.3, -0.4])
    adc = AdcState.zeros(1)
    densify_score_update(adc, [np.stack([g, -g])])
    assert adc.score[0] == pytest.approx(2 * np.linalg.norm(g))
    assert adc.score_sum_first[0] == 0.0


def test_zero_gradients():
    adc = AdcState.zeros(2)
    densify_score_update(adc, [np.zeros((4, 2)), np.zeros((0, 2))])
    assert np.all(adc.score == 0)
    assert adc.count.tolist() == [1, 0]


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 30))
def test_triangle_inequality(seed, p):
    rng = np.random.default_rng(seed)
    adc = AdcState.zeros(3)
    for _ in range(3):
        densify_score_update(adc, [rng.normal(size=(p, 2)) for _ in range(3)])
    assert np.all(adc.score >= adc.score_sum_first * (1 - 1e-12))
    assert np.all(adc.score >= 0)


# ---- densify / prune ----------------------------------------------------

def test_all_below_tau_only_prunes(rng):
    s = plain(rng, 6)
    s.opacity_logits[[1, 4]] = logit(0.001)
    adc = AdcState.zeros(6)
    adc.score[:] = 1e-6
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3), extent=1.0, rng=rng)
    keep = [0, 2, 3, 5]
    np.testing.assert_array_equal(out.means, s.means[keep])
    np.testing.assert_array_equal(out.log_scales, s.log_scales[keep])
    assert len(adc) == 4 and np.all(adc.score == 0)


def test_tiny_hot_gaussian_clones_once(rng):
    s = plain(rng, 5, scale=(1e-4, 2e-4))
    adc = AdcState.zeros(5)
    adc.score[2] = 1.0
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3), extent=1.0, rng=rng)
    assert len(out) == 6
    np.testing.assert_array_equal(out.means[:5], s.means)
    np.testing.assert_array_equal(out.log_scales[5], s.log_scales[2])


def test_split_statistics():
    rng = np.random.default_rng(5)
    n = 100
    s = plain(rng, n, scale=(0.2, 0.6))
    adc = AdcState.zeros(n)
    adc.score[:] = 1.0
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3), extent=1.0, rng=rng)
    assert len(out) == 2 * n
    children = out.means.reshape(2, n, 3)  # appended child-major
    R = quat_to_rotation(s.quats)
    sc = np.exp(s.log_scales)
    inside = 0
    for k in range(2):
        np.testing.assert_allclose(out.log_scales[k * n:(k + 1) * n], s.log_scales - np.log(1.6), atol=1e-12)
        local = np.einsum("nji,nj->ni", R, children[k] - s.means) / sc
        inside += np.sum(np.linalg.norm(local, axis=1) <= 3.0)
    assert inside / (2 * n) >= 0.95


def test_max_gaussians_cap(rng):
    s = plain(rng, 10, scale=(1e-4, 2e-4))
    adc = AdcState.zeros(10)
    adc.score[:] = np.arange(10) + 1.0
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3, max_gaussians=13), extent=1.0, rng=rng)
    assert len(out) == 13
    # the three highest scores were cloned
    np.testing.assert_array_equal(out.log_scales[10:], s.log_scales[[7, 8, 9]])


def test_optimizer_moments_follow_rows(rng):
    s = plain(rng, 4, scale=(1e-4, 2e-4))
    opt = OptimizerState(lr={"means": 0.1})
    adam_step(opt, s.params(), {"means": rng.normal(size=(4, 3))})
    m = opt.m["means"].copy()
    adc = AdcState.zeros(4)
    adc.score[1] = 1.0
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3), extent=1.0, rng=rng, opt=opt)
    assert opt.m["means"].shape == out.means.shape
    np.testing.assert_array_equal(opt.m["means"][:4], m)
    assert np.all(opt.m["means"][4] == 0)


def test_never_prunes_to_empty(rng):
    s = plain(rng, 3)
    s.opacity_logits[:] = logit(1e-4)
    out = adc_step(s, AdcState.zeros(3), AdcConfig(), extent=1.0, rng=rng)
    assert len(out) == 1


def test_textured_scene_rejected(rng):
    s = rand_scene(rng, "rgb", n=3)
    with pytest.raises(ValueError):
        adc_step(s, AdcState.zeros(3), AdcConfig(), extent=1.0, rng=rng)


def test_opacity_reset(rng):
    s = plain(rng, 5)
    out = reset_opacity(s)
    o = sigmoid(out.opacity_logits)
    assert np.all(o <= 0.01 + 1e-12)
    np.testing.assert_allclose(o, np.minimum(sigmoid(s.opacity_logits), 0.01))


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_children_stay_valid(seed):
    rng = np.random.default_rng(seed)
    s = plain(rng, 8, scale=(1e-3, 0.5))
    adc = AdcState.zeros(8)
    adc.score[:] = rng.uniform(0, 2e-3, 8)
    adc.count[:] = 1
    out = adc_step(s, adc, AdcConfig(tau=1e-3), extent=1.0, rng=rng)
    for arr in out.params().values():
        assert np.all(np.isfinite(arr))
    assert np.all(np.linalg.norm(out.quats, axis=1) > 0)


# ---- importance pruning -------------------------------------------------

def test_fraction_one_is_identity(rng):
    s = plain(rng, 7)
    np.testing.assert_array_equal(prune_to_fraction(s, 1.0).means, s.means)


def test_half_of_ten(rng):
    s = plain(rng, 10)
    out = prune_to_fraction(s, 0.5)
    assert len(out) == 5
    assert s.means[np.argmax(importance(s))].tolist() in out.means.tolist()


def test_keeps_original_order(rng):
    s = plain(rng, 10)
    out = prune_to_fraction(s, 0.3)
    rows = [int(np.flatnonzero((s.means == m).all(axis=1))[0]) for m in out.means]
    assert rows == sorted(rows)


def test_tie_break_by_index(rng):
    s = plain(rng, 4)
    s.opacity_logits[:] = 0.0
    s.log_scales[:] = 0.0
    np.testing.assert_array_equal(prune_to_fraction(s, 0.5).means, s.means[:2])


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_idempotent(seed, f):
    rng = np.random.default_rng(seed)
    s = plain(rng, 17)
    once = prune_to_fraction(s, f)
    twice = prune_to_fraction(once, f, base_count=len(s))
    np.testing.assert_array_equal(once.means, twice.means)


def test_bad_fraction(rng):
    s = plain(rng, 3)
    for f in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            prune_to_fraction(s, f)
    from texgs.scene import Scene
    with pytest.raises(ValueError):
        prune_to_fraction(Scene.empty(), 0.5)
