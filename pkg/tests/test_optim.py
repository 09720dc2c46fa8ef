import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantsr.errors import InvalidArgument
from quantsr.optim import Adam, clip_grad_norm, clip_weights, ema_update, global_norm, lr_schedule


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.ones(3)}
    opt = Adam()
    opt.step(p, {"w": np.full(3, 2.0)}, 0.1)
    before = p["w"].copy()
    m_before = opt.m["w"].copy()
    opt.step(p, {"w": np.zeros(3)}, 0.0)
    np.testing.assert_array_equal(p["w"], before)
    np.testing.assert_allclose(opt.m["w"], 0.9 * m_before)


def test_adam_first_step_is_signed_lr():
    p = {"w": np.zeros(4)}
    g = np.array([0.3, -2.0, 5.0, -1e-3])
    Adam().step(p, {"w": g}, 0.01)
    np.testing.assert_allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_skips_non_finite():
    p = {"w": np.ones(2)}
    opt = Adam()
    assert not opt.step(p, {"w": np.array([np.nan, 1.0])}, 0.1)
    assert opt.skipped == 1 and opt.t == 0
    np.testing.assert_array_equal(p["w"], 1.0)


def test_two_engines_stay_identical(rng):
    a = {"w": rng.normal(size=10)}
    b = {"w": a["w"].copy()}
    oa, ob = Adam(), Adam()
    for _ in range(100):
        g = rng.normal(size=10)
        oa.step(a, {"w": g}, 1e-3)
        ob.step(b, {"w": g.copy()}, 1e-3)
    assert a["w"].tobytes() == b["w"].tobytes()


def test_lr_schedule_landmarks():
    assert lr_schedule(0, 1.0, 100, 10, 0.01) == 0.0
    assert lr_schedule(10, 1.0, 100, 10, 0.01) == pytest.approx(1.0)
    assert lr_schedule(100, 1.0, 100, 10, 0.01) == pytest.approx(0.01)
    assert lr_schedule(55, 1.0, 100, 10, 0.01) == pytest.approx((1.0 + 0.01) / 2)


@given(st.integers(2, 300), st.integers(0, 50))
@settings(max_examples=40, deadline=None)
def test_lr_schedule_non_increasing_after_warmup(iterations, warm):
    warm = min(warm, iterations - 1)
    lrs = [lr_schedule(s, 1e-3, iterations, warm, 1e-5) for s in range(warm, iterations + 1)]
    assert all(b <= a + 1e-18 for a, b in zip(lrs, lrs[1:]))


def test_clip_grad_norm_cases():
    g = {"a": np.array([2.0, 0.0])}
    assert clip_grad_norm(g, 1.0) == pytest.approx(2.0)
    np.testing.assert_allclose(g["a"], [1.0, 0.0])
    g = {"a": np.array([0.3, 0.4])}
    clip_grad_norm(g, 1.0)
    np.testing.assert_array_equal(g["a"], [0.3, 0.4])
    with pytest.raises(InvalidArgument):
        clip_grad_norm(g, 0.0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10))
@settings(max_examples=50, deadline=None)
def test_clip_grad_norm_bound(values, max_norm):
    g = {"a": np.array(values)}
    clip_grad_norm(g, max_norm)
    assert global_norm(g) <= max_norm + 1e-6


def test_clip_weights():
    p = {"w": np.array([3.0, -4.0, 0.5])}
    clip_weights(p, -1.5, 1.5)
    np.testing.assert_array_equal(p["w"], [1.5, -1.5, 0.5])
    inside = {"w": np.array([0.1, -0.2])}
    raw = inside["w"].tobytes()
    clip_weights(inside, -1.5, 1.5)
    assert inside["w"].tobytes() == raw


def test_ema_closed_form():
    p = {"w": np.full(3, 2.0)}
    s = {"w": np.zeros(3)}
    for _ in range(10):
        ema_update(s, p, 0.9)
    np.testing.assert_allclose(s["w"], 2.0 + 0.9**10 * (0.0 - 2.0))
    ema_update(s, p, 0.0)
    np.testing.assert_array_equal(s["w"], p["w"])
    with pytest.raises(InvalidArgument):
        ema_update(s, p, 1.0)
