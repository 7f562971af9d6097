import math

import numpy as np
import pytest
from mpmath import fprod, mp, mpf

from denoisefuse.exceptions import ScheduleError, ShapeError
from denoisefuse.numerics import Rng
from denoisefuse.schedule import build_schedule, c1, c2, forward_noise, sigma

# mpmath, 40 digits: beta = [0.1, 0.2]
C1_T2 = 0.4225771273642582887548
C2_T2 = 0.0714285714285714285714
SIGMA_T2 = 0.2672612419124243846846


def test_default_schedule_alpha_bar():
    s = build_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 0.01
    mp.dps = 40
    betas = [mpf("1e-4") + (mpf("0.02") - mpf("1e-4")) * k / 999 for k in range(1000)]
    for t in (1, 10, 100, 1000):
        exact = fprod([1 - b for b in betas[:t]])
        assert abs(s.abar(t) - float(exact)) <= 1e-12 * float(exact)


def test_single_step():
    s = build_schedule(1, 0.5, 0.5)
    np.testing.assert_array_equal(s.alpha_bar, [0.5])


def test_two_step_tables():
    s = build_schedule(2, 0.1, 0.2)
    np.testing.assert_allclose(s.alpha, [0.9, 0.8], rtol=1e-15)
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], rtol=1e-15)


def test_alpha_bar_matches_recomputed_product():
    s = build_schedule(1000, 1e-4, 0.02)
    prod = 1.0
    for t in range(1, 1001):
        prod *= 1.0 - s.beta[t - 1]
        assert abs(prod - s.abar(t)) <= 1e-12 * prod


@pytest.mark.parametrize("T,bs,be", [(0, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2), (10, 0.1, 1.0)])
def test_invalid_bounds(T, bs, be):
    with pytest.raises(ScheduleError):
        build_schedule(T, bs, be)


def test_c1_c2_sigma_frozen_values():
    s = build_schedule(2, 0.1, 0.2)
    assert c1(s, 2) == pytest.approx(C1_T2, rel=1e-14)
    assert c2(s, 2) == pytest.approx(C2_T2, rel=1e-14)
    assert sigma(s, 2) == pytest.approx(SIGMA_T2, rel=1e-14)


def test_boundary_at_t1():
    s = build_schedule(2, 0.1, 0.2)
    assert c2(s, 1) == 0.0
    assert sigma(s, 1) == 0.0


def test_c1_vanishes_with_beta():
    vals = [c1(build_schedule(4, b, b), 1) for b in (1e-2, 1e-4, 1e-8, 1e-12)]
    assert all(v2 < v1 for v1, v2 in zip(vals, vals[1:]))
    assert vals[-1] < 1e-5


def test_sweep_default_schedule():
    s = build_schedule()
    for t in range(1, s.T + 1):
        k = c1(s, t)
        assert math.isfinite(k) and k > 0
        if t >= 2:
            assert c2(s, t) < s.beta[t - 1]
        assert sigma(s, t) ** 2 == c2(s, t) or math.isclose(sigma(s, t) ** 2, c2(s, t), rel_tol=1e-15)


def test_constants_are_pure():
    a, b = build_schedule(), build_schedule()
    for t in (1, 2, 500, 1000):
        assert c1(a, t) == c1(b, t) and c2(a, t) == c2(b, t) and sigma(a, t) == sigma(b, t)


def test_timestep_out_of_range():
    s = build_schedule(10)
    with pytest.raises(ScheduleError):
        c1(s, 0)
    with pytest.raises(ScheduleError):
        c2(s, 11)


def test_forward_noise_limits():
    s = build_schedule()
    x0 = Rng(0).standard_normal(5)
    np.testing.assert_allclose(forward_noise(s, x0, 10, np.zeros(5)), math.sqrt(s.abar(10)) * x0)
    eps = Rng(1).standard_normal(5)
    # alpha_bar_1000 ~ 4e-5
    np.testing.assert_allclose(forward_noise(s, x0, 1000, eps), eps, atol=0.02)


def test_forward_noise_identity_in_small_beta_limit():
    s = build_schedule(4, 1e-14, 1e-14)
    x0 = Rng(0).standard_normal(5)
    eps = Rng(1).standard_normal(5)
    np.testing.assert_allclose(forward_noise(s, x0, 4, eps), x0, atol=1e-6)


def test_forward_noise_shape_mismatch():
    with pytest.raises(ShapeError):
        forward_noise(build_schedule(), np.zeros(3), 1, np.zeros(4))


@pytest.mark.parametrize("t", [1, 100])
def test_forward_noise_moments(t):
    s = build_schedule()
    x0 = np.array([1.5, -0.5, 2.0])
    eps = Rng(t).standard_normal((100_000, 3))
    xt = forward_noise(s, np.broadcast_to(x0, eps.shape), t, eps)
    assert np.all(np.abs(xt.mean(axis=0) - math.sqrt(s.abar(t)) * x0) <= 1e-2)
    assert np.all(np.abs(xt.var(axis=0) / (1 - s.abar(t)) - 1) <= 0.03)
