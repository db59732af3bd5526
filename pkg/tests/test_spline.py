import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.interpolate import CubicSpline

from rpcbf.spline import (naive_max, second_derivative_operator, spline_max, spline_max_batch,
                          spline_weights)


def braking_samples(dt, H):
    t = dt * np.arange(H)
    return t - 0.5 * t**2


# -- examples -------------------------------------------------------------------

def test_braking_parabola_maximum():
    res = spline_max(braking_samples(0.3, 8), 0.3)
    assert res.value == pytest.approx(0.5, abs=1e-10)
    assert res.time == pytest.approx(1.0, abs=1e-10)
    assert res.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert res.knot is None


def test_constant_data():
    res = spline_max(np.full(6, 2.5), 0.1)
    assert res.value == 2.5 and res.time == 0.0 and res.knot == 0
    np.testing.assert_array_equal(res.weights, np.eye(6)[0])


def test_monotone_increasing_data():
    h = np.array([0.0, 0.1, 0.3, 0.35, 0.9])
    res = spline_max(h, 0.2)
    assert res.value == 0.9
    assert res.time == pytest.approx(0.8)
    np.testing.assert_array_equal(res.weights, np.eye(5)[-1])


def test_two_and_three_knots():
    assert spline_max(np.array([1.0, 3.0]), 0.5).value == 3.0
    # three knots: a single parabola through the points
    res = spline_max(np.array([0.0, 1.0, 0.0]), 1.0)
    assert res.value == pytest.approx(1.0) and res.time == pytest.approx(1.0)
    res = spline_max(np.array([0.0, 1.0, 1.0]), 1.0)
    assert res.value == pytest.approx(1.125) and res.time == pytest.approx(1.5)


def test_too_few_or_nonfinite_samples():
    with pytest.raises(ValueError):
        spline_max(np.array([1.0]), 0.1)
    with pytest.raises(ValueError):
        spline_max(np.array([1.0, np.nan, 2.0]), 0.1)


def test_naive_max_examples():
    assert naive_max([0.0, 1.0, 0.0]) == (1.0, 1)
    assert naive_max([2.0, 2.0]) == (2.0, 0)
    value, k = naive_max(braking_samples(0.3, 8))
    assert k == 3 and value == pytest.approx(0.495, abs=1e-12)
    with pytest.raises(ValueError):
        naive_max([])


def test_ties_go_to_earliest_time():
    h = np.array([0.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0])
    # symmetric bumps; the second one is a mirror image, so the maximum is shared
    res = spline_max(h, 0.1)
    assert res.time < 0.3


# -- oracle checks --------------------------------------------------------------

@pytest.mark.parametrize("H", [4, 5, 8, 17, 50])
def test_operator_matches_scipy_not_a_knot(H):
    rng = np.random.default_rng(H)
    h = rng.normal(size=H)
    dt = 0.1
    M = second_derivative_operator(H) @ h / dt**2
    cs = CubicSpline(dt * np.arange(H), h, bc_type="not-a-knot")
    np.testing.assert_allclose(M, cs(dt * np.arange(H), 2), rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_maximum_matches_dense_evaluation(seed):
    rng = np.random.default_rng(seed)
    H = int(rng.integers(4, 40))
    dt = 0.1
    h = np.cumsum(rng.normal(size=H))
    res = spline_max(h, dt)
    cs = CubicSpline(dt * np.arange(H), h, bc_type="not-a-knot")
    dense = cs(np.linspace(0, dt * (H - 1), 200 * H))
    roots = cs.derivative().roots(extrapolate=False)
    exact = max(h.max(), cs(roots).max() if len(roots) else -np.inf)
    assert res.value >= dense.max() - 1e-12
    assert res.value == pytest.approx(exact, abs=1e-10)
    assert cs(res.time) == pytest.approx(res.value, abs=1e-10)


def test_compiled_and_numpy_search_agree():
    rng = np.random.default_rng(0)
    h = np.cumsum(rng.normal(size=(500, 30)), axis=1)
    a = spline_max_batch(h, 0.05, backend="numpy")
    b = spline_max_batch(h, 0.05, backend="compiled")
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


# -- invariants -----------------------------------------------------------------

finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(finite, min_size=2, max_size=30), st.floats(0.01, 1.0))
def test_spline_max_dominates_naive_max(h, dt):
    h = np.array(h)
    assert spline_max(h, dt).value >= h.max() - 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=2, max_size=30), st.floats(0.01, 1.0))
def test_weights_reproduce_value(h, dt):
    h = np.array(h)
    res = spline_max(h, dt)
    assert res.weights @ h == pytest.approx(res.value, abs=1e-9 * max(1.0, np.abs(h).max()))
    assert res.weights.sum() == pytest.approx(1.0, abs=1e-9)
    if res.knot is not None:
        np.testing.assert_array_equal(res.weights, np.eye(len(h))[res.knot])


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.2, 3), st.integers(4, 40))
def test_quadratic_extremum_is_exact(c0, t_peak, curv, H):
    dt = 0.1
    T = dt * (H - 1)
    assume(0.05 < t_peak < T - 0.05)
    t = dt * np.arange(H)
    h = c0 - curv * (t - t_peak) ** 2
    res = spline_max(h, dt)
    assert res.value == pytest.approx(c0, abs=1e-10)
    assert res.time == pytest.approx(t_peak, abs=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_envelope_weights_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    H = 20
    dt = 0.1
    t = dt * np.arange(H)
    h = np.sin(2.0 * t + rng.uniform(0, 6)) + 0.3 * rng.normal(size=H) * 0.1
    res = spline_max(h, dt)
    eps = 1e-7
    fd = np.empty(H)
    for j in range(H):
        e = np.zeros(H)
        e[j] = eps
        fd[j] = (spline_max(h + e, dt).value - spline_max(h - e, dt).value) / (2 * eps)
    np.testing.assert_allclose(res.weights, fd, atol=1e-6)


def test_weights_at_fixed_time_are_linear_interpolant():
    # weights equal dS(t)/dh at fixed t: check against scipy with unit data vectors
    H, dt, seg, s = 12, 0.2, 4, 0.07
    w = spline_weights(H, dt, seg, s)
    t = seg * dt + s
    ref = [CubicSpline(dt * np.arange(H), e, bc_type="not-a-knot")(t) for e in np.eye(H)]
    np.testing.assert_allclose(w, ref, atol=1e-12)
