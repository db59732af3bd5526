import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpcbf.rollout import (RolloutError, rk4_step, rollout, rollout_batch,
                           sample_disturbances)
from rpcbf.systems import (SystemModel, lqr_gain, make_double_integrator, make_policy,
                           make_segway, with_disturbance_box)


def segway_and_policy():
    seg = make_segway()
    K = lqr_gain(seg, np.diag([0.01, 1.0, 1.0, 1.0]), np.eye(1))
    return seg, make_policy(seg, "saturating_linear", gains=K)


def fd_final_state(system, policy, x0, dist, dt, H, eps=1e-6):
    cols = []
    for i in range(len(x0)):
        e = np.zeros(len(x0))
        e[i] = eps
        xp = rollout(system, policy, x0 + e, dist, dt, H, False).states[-1]
        xm = rollout(system, policy, x0 - e, dist, dt, H, False).states[-1]
        cols.append((xp - xm) / (2 * eps))
    return np.stack(cols, axis=1)


# -- disturbance sampling ----------------------------------------------------------

def test_degenerate_box_gives_constant_samples():
    di = make_double_integrator((1.1, 1.1))
    D = sample_disturbances(di, 30, 7, 0.5, seed=4)
    np.testing.assert_array_equal(D, np.full((7, 30, 1), 1.1))


def test_single_sample_is_lowest_corner():
    di = make_double_integrator((0.8, 1.2))
    np.testing.assert_array_equal(sample_disturbances(di, 10, 1, seed=9), np.full((1, 10, 1), 0.8))


def test_anchor_samples():
    di = make_double_integrator((0.8, 1.2))
    D = sample_disturbances(di, 10, 5, seed=2)
    np.testing.assert_array_equal(D[0], 0.8)
    np.testing.assert_array_equal(D[1], 1.2)


def test_vertex_fraction():
    di = make_double_integrator((0.8, 1.2))
    D = sample_disturbances(di, 1000, 103, vertex_weight=0.5, seed=0)[3:].ravel()
    assert D.size == 100_000
    frac = np.mean((D == 0.8) | (D == 1.2))
    assert frac == pytest.approx(0.5, abs=0.01)


def test_samples_inside_box():
    seg = with_disturbance_box(make_segway(), [30.0], [50.0])
    D = sample_disturbances(seg, 50, 40, 0.3, seed=[1, 2])
    assert D.min() >= 30.0 and D.max() <= 50.0


def test_sampling_is_deterministic_and_prefix_stable():
    di = make_double_integrator((0.8, 1.2))
    a = sample_disturbances(di, 20, 10, seed=123)
    b = sample_disturbances(di, 20, 10, seed=123)
    c = sample_disturbances(di, 20, 30, seed=123)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(a, c[:10])
    assert not np.array_equal(a[3:], sample_disturbances(di, 20, 10, seed=124)[3:])


# -- rollout examples ---------------------------------------------------------------

@pytest.mark.parametrize("backend", ["numpy", "compiled"])
def test_braking_parabola_is_exact(backend):
    di = make_double_integrator((1.0, 1.0))
    pol = make_policy(di, "constant", value=-1.0)
    res = rollout(di, pol, [0.0, 1.0], np.ones((21, 1)), 0.1, 21, backend=backend)
    k = np.arange(21)
    np.testing.assert_allclose(res.states[:, 0], 0.1 * k - 0.005 * k**2, rtol=0, atol=1e-14)
    assert res.states.shape == (21, 2)
    assert res.h_values.shape == (21,) and res.sensitivities.shape == (21, 2, 2)
    assert res.horizon == pytest.approx(2.1)


def test_zero_dynamics():
    zero = SystemModel(
        name="zero", state_dim=3, control_dim=1, disturbance_dim=1,
        drift=lambda x, d: np.zeros(np.shape(x)),
        input_map=lambda x, d: np.zeros(np.shape(x) + (1,)),
        drift_jacobian=lambda x, d: np.zeros(np.shape(x) + (3,)),
        input_map_jacobian=lambda x, d, u: np.zeros(np.shape(x) + (3,)),
        control_box=(np.array([-1.0]), np.array([1.0])),
        disturbance_box=(np.array([0.0]), np.array([1.0])),
        constraint=lambda x: np.asarray(x)[..., 0],
        constraint_gradient=lambda x: np.broadcast_to([1.0, 0.0, 0.0], np.shape(x)).copy(),
    )
    pol = make_policy(zero, "constant", value=0.5)
    x0 = np.array([0.3, -0.2, 1.0])
    res = rollout(zero, pol, x0, np.zeros((12, 1)), 0.1, 12)
    np.testing.assert_array_equal(res.states, np.tile(x0, (12, 1)))
    np.testing.assert_array_equal(res.sensitivities, np.tile(np.eye(3), (12, 1, 1)))


def test_segway_final_sensitivity_matches_finite_differences():
    seg, pol = segway_and_policy()
    x0 = np.array([0.1, 0.1, 0.0, 0.0])
    H = 30
    dist = np.full((H, 1), seg.nominal_disturbance[0])
    res = rollout(seg, pol, x0, dist, 0.1, H)
    fd = fd_final_state(seg, pol, x0, dist, 0.1, H)
    np.testing.assert_allclose(res.sensitivities[-1], fd, rtol=1e-5, atol=1e-6 * np.abs(fd).max())


def test_identity_initial_sensitivity():
    seg, pol = segway_and_policy()
    res = rollout(seg, pol, [0.2, -0.1, 0.3, 0.0], np.full((5, 1), 40.0), 0.1, 5)
    np.testing.assert_array_equal(res.sensitivities[0], np.eye(4))


def test_blow_up_reports_step():
    di = make_double_integrator((1e-308, 1e-308))
    pol = make_policy(di, "constant", value=1.0)
    for backend in ("numpy", "compiled"):
        with pytest.raises(RolloutError) as info:
            rollout(di, pol, [0.0, 0.0], np.full((40, 1), 1e-308), 0.1, 40, backend=backend)
        assert 1 <= info.value.step < 40


def test_short_disturbance_rejected():
    di = make_double_integrator()
    pol = make_policy(di, "constant", value=0.0)
    with pytest.raises(ValueError):
        rollout(di, pol, [0.0, 0.0], np.ones((3, 1)), 0.1, 5)


# -- invariants ---------------------------------------------------------------------

def test_directional_derivative_consistency_di():
    di = make_double_integrator((0.8, 1.2))
    pol = make_policy(di, "saturating_linear", gains=[1.0, 2.0])
    rng = np.random.default_rng(0)
    dist = sample_disturbances(di, 40, 4, seed=0)
    for i in range(4):
        x0 = rng.uniform(-1, 1, 2)
        delta = rng.normal(size=2)
        delta *= 1e-5 / np.linalg.norm(delta)
        base = rollout(di, pol, x0, dist[i], 0.1, 40)
        moved = rollout(di, pol, x0 + delta, dist[i], 0.1, 40, False)
        err = moved.states - base.states - base.sensitivities @ delta
        assert np.abs(err).max() <= 1e-6


@pytest.mark.parametrize("which", ["di", "segway"])
def test_sensitivities_match_finite_differences(which):
    if which == "di":
        system = make_double_integrator((0.8, 1.2))
        pol = make_policy(system, "saturating_linear", gains=[1.0, 1.5])
        scale = 1.0
    else:
        system, pol = segway_and_policy()
        scale = 0.2
    rng = np.random.default_rng(21)
    H = 25
    for trial in range(10):
        x0 = rng.uniform(-scale, scale, system.state_dim)
        dist = sample_disturbances(system, H, 5, seed=trial)[rng.integers(5)]
        res = rollout(system, pol, x0, dist, 0.1, H)
        fd = fd_final_state(system, pol, x0, dist, 0.1, H)
        np.testing.assert_allclose(res.sensitivities[-1], fd, rtol=1e-5,
                                   atol=1e-6 * max(1.0, np.abs(fd).max()))


def test_fourth_order_convergence_on_segway():
    seg, pol = segway_and_policy()
    # stays inside the linear region of the saturating policy, so the
    # closed loop is smooth and the integrator shows its full order
    x0 = np.array([0.0, 0.08, 0.2, 0.0])
    T, d = 2.0, seg.nominal_disturbance[0]

    def final(dt):
        H = int(round(T / dt)) + 1
        return rollout(seg, pol, x0, np.full((H, 1), d), dt, H, False).states[-1]

    dts = np.array([0.1, 0.05, 0.025])
    ref = final(dts[-1] / 64)
    errs = np.array([np.linalg.norm(final(dt) - ref) for dt in dts])
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert slope >= 3.5


def test_rollouts_are_deterministic():
    seg, pol = segway_and_policy()
    dist = sample_disturbances(seg, 40, 6, seed=77)
    X0 = np.tile([0.1, 0.05, 0.0, 0.0], (6, 1))
    a = rollout_batch(seg, pol, X0, dist, 0.1, 40, True)
    b = rollout_batch(seg, pol, X0, dist, 0.1, 40, True)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.sensitivities.tobytes() == b.sensitivities.tobytes()


@pytest.mark.parametrize("which", ["di", "segway"])
def test_compiled_matches_numpy(which):
    if which == "di":
        system = make_double_integrator((0.8, 1.2))
        pol = make_policy(system, "saturating_linear", gains=[1.0, 2.0])
    else:
        system, pol = segway_and_policy()
    rng = np.random.default_rng(8)
    X0 = rng.uniform(-0.3, 0.3, (8, system.state_dim))
    dist = sample_disturbances(system, 30, 8, seed=1)
    a = rollout_batch(system, pol, X0, dist, 0.1, 30, True, backend="numpy")
    b = rollout_batch(system, pol, X0, dist, 0.1, 30, True, backend="compiled")
    np.testing.assert_allclose(a.states, b.states, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(a.sensitivities, b.sensitivities, rtol=1e-10, atol=1e-10)


def test_rk4_step_jacobian_matches_finite_differences():
    seg, pol = segway_and_policy()
    x = np.array([0.2, 0.1, -0.3, 0.4])
    d = np.array([41.0])
    _, S = rk4_step(seg, pol, x, d, 0.1, with_jacobian=True)
    cols = []
    for i in range(4):
        e = np.zeros(4)
        e[i] = 1e-6
        cols.append((rk4_step(seg, pol, x + e, d, 0.1) - rk4_step(seg, pol, x - e, d, 0.1)) / 2e-6)
    np.testing.assert_allclose(S, np.stack(cols, 1), rtol=1e-5, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0.8, 1.2))
def test_di_undisturbed_energy_free_motion(p0, v0, m):
    # zero control: position is linear in time, velocity constant, for any mass
    di = make_double_integrator((0.8, 1.2))
    pol = make_policy(di, "constant", value=0.0)
    res = rollout(di, pol, [p0, v0], np.full((11, 1), m), 0.1, 11)
    np.testing.assert_allclose(res.states[:, 1], v0, atol=1e-12)
    np.testing.assert_allclose(res.states[:, 0], p0 + v0 * 0.1 * np.arange(11), atol=1e-12)
