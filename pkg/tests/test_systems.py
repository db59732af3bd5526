import numpy as np
import pytest

from rpcbf.systems import (SEGWAY_DEFAULTS, lqr_gain, make_double_integrator, make_policy,
                           make_segway)


def central_jacobian(fun, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = eps
        cols.append((fun(x + e) - fun(x - e)) / (2 * eps))
    return np.stack(cols, axis=-1)


def random_triples(system, rng, count):
    lo_d, hi_d = system.disturbance_box
    lo_u, hi_u = system.control_box
    for _ in range(count):
        x = rng.uniform(-1.0, 1.0, system.state_dim)
        d = rng.uniform(lo_d, hi_d)
        u = rng.uniform(lo_u, hi_u)
        yield x, d, u


SYSTEMS = {
    "di": lambda: make_double_integrator((0.8, 1.2)),
    "segway": lambda: make_segway(),
}


# -- examples -------------------------------------------------------------------

def test_di_undisturbed_dynamics():
    di = make_double_integrator((1.0, 1.0))
    xdot = di.dynamics(np.array([0.0, 1.0]), np.array([1.0]), np.array([-1.0]))
    np.testing.assert_array_equal(xdot, [1.0, -1.0])


@pytest.mark.parametrize("m", [0.8, 1.0, 1.2])
def test_di_origin_is_equilibrium(m):
    di = make_double_integrator((0.8, 1.2))
    np.testing.assert_array_equal(di.dynamics(np.zeros(2), np.array([m]), np.zeros(1)), [0, 0])


def test_di_constraint_value():
    di = make_double_integrator(position_bound=1.0)
    assert di.constraint(np.array([1.3, 0.0])) == pytest.approx(0.3, abs=1e-15)
    assert di.constraint(np.array([-1.3, 0.0])) == pytest.approx(0.3, abs=1e-15)


def test_di_rejects_nonpositive_mass():
    with pytest.raises(ValueError):
        make_double_integrator((0.0, 1.0))


def test_segway_upright_rest_is_equilibrium():
    seg = make_segway()
    xdot = seg.dynamics(np.zeros(4), seg.nominal_disturbance, np.zeros(1))
    np.testing.assert_array_equal(xdot, np.zeros(4))


def test_segway_constraint_on_tilt_boundary():
    seg = make_segway()
    assert seg.constraint(np.array([0.0, 0.3 * np.pi, 0.0, 0.0])) == pytest.approx(0.0, abs=1e-15)


def test_segway_drift_jacobian_example():
    seg = make_segway()
    x = np.array([0.1, 0.2, 0.0, 0.0])
    d = seg.nominal_disturbance
    fd = central_jacobian(lambda z: seg.drift(z, d), x)
    np.testing.assert_allclose(seg.drift_jacobian(x, d), fd, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("key,value", [("wheel_radius", 0.0), ("body_mass_lo", -1.0),
                                       ("com_height", -0.5)])
def test_segway_rejects_nonpositive_parameters(key, value):
    with pytest.raises(ValueError):
        make_segway({key: value})


def test_segway_rejects_unknown_parameter():
    with pytest.raises(KeyError):
        make_segway({"wheel_radus": 0.2})


def test_constant_policy_outputs_value():
    di = make_double_integrator()
    pol = make_policy(di, "constant", value=0.0)
    assert pol.act(np.array([0.7, -0.3]))[0] == 0.0


def test_saturating_linear_in_linear_region():
    di = make_double_integrator()
    pol = make_policy(di, "saturating_linear", gains=[1.0, 1.0])
    assert pol.act(np.array([0.2, 0.1]))[0] == pytest.approx(-0.3)
    np.testing.assert_array_equal(pol.act_jacobian(np.array([0.2, 0.1])), [[-1.0, -1.0]])


def test_saturating_linear_saturated():
    di = make_double_integrator()
    pol = make_policy(di, "saturating_linear", gains=[10.0, 10.0])
    assert pol.act(np.array([1.0, 1.0]))[0] == -1.0
    np.testing.assert_array_equal(pol.act_jacobian(np.array([1.0, 1.0])), [[0.0, 0.0]])


def test_policy_gain_dimension_mismatch():
    with pytest.raises(ValueError):
        make_policy(make_double_integrator(), "saturating_linear", gains=[1.0, 1.0, 1.0])


def test_bang_bang_uses_box_limits():
    di = make_double_integrator()
    pol = make_policy(di, "bang_bang", gains=[1.0, 0.0])
    assert pol.act(np.array([0.5, 0.0]))[0] == -1.0
    assert pol.act(np.array([-0.5, 0.0]))[0] == 1.0


def test_lqr_gain_stabilises_segway():
    seg = make_segway()
    K = lqr_gain(seg, np.diag([0.01, 1.0, 1.0, 1.0]), np.eye(1))
    d = seg.nominal_disturbance
    A = seg.drift_jacobian(np.zeros(4), d)
    B = seg.input_map(np.zeros(4), d)
    assert np.linalg.eigvals(A - B @ K).real.max() < 0


# -- invariants -----------------------------------------------------------------

@pytest.mark.parametrize("name", SYSTEMS)
def test_jacobians_match_finite_differences(name):
    system = SYSTEMS[name]()
    rng = np.random.default_rng(11)
    for x, d, u in random_triples(system, rng, 100):
        np.testing.assert_allclose(system.drift_jacobian(x, d),
                                   central_jacobian(lambda z: system.drift(z, d), x),
                                   rtol=1e-5, atol=1e-7)
        fd = central_jacobian(lambda z: system.input_map(z, d) @ u, x)
        np.testing.assert_allclose(system.input_map_jacobian(x, d, u), fd, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("name", SYSTEMS)
def test_constraint_gradient_matches_directional_differences(name):
    system = SYSTEMS[name]()
    rng = np.random.default_rng(5)
    checked = 0
    while checked < 100:
        x = rng.uniform(-3.0, 3.0, system.state_dim)
        if np.min(np.abs(x[:2])) < 1e-3:
            continue
        faces = np.sort(_face_values(system, x))
        if faces[-1] - faces[-2] < 1e-3:  # near the kink between faces
            continue
        delta = rng.normal(size=system.state_dim)
        delta /= np.linalg.norm(delta)
        eps = 1e-7
        fd = (system.constraint(x + eps * delta) - system.constraint(x - eps * delta)) / (2 * eps)
        exact = system.constraint_gradient(x) @ delta
        assert fd == pytest.approx(exact, rel=1e-6, abs=1e-9)
        checked += 1


def _face_values(system, x):
    # evaluate h on the four single-face variants by zeroing the other coordinates
    vals = []
    for i in range(system.state_dim):
        z = np.zeros_like(x)
        z[i] = x[i]
        vals.append(system.constraint(z))
    return np.array(vals)


@pytest.mark.parametrize("name", SYSTEMS)
@pytest.mark.parametrize("kind", ["saturating_linear", "constant", "bang_bang"])
def test_policies_stay_in_control_box(name, kind):
    system = SYSTEMS[name]()
    rng = np.random.default_rng(3)
    lo, hi = system.control_box
    gains = rng.normal(scale=50.0, size=(system.control_dim, system.state_dim))
    value = 10 * hi  # out of range on purpose; must be clipped
    pol = make_policy(system, kind, gains=gains, value=value)
    X = rng.normal(scale=3.0, size=(1000, system.state_dim))
    U = pol.act(X)
    assert np.all(U >= lo) and np.all(U <= hi)


def test_segway_defaults_documented():
    assert SEGWAY_DEFAULTS["theta_limit"] == pytest.approx(0.3 * np.pi)
    assert SEGWAY_DEFAULTS["position_limit"] == 2.0
