"""Disturbed control-affine systems, box constraints and rollout policies.

All model callables are vectorised over leading batch axes: ``x`` has shape
``(..., n)``, ``d`` has shape ``(..., d)`` and ``u`` has shape ``(..., m)``.
The rollout engine relies on this to integrate many disturbance samples (and
many initial states) in a single pass.

Dynamics follow ``xdot = f(x, d) + g(x, d) u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional

import numpy as np

from . import kernels as _k

Array = np.ndarray


@dataclass(frozen=True)
class SystemModel:
    name: str
    state_dim: int
    control_dim: int
    disturbance_dim: int
    drift: Callable[[Array, Array], Array]
    input_map: Callable[[Array, Array], Array]
    drift_jacobian: Callable[[Array, Array], Array]
    input_map_jacobian: Callable[[Array, Array, Array], Array]
    control_box: tuple[Array, Array]
    disturbance_box: tuple[Array, Array]
    constraint: Callable[[Array], Array]
    constraint_gradient: Callable[[Array], Array]
    params: Mapping[str, float] = field(default_factory=dict)
    kernels: Optional[_k.SystemKernels] = None

    def __post_init__(self):
        for lo, hi, what in (
            (*self.control_box, "control"),
            (*self.disturbance_box, "disturbance"),
        ):
            if np.any(np.asarray(lo) > np.asarray(hi)):
                raise ValueError(f"{what} box has lower bound above upper bound")

    def dynamics(self, x, d, u):
        """Evaluate ``f(x, d) + g(x, d) u`` (batched)."""
        return self.drift(x, d) + np.einsum("...ij,...j->...i", self.input_map(x, d), u)

    @property
    def nominal_disturbance(self) -> Array:
        lo, hi = self.disturbance_box
        return 0.5 * (lo + hi)

    def disturbance_vertices(self) -> Array:
        """All ``2**d`` corners of the disturbance box, lowest corner first."""
        lo, hi = self.disturbance_box
        d = self.disturbance_dim
        bits = (np.arange(2**d)[:, None] >> np.arange(d)[None, :]) & 1
        return np.where(bits == 1, hi, lo).astype(float)

    def clip_control(self, u):
        lo, hi = self.control_box
        return np.clip(u, lo, hi)


@dataclass(frozen=True)
class Policy:
    """Feedback law ``u = act(x)`` with its state Jacobian ``act_jacobian(x)``.

    ``gains``/``value``/``bounds`` describe the law for the compiled rollout.
    """

    kind: str
    act: Callable[[Array], Array]
    act_jacobian: Callable[[Array], Array]
    gains: Array
    value: Array
    bounds: tuple[Array, Array]


def _box_faces_constraint(index, bound, scale):
    """Max of signed distances to the faces ``|x[index[i]]| <= bound[i]``.

    Faces are ordered (+x_0, -x_0, +x_1, -x_1, ...). Each distance is divided
    by ``scale[i]`` so that the faces share units. The gradient picks the
    first maximising face on ties. Also returns the face table
    ``(coord, sign, bound, scale)`` used by the compiled value kernel.
    """
    index = np.asarray(index, dtype=int)
    bound = np.asarray(bound, dtype=float)
    scale = np.asarray(scale, dtype=float)

    def faces(x):
        x = np.asarray(x, dtype=float)
        s = x[..., index]
        up = (s - bound) / scale
        down = (-s - bound) / scale
        return np.stack([up, down], axis=-1).reshape(*s.shape[:-1], 2 * len(index))

    def h(x):
        return faces(x).max(axis=-1)

    def grad_h(x):
        x = np.asarray(x, dtype=float)
        k = faces(x).argmax(axis=-1)
        coord = index[k // 2]
        sign = np.where(k % 2 == 0, 1.0, -1.0) / scale[k // 2]
        g = np.zeros(x.shape)
        np.put_along_axis(g, coord[..., None], sign[..., None], axis=-1)
        return g

    table = np.array([[i, sg, b, sc] for i, b, sc in zip(index, bound, scale) for sg in (1.0, -1.0)],
                     dtype=float)
    return h, grad_h, table


def make_double_integrator(mass_range=(1.0, 1.0), position_bound=1.0,
                           control_bound=1.0, two_sided=True) -> SystemModel:
    """Double integrator ``p' = v, v' = a / m`` with the mass as disturbance.

    ``h(x) = |p| - position_bound``. With ``two_sided=False`` only the upper
    face ``p - position_bound`` is used (the braking example of the gradient
    study, where ``p`` may cross zero).
    """
    m_lo, m_hi = float(mass_range[0]), float(mass_range[1])
    if m_lo <= 0:
        raise ValueError("mass lower bound must be positive")
    if m_hi < m_lo:
        raise ValueError("mass range must satisfy m_lo <= m_hi")
    if position_bound <= 0:
        raise ValueError("position_bound must be positive")
    if control_bound <= 0:
        raise ValueError("control_bound must be positive")

    def drift(x, d):
        x = np.asarray(x, dtype=float)
        out = np.zeros(np.broadcast_shapes(x.shape, np.shape(d)[:-1] + (2,)))
        out[..., 0] = x[..., 1]
        return out

    def input_map(x, d):
        d = np.asarray(d, dtype=float)
        shape = np.broadcast_shapes(np.shape(x)[:-1], d.shape[:-1])
        g = np.zeros(shape + (2, 1))
        g[..., 1, 0] = 1.0 / d[..., 0]
        return g

    def drift_jacobian(x, d):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(d)[:-1])
        J = np.zeros(shape + (2, 2))
        J[..., 0, 1] = 1.0
        return J

    def input_map_jacobian(x, d, u):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(d)[:-1], np.shape(u)[:-1])
        return np.zeros(shape + (2, 2))

    if two_sided:
        h, grad_h, faces = _box_faces_constraint([0], [position_bound], [1.0])
    else:
        faces = np.array([[0.0, 1.0, position_bound, 1.0]])

        def h(x):
            return np.asarray(x, dtype=float)[..., 0] - position_bound

        def grad_h(x):
            g = np.zeros(np.shape(x))
            g[..., 0] = 1.0
            return g

    return SystemModel(
        name="double_integrator",
        state_dim=2,
        control_dim=1,
        disturbance_dim=1,
        drift=drift,
        input_map=input_map,
        drift_jacobian=drift_jacobian,
        input_map_jacobian=input_map_jacobian,
        control_box=(np.array([-control_bound]), np.array([control_bound])),
        disturbance_box=(np.array([m_lo]), np.array([m_hi])),
        constraint=h,
        constraint_gradient=grad_h,
        kernels=_k.SystemKernels(_k.DOUBLE_INTEGRATOR, np.zeros(1), faces),
        params={"mass_lo": m_lo, "mass_hi": m_hi, "position_bound": position_bound,
                "control_bound": control_bound, "two_sided": bool(two_sided)},
    )


# Wheeled inverted pendulum, Lagrangian model in (p, theta):
#   wheel: mass m_w, radius r, axle inertia J_w (rolling without slip, p = r*phi)
#   body:  mass m_b (the disturbance), COM height l above the axle, inertia J_b
#   motor torque u acts between wheel and body.
SEGWAY_DEFAULTS = {
    # rider plus handlebar, +-12.5% around 80 kg
    "body_mass_lo": 70.0,
    "body_mass_hi": 90.0,
    # base with both wheels; the wheel inertia includes the reflected motor rotors
    "wheel_mass": 48.0,
    "wheel_radius": 0.24,
    "wheel_inertia": 1.5,
    "com_height": 1.0,
    "body_inertia": 12.0,
    "gravity": 9.81,
    "torque_limit": 60.0,
    "theta_limit": 0.3 * np.pi,
    "position_limit": 2.0,
    "theta_scale": 0.3 * np.pi,
    "position_scale": 2.0,
}


def make_segway(param_overrides: Optional[Mapping[str, float]] = None) -> SystemModel:
    """Segway on the state ``[p, theta, v, omega]`` with scalar wheel torque.

    ``theta`` is the body pitch from upright. The body mass is the scalar
    disturbance, bounded by ``body_mass_lo``/``body_mass_hi``; the nominal
    mass is the midpoint of that range.
    """
    prm = dict(SEGWAY_DEFAULTS)
    for key, val in (param_overrides or {}).items():
        if key not in prm:
            raise KeyError(f"unknown segway parameter {key!r}")
        prm[key] = float(val)
    for key, val in prm.items():
        if val <= 0:
            raise ValueError(f"segway parameter {key} must be positive, got {val}")
    if prm["body_mass_lo"] > prm["body_mass_hi"]:
        raise ValueError("body_mass_lo must not exceed body_mass_hi")

    m_w, r, J_w = prm["wheel_mass"], prm["wheel_radius"], prm["wheel_inertia"]
    l, J_b, grav = prm["com_height"], prm["body_inertia"], prm["gravity"]
    B = np.array([1.0 / r, -1.0])

    def _mass_terms(x, d):
        x = np.asarray(x, dtype=float)
        mb = np.asarray(d, dtype=float)[..., 0]
        th, om = x[..., 1], x[..., 3]
        s, c = np.sin(th), np.cos(th)
        m11 = m_w + J_w / r**2 + mb
        m12 = mb * l * c
        m22 = mb * l**2 + J_b
        det = m11 * m22 - m12**2
        return mb, s, c, om, m11, m12, m22, det

    def _solve(m11, m12, m22, det, b1, b2):
        return (m22 * b1 - m12 * b2) / det, (m11 * b2 - m12 * b1) / det

    def drift(x, d):
        x = np.asarray(x, dtype=float)
        mb, s, c, om, m11, m12, m22, det = _mass_terms(x, d)
        b1 = mb * l * s * om**2
        b2 = mb * grav * l * s
        a1, a2 = _solve(m11, m12, m22, det, b1, b2)
        return np.stack(np.broadcast_arrays(x[..., 2], x[..., 3], a1, a2), axis=-1)

    def input_map(x, d):
        mb, s, c, om, m11, m12, m22, det = _mass_terms(x, d)
        a1, a2 = _solve(m11, m12, m22, det, B[0], B[1])
        zero = np.zeros_like(a1)
        return np.stack([zero, zero, a1, a2], axis=-1)[..., None]

    def drift_jacobian(x, d):
        x = np.asarray(x, dtype=float)
        mb, s, c, om, m11, m12, m22, det = _mass_terms(x, d)
        b1 = mb * l * s * om**2
        b2 = mb * grav * l * s
        acc1, acc2 = _solve(m11, m12, m22, det, b1, b2)
        # d(M^-1 b)/dtheta = M^-1 (db/dtheta - dM/dtheta M^-1 b), dM12/dtheta = -mb l s
        dm12 = -mb * l * s
        r1 = mb * l * c * om**2 - dm12 * acc2
        r2 = mb * grav * l * c - dm12 * acc1
        dth1, dth2 = _solve(m11, m12, m22, det, r1, r2)
        dom1, dom2 = _solve(m11, m12, m22, det, 2.0 * mb * l * s * om, 0.0)
        J = np.zeros(dth1.shape + (4, 4))
        J[..., 0, 2] = 1.0
        J[..., 1, 3] = 1.0
        J[..., 2, 1] = dth1
        J[..., 3, 1] = dth2
        J[..., 2, 3] = dom1
        J[..., 3, 3] = dom2
        return J

    def input_map_jacobian(x, d, u):
        mb, s, c, om, m11, m12, m22, det = _mass_terms(x, d)
        u0 = np.asarray(u, dtype=float)[..., 0]
        acc1, acc2 = _solve(m11, m12, m22, det, B[0] * u0, B[1] * u0)
        dm12 = -mb * l * s
        dth1, dth2 = _solve(m11, m12, m22, det, -dm12 * acc2, -dm12 * acc1)
        J = np.zeros(dth1.shape + (4, 4))
        J[..., 2, 1] = dth1
        J[..., 3, 1] = dth2
        return J

    h, grad_h, faces = _box_faces_constraint(
        [0, 1],
        [prm["position_limit"], prm["theta_limit"]],
        [prm["position_scale"], prm["theta_scale"]],
    )
    tau = prm["torque_limit"]
    return SystemModel(
        name="segway",
        state_dim=4,
        control_dim=1,
        disturbance_dim=1,
        drift=drift,
        input_map=input_map,
        drift_jacobian=drift_jacobian,
        input_map_jacobian=input_map_jacobian,
        control_box=(np.array([-tau]), np.array([tau])),
        disturbance_box=(np.array([prm["body_mass_lo"]]), np.array([prm["body_mass_hi"]])),
        constraint=h,
        constraint_gradient=grad_h,
        params=prm,
        kernels=_k.SystemKernels(_k.SEGWAY, np.array([m_w, r, J_w, l, J_b, grav]), faces),
    )


def with_disturbance_box(system: SystemModel, lo, hi) -> SystemModel:
    """Copy of ``system`` with a different disturbance box."""
    return replace(system, disturbance_box=(np.asarray(lo, dtype=float).copy(),
                                            np.asarray(hi, dtype=float).copy()))


POLICY_KINDS = ("saturating_linear", "constant", "bang_bang")


def make_policy(system: SystemModel, kind: str, gains=None, value=None) -> Policy:
    """Build a rollout or nominal policy for ``system``.

    saturating_linear: ``clip(-K x)``, Jacobian ``-K`` where unsaturated.
    constant: fixed ``value`` (clipped into the box).
    bang_bang: ``u_max`` where ``-K x > 0``, ``u_min`` where ``< 0``, and the
    clipped zero otherwise; zero Jacobian.
    """
    n, m = system.state_dim, system.control_dim
    lo, hi = system.control_box

    if kind == "constant":
        u = np.zeros(m) if value is None else np.atleast_1d(np.asarray(value, dtype=float))
        if u.shape != (m,):
            raise ValueError(f"constant control must have shape ({m},), got {u.shape}")
        u = np.clip(u, lo, hi)

        def act(x):
            return np.broadcast_to(u, np.shape(x)[:-1] + (m,)).copy()

        def act_jacobian(x):
            return np.zeros(np.shape(x)[:-1] + (m, n))

        return Policy(kind, act, act_jacobian, np.zeros((m, n)), u, (lo, hi))

    if gains is None:
        raise ValueError(f"policy kind {kind!r} needs gains")
    K = np.asarray(gains, dtype=float)
    if K.ndim == 1 and m == 1:
        K = K[None, :]
    if K.shape != (m, n):
        raise ValueError(f"gains must have shape ({m}, {n}), got {K.shape}")

    if kind == "saturating_linear":
        def act(x):
            return np.clip(-np.einsum("ij,...j->...i", K, x), lo, hi)

        def act_jacobian(x):
            raw = -np.einsum("ij,...j->...i", K, x)
            # zero on and beyond the saturation boundary
            inside = (raw > lo) & (raw < hi)
            return np.where(inside[..., None], -K, 0.0)

        return Policy(kind, act, act_jacobian, K, np.zeros(m), (lo, hi))

    if kind == "bang_bang":
        zero = np.clip(np.zeros(m), lo, hi)

        def act(x):
            s = -np.einsum("ij,...j->...i", K, x)
            return np.where(s > 0, hi, np.where(s < 0, lo, zero))

        def act_jacobian(x):
            return np.zeros(np.shape(x)[:-1] + (m, n))

        return Policy(kind, act, act_jacobian, K, np.zeros(m), (lo, hi))

    raise ValueError(f"unknown policy kind {kind!r}; expected one of {POLICY_KINDS}")


def lqr_gain(system: SystemModel, Q, R, x_eq=None) -> Array:
    """Continuous-time LQR gain of ``system`` linearised at ``x_eq`` (u = 0, nominal d)."""
    from scipy.linalg import solve_continuous_are

    n, m = system.state_dim, system.control_dim
    x_eq = np.zeros(n) if x_eq is None else np.asarray(x_eq, dtype=float)
    d = system.nominal_disturbance
    A = system.drift_jacobian(x_eq, d) + system.input_map_jacobian(x_eq, d, np.zeros(m))
    Bm = system.input_map(x_eq, d)
    P = solve_continuous_are(A, Bm, np.asarray(Q, dtype=float), np.atleast_2d(R).astype(float))
    return np.linalg.solve(np.atleast_2d(R).astype(float), Bm.T @ P)
