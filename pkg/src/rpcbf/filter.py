"""CBF-QP safety filter with box input constraints, plus an HOCBF baseline.

The QP ``min |u - u_nom|^2  s.t.  a.u + b <= 0,  lo <= u <= hi`` is solved
exactly: its solution lies on the path ``u(lam) = clip(u_nom - lam a)``,
along which ``a.u(lam) + b`` is nonincreasing and piecewise linear, so the
smallest feasible ``lam`` comes from a scan over the clipping breakpoints.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .systems import Policy, SystemModel
from .value import ValueConfig, ValueEstimate, evaluate

NOMINAL_PASS = "nominal_pass"
CONSTRAINT_ACTIVE = "constraint_active"
INFEASIBLE_FALLBACK = "infeasible_fallback"
MODES = ("nominal_d", "worst_vertex")


@dataclass(frozen=True)
class AlphaFn:
    coefficient: float
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unsupported alpha kind {self.kind!r}")
        if not self.coefficient > 0:
            raise ValueError("alpha coefficient must be positive")

    def __call__(self, b):
        return self.coefficient * b


@dataclass(frozen=True)
class FilterDecision:
    u: np.ndarray
    status: str
    slack: float  # a.u + b at the returned control


def solve_box_halfspace_qp(a, b, u_nom, lo, hi) -> FilterDecision:
    """Project ``u_nom`` onto ``{a.u + b <= 0} ∩ [lo, hi]``.

    When the intersection is empty the box point minimising ``a.u`` (closest
    to ``u_nom`` in the coordinates where ``a`` vanishes) is returned with
    status ``infeasible_fallback``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    u_nom = np.atleast_1d(np.asarray(u_nom, dtype=float))
    lo = np.broadcast_to(np.asarray(lo, dtype=float), a.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), a.shape)
    b = float(b)

    u0 = np.clip(u_nom, lo, hi)
    slack0 = float(a @ u0 + b)
    if slack0 <= 0.0:
        return FilterDecision(u0, NOMINAL_PASS, slack0)

    u_min = np.where(a > 0, lo, np.where(a < 0, hi, u0))
    best = float(a @ u_min + b)
    if best > 0.0:
        return FilterDecision(u_min, INFEASIBLE_FALLBACK, best)

    nz = a != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.concatenate([(u_nom - hi)[nz] / a[nz], (u_nom - lo)[nz] / a[nz]])
    bp = np.unique(bp[bp > 0.0])
    lam_prev, phi_prev = 0.0, slack0
    for lam in np.append(bp, np.inf):
        if np.isfinite(lam):
            phi = float(a @ np.clip(u_nom - lam * a, lo, hi) + b)
        else:
            phi = best
        if phi <= 0.0:
            # linear on [lam_prev, lam]; free coordinates are those not clipped there
            mid = lam_prev + (0.5 * (lam - lam_prev) if np.isfinite(lam) else 1.0)
            raw = u_nom - mid * a
            free = nz & (raw > lo) & (raw < hi)
            rate = float(a[free] @ a[free])
            if rate > 0:
                u = np.clip(u_nom - (lam_prev + phi_prev / rate) * a, lo, hi)
            else:
                u = u_min
            return FilterDecision(u, CONSTRAINT_ACTIVE, float(a @ u + b))
        lam_prev, phi_prev = lam, phi
    raise AssertionError("unreachable: feasible problem without a crossing")


def constraint_terms(system: SystemModel, B_value, B_gradient, x, alpha: AlphaFn, d):
    """``(a, b)`` of ``grad B . (f(x, d) + g(x, d) u) + alpha(B) <= 0``."""
    gB = np.asarray(B_gradient, dtype=float)
    a = gB @ system.input_map(x, d)
    b = float(gB @ system.drift(x, d) + alpha(B_value))
    return a, b


def _least_slack_order(terms, u_ref, lo, hi):
    """Indices sorted by violation at ``u_ref``, ties by the harder constraint."""
    viol = [float(a @ u_ref + b) for a, b in terms]
    hardest = [float(np.sum(np.minimum(a * lo, a * hi)) + b) for a, b in terms]
    return sorted(range(len(terms)), key=lambda i: (-viol[i], -hardest[i], i))


def cbf_qp(system: SystemModel, B_value, B_gradient, x, u_nom, alpha: AlphaFn,
           mode: str = "nominal_d") -> FilterDecision:
    """Filter ``u_nom`` through the CBF condition built from ``(B, grad B)``.

    ``nominal_d`` evaluates the dynamics at the disturbance box midpoint.
    ``worst_vertex`` evaluates them at every box vertex and enforces the
    constraint with the largest violation at the clipped nominal control.
    """
    if mode not in MODES:
        raise ValueError(f"unknown filter mode {mode!r}")
    if not np.isfinite(B_gradient).all() or not np.isfinite(u_nom).all():
        raise ValueError("B_gradient and u_nom must be finite")
    x = np.asarray(x, dtype=float)
    lo, hi = system.control_box
    if mode == "nominal_d":
        a, b = constraint_terms(system, B_value, B_gradient, x, alpha, system.nominal_disturbance)
        return solve_box_halfspace_qp(a, b, u_nom, lo, hi)
    terms = [constraint_terms(system, B_value, B_gradient, x, alpha, d)
             for d in system.disturbance_vertices()]
    u0 = np.clip(np.asarray(u_nom, dtype=float), lo, hi)
    i = _least_slack_order(terms, u0, lo, hi)[0]
    return solve_box_halfspace_qp(*terms[i], u_nom, lo, hi)


def hocbf_di(system: SystemModel, x, u_nom, alpha1: float, alpha2: float) -> FilterDecision:
    """Second-order CBF on both position faces of the double integrator.

    Input bounds are not taken into account when designing the barrier; they
    only enter the projection, so infeasibility is possible.
    """
    if system.name != "double_integrator":
        raise ValueError("hocbf_di needs the double integrator")
    p, v = np.asarray(x, dtype=float)
    bound = system.params["position_bound"]
    inv_m = 1.0 / float(system.nominal_disturbance[0])
    k1, k2 = alpha1 + alpha2, alpha1 * alpha2
    faces = [
        (np.array([inv_m]), k1 * v + k2 * (p - bound)),
        (np.array([-inv_m]), -k1 * v + k2 * (-p - bound)),
    ]
    if not system.params.get("two_sided", True):
        faces = faces[:1]
    lo, hi = system.control_box
    u0 = np.clip(np.asarray(u_nom, dtype=float), lo, hi)
    order = _least_slack_order(faces, u0, lo, hi)
    first = solve_box_halfspace_qp(*faces[order[0]], u_nom, lo, hi)
    if first.status == INFEASIBLE_FALLBACK:
        return first
    for j in order[1:]:
        a, b = faces[j]
        if float(a @ first.u + b) > 1e-12:
            return FilterDecision(first.u, INFEASIBLE_FALLBACK, float(a @ first.u + b))
    return first


def step_filtered(system: SystemModel, policy_nominal: Policy, value_config: ValueConfig,
                  alpha: AlphaFn, mode: str, x, dt_control: float):
    """One control period of the value-function safety filter.

    Returns ``(u, decision, estimate)``. ``dt_control`` is the hold time of
    ``u``; it does not enter the computation of ``u`` itself.
    """
    if dt_control <= 0:
        raise ValueError("dt_control must be positive")
    x = np.asarray(x, dtype=float)
    est: ValueEstimate = evaluate(system, value_config, x)
    u_nom = policy_nominal.act(x)
    dec = cbf_qp(system, est.value, est.gradient, x, u_nom, alpha, mode)
    return dec.u, dec, est
