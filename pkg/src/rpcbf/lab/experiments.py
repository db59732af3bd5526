"""Grid sweeps, closed-loop simulation and the gradient-error study."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..filter import AlphaFn, FilterDecision, NOMINAL_PASS, cbf_qp, hocbf_di
from ..rollout import RolloutError, Seed, _seed_entropy, rollout, sample_disturbances
from ..spline import naive_max
from ..systems import Policy, SystemModel, make_double_integrator, make_policy
from ..value import ValueConfig, evaluate, evaluate_batch, nominal_system

log = logging.getLogger(__name__)

METHODS = ("none", "pcbf", "rpcbf", "hocbf")
FILTER_STREAM, PLANT_STREAM = 0, 1


@dataclass(frozen=True)
class SweepSpec:
    """Planar grid over two state coordinates; the others are held fixed.

    ``state_grid[i]`` is either ``(lo, hi, count)`` or a fixed float.
    """

    state_grid: Sequence
    eval_horizon_Tbar: float = 15.0
    eval_samples_Nbar: int = 25
    method: str = "rpcbf"

    def __post_init__(self):
        swept = [i for i, g in enumerate(self.state_grid) if isinstance(g, (list, tuple))]
        if len(swept) != 2:
            raise ValueError("exactly two state coordinates must be swept")
        for i in swept:
            if int(self.state_grid[i][2]) < 2:
                raise ValueError("each swept coordinate needs at least 2 grid points")
        if self.method not in METHODS[1:]:
            raise ValueError(f"unknown method {self.method!r}")

    @property
    def swept(self) -> tuple[int, int]:
        i, j = (k for k, g in enumerate(self.state_grid) if isinstance(g, (list, tuple)))
        return i, j

    def axes(self):
        i, j = self.swept
        return tuple(np.linspace(float(g[0]), float(g[1]), int(g[2]))
                     for g in (self.state_grid[i], self.state_grid[j]))

    def states(self) -> np.ndarray:
        """Grid states of shape ``(nx * ny, n)``, first swept coordinate slowest."""
        i, j = self.swept
        ax, ay = self.axes()
        X = np.empty((len(ax), len(ay), len(self.state_grid)))
        for k, g in enumerate(self.state_grid):
            if k not in (i, j):
                X[..., k] = float(g)
        X[..., i] = ax[:, None]
        X[..., j] = ay[None, :]
        return X.reshape(-1, len(self.state_grid))


@dataclass(frozen=True)
class FilterSpec:
    """Which safety filter to run in closed loop."""

    method: str = "rpcbf"
    value_config: Optional[ValueConfig] = None
    alpha: AlphaFn = AlphaFn(1.0)
    mode: str = "nominal_d"
    hocbf_alphas: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown filter method {self.method!r}")
        if self.method in ("pcbf", "rpcbf") and self.value_config is None:
            raise ValueError(f"method {self.method!r} needs a value_config")


@dataclass
class TrajectoryRecord:
    times: np.ndarray
    states: np.ndarray
    nominal_controls: np.ndarray
    controls: np.ndarray
    values: np.ndarray
    statuses: list
    h_values: np.ndarray
    safe: bool
    status: str = "ok"  # or "blow_up"


@dataclass
class GridResult:
    axes: tuple
    states: np.ndarray
    values: np.ndarray  # (nx, ny)
    safe: Optional[np.ndarray] = None  # (nx, ny) bool
    errors: list = field(default_factory=list)


def value_setup(system: SystemModel, config: ValueConfig, method: str):
    """System and config used to evaluate the value function for ``method``."""
    if method == "pcbf":
        return nominal_system(system), replace(config, num_samples=1)
    return system, config


def _step_seed(seed: Seed, stream: int, k: int) -> list[int]:
    return _seed_entropy(seed) + [stream, k]


# -- filter boundary ------------------------------------------------------------

def hocbf_level(system: SystemModel, X, alpha1: float) -> np.ndarray:
    """``max(h, psi_1)`` of the HOCBF candidate, per face, for a batch of states."""
    p, v = X[:, 0], X[:, 1]
    bound = system.params["position_bound"]
    faces = [np.maximum(p - bound, v + alpha1 * (p - bound))]
    if system.params.get("two_sided", True):
        faces.append(np.maximum(-p - bound, -v + alpha1 * (-p - bound)))
    return np.max(faces, axis=0)


def _values_with_errors(system, config, X, errors):
    try:
        return evaluate_batch(system, config, X, with_gradient=False)[0]
    except RolloutError:
        out = np.empty(len(X))
        for c, x in enumerate(X):
            try:
                out[c] = evaluate_batch(system, config, x[None], with_gradient=False)[0][0]
            except RolloutError as err:
                out[c] = np.nan
                errors.append({"cell": c, "error": str(err)})
                log.warning("cell %d: %s", c, err)
        return out


def sweep_filter_boundary(spec: SweepSpec, system: SystemModel, value_config: ValueConfig,
                          hocbf_alphas=(1.0, 1.0)) -> GridResult:
    """Value function on the grid; cells with ``V <= 0`` lie inside the filter boundary."""
    X = spec.states()
    ax, ay = spec.axes()
    errors: list = []
    if spec.method == "hocbf":
        vals = hocbf_level(system, X, hocbf_alphas[0])
    else:
        sys_v, cfg_v = value_setup(system, value_config, spec.method)
        vals = _values_with_errors(sys_v, cfg_v, X, errors)
    return GridResult((ax, ay), X, vals.reshape(len(ax), len(ay)), errors=errors)


# -- closed loop --------------------------------------------------------------------

def plant_step(system: SystemModel, X, U, D, dt: float, substeps: int = 1):
    """Advance states ``X`` under held controls ``U`` and disturbances ``D``."""
    h = dt / substeps
    for _ in range(substeps):
        k1 = system.dynamics(X, D, U)
        k2 = system.dynamics(X + 0.5 * h * k1, D, U)
        k3 = system.dynamics(X + 0.5 * h * k2, D, U)
        k4 = system.dynamics(X + h * k3, D, U)
        X = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return X


def _filter_batch(system, nominal_policy, fspec: FilterSpec, X, k):
    """Filtered controls, nominal controls, values and statuses for states ``X``."""
    U_nom = nominal_policy.act(X)
    B = len(X)
    lo, hi = system.control_box
    if fspec.method == "none":
        return np.clip(U_nom, lo, hi), U_nom, np.full(B, np.nan), [NOMINAL_PASS] * B
    if fspec.method == "hocbf":
        a1, a2 = fspec.hocbf_alphas
        decs = [hocbf_di(system, x, u, a1, a2) for x, u in zip(X, U_nom)]
        return (np.array([d.u for d in decs]), U_nom, hocbf_level(system, X, a1),
                [d.status for d in decs])
    sys_v, cfg_v = value_setup(system, fspec.value_config, fspec.method)
    cfg_k = replace(cfg_v, seed=_step_seed(cfg_v.seed, FILTER_STREAM, k))
    vals, grads, _, _ = evaluate_batch(sys_v, cfg_k, X)
    decs: list[FilterDecision] = [
        cbf_qp(system, v, g, x, u, fspec.alpha, fspec.mode)
        for v, g, x, u in zip(vals, grads, X, U_nom)
    ]
    return np.array([d.u for d in decs]), U_nom, vals, [d.status for d in decs]


def plant_disturbances(system: SystemModel, steps: int, count: int, vertex_weight: float,
                       seed: Seed) -> np.ndarray:
    """Plant-side disturbance realisations, from a stream disjoint from the filter's."""
    return sample_disturbances(system, steps, count, vertex_weight,
                               _seed_entropy(seed) + [PLANT_STREAM])


def closed_loop_batch(system: SystemModel, nominal_policy: Policy, fspec: FilterSpec, X0,
                      D, duration: float, dt_control: float, seed: Seed = 0, substeps: int = 1):
    """Simulate ``B`` closed loops at once.

    ``D`` has shape ``(B, steps, d)`` (plant disturbance per control period).
    Returns a list of :class:`TrajectoryRecord`. A state that becomes
    non-finite is frozen and its record is marked ``blow_up`` (and unsafe).
    """
    if duration <= 0 or dt_control <= 0:
        raise ValueError("duration and dt_control must be positive")
    steps = int(round(duration / dt_control))
    X = np.array(X0, dtype=float, ndmin=2)
    B, n = X.shape
    m = system.control_dim
    states = np.empty((B, steps + 1, n))
    U_f = np.empty((B, steps + 1, m))
    U_n = np.empty((B, steps + 1, m))
    V = np.empty((B, steps + 1))
    stat = np.empty((B, steps + 1), dtype=object)
    alive = np.ones(B, dtype=bool)
    for k in range(steps + 1):
        states[:, k] = X
        idx = np.flatnonzero(alive)
        U = np.zeros((B, m))
        if len(idx):
            u, un, v, st = _filter_batch(system, nominal_policy, fspec, X[idx], k)
            U[idx], U_n[idx, k], V[idx, k], stat[idx, k] = u, un, v, st
            U_f[idx, k] = u
        dead = np.flatnonzero(~alive)
        U_f[dead, k], U_n[dead, k], V[dead, k], stat[dead, k] = np.nan, np.nan, np.nan, "blow_up"
        if k == steps:
            break
        with np.errstate(over="ignore", invalid="ignore"):  # blow-ups are caught below
            Xn = plant_step(system, X, U, D[:, k], dt_control, substeps)
        bad = alive & ~np.isfinite(Xn).all(axis=1)
        alive &= ~bad
        X = np.where(alive[:, None], Xn, X)
    times = dt_control * np.arange(steps + 1)
    h = system.constraint(states)
    records = []
    for b in range(B):
        blown = not alive[b]
        records.append(TrajectoryRecord(
            times, states[b], U_n[b], U_f[b], V[b], list(stat[b]), h[b],
            safe=bool(np.max(h[b]) <= 0.0) and not blown,
            status="blow_up" if blown else "ok"))
    return records


def simulate(system: SystemModel, nominal_policy: Policy, fspec: FilterSpec, x0,
             duration: float, dt_control: float = 0.1, disturbance=None, seed: Seed = 0,
             plant_sample: int = 0, vertex_weight: float = 0.5, substeps: int = 1) -> TrajectoryRecord:
    """Closed-loop trajectory from ``x0``.

    ``disturbance`` (shape ``(steps, d)``) is the plant realisation; when
    omitted, sample ``plant_sample`` of the plant stream for ``seed`` is used.
    """
    steps = int(round(duration / dt_control))
    if disturbance is None:
        D = plant_disturbances(system, steps, plant_sample + 1, vertex_weight, seed)[plant_sample]
    else:
        D = np.asarray(disturbance, dtype=float)
    return closed_loop_batch(system, nominal_policy, fspec, np.asarray(x0, float)[None], D[None],
                             duration, dt_control, seed, substeps)[0]


def sweep_safe_region(spec: SweepSpec, system: SystemModel, fspec: FilterSpec,
                      nominal_policy: Policy, dt_control: float = 0.1, seed: Seed = 0,
                      vertex_weight: float = 0.5, only_inside: bool = False,
                      batch_cells: int = 64) -> GridResult:
    """Closed-loop safety of every grid state under ``eval_samples_Nbar`` plant disturbances.

    A cell is safe iff ``h <= 0`` along every simulated trajectory. Cells in
    the avoid set are unsafe without simulation. With ``only_inside`` only
    cells inside the filter boundary are simulated; the rest are reported
    unsafe-unknown (``False``) and listed in ``errors`` as skipped.
    """
    boundary = sweep_filter_boundary(spec, system, fspec.value_config, fspec.hocbf_alphas)
    X = boundary.states
    vals = boundary.values.ravel()
    steps = int(round(spec.eval_horizon_Tbar / dt_control))
    Nbar = spec.eval_samples_Nbar
    D = plant_disturbances(system, steps, Nbar, vertex_weight, seed)
    safe = np.zeros(len(X), dtype=bool)
    errors = list(boundary.errors)
    todo = np.flatnonzero(system.constraint(X) <= 0.0)
    if only_inside:
        todo = todo[vals[todo] <= 0.0]
    for start in range(0, len(todo), batch_cells):
        cells = todo[start:start + batch_cells]
        X0 = np.repeat(X[cells], Nbar, axis=0)
        Db = np.tile(D, (len(cells), 1, 1))
        try:
            recs = closed_loop_batch(system, nominal_policy, fspec, X0, Db, spec.eval_horizon_Tbar,
                                     dt_control, seed)
        except RolloutError:
            recs = None
        if recs is not None:
            ok = np.array([r.safe for r in recs]).reshape(len(cells), Nbar)
            safe[cells] = ok.all(axis=1)
            continue
        for c in cells:
            try:
                recs = closed_loop_batch(system, nominal_policy, fspec, np.repeat(X[c:c + 1], Nbar, 0),
                                         D, spec.eval_horizon_Tbar, dt_control, seed)
                safe[c] = all(r.safe for r in recs)
            except RolloutError as err:
                errors.append({"cell": int(c), "error": str(err)})
                log.warning("cell %d: %s", c, err)
    return GridResult(boundary.axes, X, boundary.values, safe.reshape(boundary.values.shape), errors)


# -- gradient error study -----------------------------------------------------------

def gradient_error_study(dt_list, spline: bool = True, v0_range=(0.5, 2.0), num_v0: int = 301,
                         horizon_T: float = 4.0):
    """Error of dV/dv0 for the braking double integrator against the exact ``v0``.

    The double integrator starts at ``[0, v0]`` and brakes with ``a = -1``;
    the exact gradient of the peak position is ``[1, v0]``. For each ``dt``
    returns rows ``(dt, v0, method, grad_v0, error)`` for the naive discrete
    maximum and, if ``spline``, for the spline maximum.
    """
    dt_list = [float(dt) for dt in dt_list]
    if not dt_list or min(dt_list) <= 0:
        raise ValueError("dt_list must be non-empty and positive")
    system = make_double_integrator((1.0, 1.0), position_bound=1.0, two_sided=False)
    brake = make_policy(system, "constant", value=-1.0)
    v0s = np.linspace(v0_range[0], v0_range[1], num_v0)
    rows = []
    for dt in dt_list:
        cfg = ValueConfig(horizon_T, dt, 1, brake)
        for v0 in v0s:
            x0 = np.array([0.0, v0])
            if spline:
                g = evaluate(system, cfg, x0).gradient[1]
                rows.append((dt, v0, "spline", g, abs(g - v0)))
            res = _braking_rollout(system, brake, x0, cfg)
            _, k = naive_max(res.h_values)
            g = float(system.constraint_gradient(res.states[k]) @ res.sensitivities[k][:, 1])
            rows.append((dt, v0, "naive", g, abs(g - v0)))
    return rows


def _braking_rollout(system, policy, x0, cfg):
    H = cfg.horizon_steps
    return rollout(system, policy, x0, np.ones((H, 1)), cfg.dt, H, True)


def horizon_flag(system: SystemModel, config: ValueConfig, x, tol: float = 1e-6) -> bool:
    """True when stretching the horizon by 50% moves ``V(x)`` by more than ``tol``.

    Empirical check for a horizon that is too short to capture the peak.
    """
    longer = replace(config, horizon_T=config.dt * round(1.5 * config.horizon_steps))
    v1 = evaluate_batch(system, config, np.atleast_2d(x), with_gradient=False)[0]
    v2 = evaluate_batch(system, longer, np.atleast_2d(x), with_gradient=False)[0]
    return bool(np.abs(v2 - v1).max() > tol)
