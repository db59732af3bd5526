"""Disturbance sampling and fixed-step RK4 rollouts with state sensitivities."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import kernels as _k
from .systems import Policy, SystemModel

Seed = Union[int, Sequence[int]]


class RolloutError(RuntimeError):
    """A rollout produced a non-finite state."""

    def __init__(self, step: int, sample: Optional[int] = None, message: str = ""):
        self.step = step
        self.sample = sample
        where = f"step {step}" + ("" if sample is None else f", sample {sample}")
        super().__init__(message or f"non-finite state at {where}")


@dataclass(frozen=True)
class RolloutResult:
    """Discretised trajectory ``x_0 .. x_{H-1}``.

    Arrays may carry leading batch axes, e.g. ``states`` of shape
    ``(B, H, n)`` for a batched rollout. ``sensitivities[..., k, :, :]`` is
    ``dx_k/dx_0`` and is ``None`` when not requested.
    """

    states: np.ndarray
    h_values: np.ndarray
    sensitivities: Optional[np.ndarray]
    dt: float

    @property
    def horizon_steps(self) -> int:
        return self.states.shape[-2]

    @property
    def horizon(self) -> float:
        return self.horizon_steps * self.dt


def _seed_entropy(seed: Seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def sample_disturbances(system: SystemModel, horizon_steps: int, count: int,
                        vertex_weight: float = 0.5, seed: Seed = 0) -> np.ndarray:
    """Draw ``count`` piecewise-constant disturbance trajectories.

    Returns an array of shape ``(count, horizon_steps, disturbance_dim)``.
    Samples 0, 1 and 2 are the constant lowest corner, highest corner and
    midpoint of the disturbance box. Every other sample draws each step
    independently: a uniformly random box vertex with probability
    ``vertex_weight``, otherwise a uniform point in the box. Sample ``i``
    consumes the ``i``-th block of one generator stream seeded by ``seed``,
    so the first ``k`` samples do not depend on ``count``.
    """
    if horizon_steps < 1 or count < 1:
        raise ValueError("horizon_steps and count must be at least 1")
    if not 0.0 <= vertex_weight <= 1.0:
        raise ValueError("vertex_weight must lie in [0, 1]")
    lo, hi = (np.asarray(b, dtype=float) for b in system.disturbance_box)
    nd = system.disturbance_dim
    rng = np.random.default_rng(_seed_entropy(seed))
    draws = rng.random((count, horizon_steps, 1 + 2 * nd))
    vertex = np.where(draws[..., 1:1 + nd] < 0.5, lo, hi)
    uniform = lo + (hi - lo) * draws[..., 1 + nd:]
    out = np.where(draws[..., :1] < vertex_weight, vertex, uniform)
    for i, anchor in enumerate((lo, hi, 0.5 * (lo + hi))[:count]):
        out[i] = anchor
    return out


def _closed_loop(system, policy, x, d):
    u = policy.act(x)
    G = system.input_map(x, d)
    return system.drift(x, d) + np.einsum("...ij,...j->...i", G, u), u, G


def _closed_loop_jacobian(system, policy, x, d, u, G):
    return (system.drift_jacobian(x, d) + system.input_map_jacobian(x, d, u)
            + G @ policy.act_jacobian(x))


def rk4_step(system: SystemModel, policy: Policy, x, d, dt: float, with_jacobian=False):
    """One classic RK4 step of the closed loop with ``d`` held constant.

    With ``with_jacobian`` also returns the exact Jacobian of the step map.
    """
    k1, u1, G1 = _closed_loop(system, policy, x, d)
    x2 = x + 0.5 * dt * k1
    k2, u2, G2 = _closed_loop(system, policy, x2, d)
    x3 = x + 0.5 * dt * k2
    k3, u3, G3 = _closed_loop(system, policy, x3, d)
    x4 = x + dt * k3
    k4, u4, G4 = _closed_loop(system, policy, x4, d)
    x_next = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not with_jacobian:
        return x_next
    eye = np.eye(x.shape[-1])
    D1 = _closed_loop_jacobian(system, policy, x, d, u1, G1)
    D2 = _closed_loop_jacobian(system, policy, x2, d, u2, G2) @ (eye + 0.5 * dt * D1)
    D3 = _closed_loop_jacobian(system, policy, x3, d, u3, G3) @ (eye + 0.5 * dt * D2)
    D4 = _closed_loop_jacobian(system, policy, x4, d, u4, G4) @ (eye + dt * D3)
    return x_next, eye + (dt / 6.0) * (D1 + 2.0 * D2 + 2.0 * D3 + D4)


def rollout_batch(system: SystemModel, policy: Policy, x0, disturbances, dt: float,
                  horizon_steps: int, with_sensitivities: bool = False,
                  backend: str = "auto") -> RolloutResult:
    """Roll out a batch of initial states and disturbance trajectories.

    ``x0`` has shape ``(B, n)`` and ``disturbances`` shape ``(B, >=H, d)``;
    either may also be given without the batch axis and is broadcast.
    ``backend`` is ``"numpy"``, ``"compiled"`` (needs ``system.kernels``) or
    ``"auto"``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    H = int(horizon_steps)
    if H < 1:
        raise ValueError("horizon_steps must be at least 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    dist = np.asarray(disturbances, dtype=float)
    if dist.ndim == 2:
        dist = dist[None]
    if dist.shape[-2] < H:
        raise ValueError(f"disturbance trajectory has {dist.shape[-2]} steps, need {H}")
    B = max(x0.shape[0], dist.shape[0])
    n = system.state_dim
    x = np.broadcast_to(x0, (B, n)).copy()
    dist = np.broadcast_to(dist, (B,) + dist.shape[1:])

    if backend not in ("auto", "numpy", "compiled"):
        raise ValueError(f"unknown backend {backend!r}")
    compiled_ok = system.kernels is not None and policy.kind in _k.POLICY_CODES
    if backend == "compiled" or (backend == "auto" and compiled_ok):
        return _rollout_compiled(system, policy, x, dist, dt, H, with_sensitivities)

    states = np.empty((B, H, n))
    states[:, 0] = x
    sens = None
    if with_sensitivities:
        sens = np.empty((B, H, n, n))
        sens[:, 0] = np.eye(n)
        Phi = np.broadcast_to(np.eye(n), (B, n, n))
    for k in range(H - 1):
        d = dist[:, k]
        # overflow is reported below as a RolloutError
        with np.errstate(over="ignore", invalid="ignore"):
            if with_sensitivities:
                x, S = rk4_step(system, policy, x, d, dt, with_jacobian=True)
                Phi = S @ Phi
                sens[:, k + 1] = Phi
            else:
                x = rk4_step(system, policy, x, d, dt)
        if not np.isfinite(x).all():
            bad = int(np.flatnonzero(~np.isfinite(x).all(axis=-1))[0])
            raise RolloutError(k + 1, bad)
        states[:, k + 1] = x
    return RolloutResult(states, system.constraint(states), sens, float(dt))


def _rollout_compiled(system, policy, x0, dist, dt, H, with_sensitivities):
    if system.kernels is None:
        raise ValueError(f"system {system.name!r} has no compiled kernels")
    B, n = x0.shape
    kern = system.kernels
    states = np.empty((B, H, n))
    sens = np.empty((B, H, n, n) if with_sensitivities else (1, 1, n, n))
    lo, hi = policy.bounds
    step, bad = _k.rollout_kernel(
        kern.code, kern.params,
        _k.POLICY_CODES[policy.kind], np.ascontiguousarray(policy.gains, dtype=float),
        np.asarray(policy.value, dtype=float), np.asarray(lo, dtype=float),
        np.asarray(hi, dtype=float), np.ascontiguousarray(x0), np.ascontiguousarray(dist),
        float(dt), H, with_sensitivities, states, sens)
    if step >= 0:
        raise RolloutError(step, bad)
    return RolloutResult(states, system.constraint(states),
                         sens if with_sensitivities else None, float(dt))


def constraint_values(system: SystemModel, policy: Policy, x0, disturbances, dt: float,
                      horizon_steps: int) -> np.ndarray:
    """``h`` along the rollout of every state ``x0[b]`` under every sample ``disturbances[i]``.

    ``x0`` has shape ``(B, n)`` and ``disturbances`` shape ``(N, >=H, d)``.
    Returns shape ``(B * N, H)`` with row ``b * N + i``; a
    :class:`RolloutError` carries that row index as its sample. States are
    only materialised when no compiled kernel covers the system.
    """
    H = int(horizon_steps)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    dist = np.asarray(disturbances, dtype=float)
    if dt <= 0 or H < 1:
        raise ValueError("dt and horizon_steps must be positive")
    if dist.ndim != 3 or dist.shape[1] < H:
        raise ValueError("disturbances must have shape (N, >=horizon_steps, d)")
    B, N = x0.shape[0], dist.shape[0]
    kern = system.kernels
    if kern is None or kern.faces is None or policy.kind not in _k.POLICY_CODES:
        res = rollout_batch(system, policy, np.repeat(x0, N, axis=0), np.tile(dist[:, :H], (B, 1, 1)),
                            dt, H, False, backend="numpy")
        return res.h_values
    out = np.empty((B * N, H))
    lo, hi = policy.bounds
    lanes = np.ascontiguousarray(dist[:, :H].transpose(1, 2, 0))
    step, row = _k.constraint_values_kernel(
        kern.code, kern.params,
        _k.POLICY_CODES[policy.kind], np.ascontiguousarray(policy.gains, dtype=float),
        np.asarray(policy.value, dtype=float), np.asarray(lo, dtype=float),
        np.asarray(hi, dtype=float), kern.faces, np.ascontiguousarray(x0), lanes, float(dt), H, out)
    if step >= 0:
        raise RolloutError(step, row)
    return out


def rollout(system: SystemModel, policy: Policy, x0, dist, dt: float, horizon_steps: int,
            with_sensitivities: bool = True, backend: str = "auto") -> RolloutResult:
    """Single-trajectory rollout; ``dist`` has shape ``(>=H, d)``."""
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2:
        raise ValueError("dist must have shape (steps, disturbance_dim)")
    res = rollout_batch(system, policy, np.asarray(x0, dtype=float)[None], dist[None], dt,
                        horizon_steps, with_sensitivities, backend)
    return RolloutResult(res.states[0], res.h_values[0],
                         None if res.sensitivities is None else res.sensitivities[0], res.dt)
