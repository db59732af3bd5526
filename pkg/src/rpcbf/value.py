"""Finite-horizon, finite-sample robust policy value function and its gradient.

``V(x0) = max_i max_t S_i(t)`` where ``S_i`` is the cubic spline through the
constraint samples ``h(x_k)`` of the ``i``-th disturbed rollout of the policy.
The gradient uses the winning sample only:
``grad V = sum_j w_j grad_h(x_j)^T dx_j/dx0`` with ``w`` the spline envelope
weights.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rollout import RolloutError, Seed, constraint_values, rollout_batch, sample_disturbances
from .spline import spline_max_batch, spline_weights
from .systems import Policy, SystemModel, with_disturbance_box


@dataclass(frozen=True)
class ValueConfig:
    horizon_T: float
    dt: float
    num_samples: int
    policy: Policy
    vertex_weight: float = 0.5
    seed: Seed = 0

    def __post_init__(self):
        if self.dt <= 0 or self.horizon_T <= 0:
            raise ValueError("horizon_T and dt must be positive")
        ratio = self.horizon_T / self.dt
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"horizon_T={self.horizon_T} is not a multiple of dt={self.dt}")
        if round(ratio) < 2:
            raise ValueError("horizon must span at least two steps")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")
        if not 0.0 <= self.vertex_weight <= 1.0:
            raise ValueError("vertex_weight must lie in [0, 1]")

    @property
    def horizon_steps(self) -> int:
        return int(round(self.horizon_T / self.dt))


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    gradient: np.ndarray
    argmax_sample: int
    argmax_time: float


def disturbances_for(system: SystemModel, config: ValueConfig) -> np.ndarray:
    return sample_disturbances(system, config.horizon_steps, config.num_samples,
                               config.vertex_weight, config.seed)


def evaluate(system: SystemModel, config: ValueConfig, x0, disturbances=None) -> ValueEstimate:
    """Value and gradient at ``x0``.

    ``disturbances`` (shape ``(N, H, d)``) overrides the seeded samples.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (system.state_dim,) or not np.isfinite(x0).all():
        raise ValueError("x0 must be a finite state vector")
    vals, grads, samples, times = evaluate_batch(system, config, x0[None], disturbances)
    return ValueEstimate(float(vals[0]), grads[0], int(samples[0]), float(times[0]))


def _per_state_max(system, config, X, dist):
    B, N = X.shape[0], dist.shape[0]
    try:
        h = constraint_values(system, config.policy, X, dist, config.dt, config.horizon_steps)
    except RolloutError as err:
        sample = err.sample % N
        raise RolloutError(err.step, sample,
                           f"rollout blew up at step {err.step} of disturbance sample {sample}") from None
    vals, times, segs, offs = (a.reshape(B, N) for a in spline_max_batch(h, config.dt))
    win = np.argmax(vals, axis=1)
    rows = np.arange(B)
    return vals[rows, win], win, times[rows, win], segs[rows, win], offs[rows, win]


def evaluate_batch(system: SystemModel, config: ValueConfig, states, disturbances=None,
                   with_gradient: bool = True, max_rollouts: int = 32768):
    """Values (and gradients) for states ``(B, n)`` sharing one sample set.

    Returns ``(values, gradients, argmax_sample, argmax_time)``; gradients
    is ``None`` without ``with_gradient``. Only the winning sample of each
    state is re-rolled with sensitivities.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    if X.shape[1] != system.state_dim or not np.isfinite(X).all():
        raise ValueError("states must be finite with shape (B, state_dim)")
    dist = disturbances_for(system, config) if disturbances is None else np.asarray(disturbances, float)
    B = X.shape[0]
    step = max(1, max_rollouts // dist.shape[0])
    values, samples, times = np.empty(B), np.empty(B, dtype=int), np.empty(B)
    grads = np.empty((B, system.state_dim)) if with_gradient else None
    H = config.horizon_steps
    for lo in range(0, B, step):
        Xc = X[lo:lo + step]
        v, win, t, seg, off = _per_state_max(system, config, Xc, dist)
        values[lo:lo + len(Xc)] = v
        samples[lo:lo + len(Xc)] = win
        times[lo:lo + len(Xc)] = t
        if not with_gradient:
            continue
        try:
            res = rollout_batch(system, config.policy, Xc, dist[win], config.dt, H, True)
        except RolloutError as err:
            raise RolloutError(err.step, int(win[err.sample])) from None
        W = np.stack([spline_weights(H, config.dt, int(sg), float(of)) for sg, of in zip(seg, off)])
        gh = system.constraint_gradient(res.states)
        grads[lo:lo + len(Xc)] = np.einsum("bj,bjn,bjnm->bm", W, gh, res.sensitivities)
    return values, grads, samples, times


def evaluate_values(system: SystemModel, config: ValueConfig, states, disturbances=None) -> np.ndarray:
    """Values only, for a batch of states ``(B, n)``; all states share the samples."""
    return evaluate_batch(system, config, states, disturbances, with_gradient=False)[0]


def nominal_system(system: SystemModel) -> SystemModel:
    """``system`` with its disturbance box collapsed to the midpoint."""
    mid = system.nominal_disturbance
    return with_disturbance_box(system, mid, mid)


def evaluate_pcbf(system: SystemModel, config: ValueConfig, x0) -> ValueEstimate:
    """Undisturbed value: one rollout under the midpoint disturbance."""
    return evaluate(nominal_system(system), replace(config, num_samples=1), x0)
