"""Closed-form maximum of a cubic interpolating spline on a uniform grid.

The spline uses not-a-knot end conditions, so data sampled from any cubic
(in particular the braking parabola of the double integrator) is reproduced
exactly. Second derivatives are linear in the data, ``M = K h / dt**2``, with
``K`` depending only on the number of knots; ``K`` is built once per size by
a tridiagonal solve with all unit right-hand sides at once.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .kernels import spline_max_kernel


@dataclass(frozen=True)
class SplineMax:
    value: float
    time: float
    weights: np.ndarray
    knot: int | None  # index if the maximum sits on a knot, else None
    segment: int


def _solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm; ``rhs`` may have trailing columns (one per system)."""
    n = len(diag)
    c = np.zeros(n)
    d = np.array(rhs, dtype=float)
    b = float(diag[0])
    c[0] = upper[0] / b if n > 1 else 0.0
    d[0] = d[0] / b
    for i in range(1, n):
        b = diag[i] - lower[i - 1] * c[i - 1]
        if i < n - 1:
            c[i] = upper[i] / b
        d[i] = (d[i] - lower[i - 1] * d[i - 1]) / b
    for i in range(n - 2, -1, -1):
        d[i] = d[i] - c[i] * d[i + 1]
    return d


@lru_cache(maxsize=64)
def second_derivative_operator(H: int) -> np.ndarray:
    """Matrix ``K`` with ``M = K @ h / dt**2`` for ``H`` uniformly spaced knots."""
    if H < 2:
        raise ValueError("a spline needs at least two knots")
    K = np.zeros((H, H))
    if H == 3:
        K[:] = [1.0, -2.0, 1.0]
    elif H >= 4:
        # r_k = 6 (h_{k-1} - 2 h_k + h_{k+1}), k = 1 .. H-2
        R = np.zeros((H - 2, H))
        for k in range(1, H - 1):
            R[k - 1, k - 1:k + 2] = (6.0, -12.0, 6.0)
        # not-a-knot folds M_0 and M_{H-1} into the first/last rows: 6 M_1 = r_1
        K[1] = R[0] / 6.0
        K[H - 2] = R[-1] / 6.0
        m = H - 4
        if m > 0:
            rhs = R[1:-1].copy()
            rhs[0] -= K[1]
            rhs[-1] -= K[H - 2]
            ones = np.ones(m - 1)
            K[2:H - 2] = _solve_tridiagonal(ones, np.full(m, 4.0), ones, rhs)
        K[0] = 2.0 * K[1] - K[2]
        K[H - 1] = 2.0 * K[H - 2] - K[H - 3]
    K.setflags(write=False)
    return K


def _segment_coefficients(h, dt):
    """Per-segment power-basis coefficients in the local time ``s`` in ``[0, dt]``."""
    M = h @ second_derivative_operator(h.shape[-1]).T / dt**2
    a = h[..., :-1]
    b = (h[..., 1:] - h[..., :-1]) / dt - dt * (2.0 * M[..., :-1] + M[..., 1:]) / 6.0
    c = 0.5 * M[..., :-1]
    d = (M[..., 1:] - M[..., :-1]) / (6.0 * dt)
    return a, b, c, d


def _interior_stationary_points(b, c, d, dt):
    """Roots of ``b + 2 c s + 3 d s**2`` in the open interval ``(0, dt)``, sorted.

    Returns an array ``(..., 2)`` with NaN for missing roots.
    """
    A, Bq, C = 3.0 * d, 2.0 * c, b
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = Bq * Bq - 4.0 * A * C
        sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
        q = -0.5 * (Bq + np.where(Bq >= 0, 1.0, -1.0) * sq)
        r1 = np.where(A != 0, q / A, np.nan)
        r2 = C / q
        # A == 0 and Bq == 0: no isolated root
        r2 = np.where(q != 0, r2, np.nan)
    roots = np.sort(np.stack([r1, r2], axis=-1), axis=-1)
    inside = (roots > 0) & (roots < dt)
    return np.where(inside, roots, np.nan)


def spline_max_batch(h_values, dt: float, backend: str = "compiled"):
    """Vectorised spline maximum over the last axis.

    Returns ``(value, time, segment, s)`` arrays: ``segment`` is the segment
    holding the maximiser and ``s`` its offset inside the segment (``s == 0``
    means the maximiser is the knot ``segment``; the final knot is reported as
    ``segment = H - 1, s = 0``). ``backend="numpy"`` selects the pure numpy
    candidate search instead of the compiled one.
    """
    h = np.asarray(h_values, dtype=float)
    H = h.shape[-1]
    if H < 2:
        raise ValueError("spline_max needs at least two samples")
    if not np.isfinite(h).all():
        raise ValueError("h_values must be finite")
    if backend == "compiled":
        return _spline_max_compiled(h, dt)
    if backend != "numpy":
        raise ValueError(f"unknown backend {backend!r}")
    a, b, c, d = _segment_coefficients(h, dt)
    roots = _interior_stationary_points(b, c, d, dt)
    s = np.nan_to_num(roots)
    vals = a[..., None] + s * (b[..., None] + s * (c[..., None] + s * d[..., None]))
    vals = np.where(np.isnan(roots), -np.inf, vals)
    lead = h.shape[:-1]
    # time-ordered candidates: knot k, roots of segment k, ..., final knot
    cand = np.concatenate([h[..., :-1, None], vals], axis=-1).reshape(lead + (3 * (H - 1),))
    cand = np.concatenate([cand, h[..., -1:]], axis=-1)
    offs = np.concatenate([np.zeros(lead + (H - 1, 1)), s], axis=-1).reshape(lead + (3 * (H - 1),))
    offs = np.concatenate([offs, np.zeros(lead + (1,))], axis=-1)
    best = np.argmax(cand, axis=-1)
    value = np.take_along_axis(cand, best[..., None], axis=-1)[..., 0]
    s_best = np.take_along_axis(offs, best[..., None], axis=-1)[..., 0]
    seg = best // 3
    return value, seg * dt + s_best, seg, s_best


def _spline_max_compiled(h, dt):
    lead = h.shape[:-1]
    h2 = np.ascontiguousarray(h.reshape(-1, h.shape[-1]))
    M = h2 @ second_derivative_operator(h.shape[-1]).T / dt**2
    R = h2.shape[0]
    value, seg, off = np.empty(R), np.empty(R, dtype=np.int64), np.empty(R)
    spline_max_kernel(h2, M, float(dt), value, seg, off)
    value, seg, off = value.reshape(lead), seg.reshape(lead), off.reshape(lead)
    return value, seg * dt + off, seg, off


def spline_weights(H: int, dt: float, segment: int, s: float) -> np.ndarray:
    """``dS(t)/dh`` at the fixed time ``t = segment * dt + s``."""
    w = np.zeros(H)
    if s == 0.0:
        w[segment] = 1.0
        return w
    K = second_derivative_operator(H) / dt**2
    k = segment
    w[k] += 1.0 - s / dt
    w[k + 1] += s / dt
    w += K[k] * (-dt * s / 3.0 + 0.5 * s**2 - s**3 / (6.0 * dt))
    w += K[k + 1] * (-dt * s / 6.0 + s**3 / (6.0 * dt))
    return w


def spline_max(h_values, dt: float) -> SplineMax:
    """Maximum of the interpolating spline through ``(k dt, h_k)``.

    Ties go to the earliest time. ``weights`` is the gradient of the maximum
    value with respect to ``h_values`` at the fixed maximiser.
    """
    h = np.asarray(h_values, dtype=float)
    if h.ndim != 1:
        raise ValueError("h_values must be one-dimensional")
    value, time, seg, s = spline_max_batch(h, dt)
    seg, s = int(seg), float(s)
    return SplineMax(float(value), float(time), spline_weights(len(h), dt, seg, s),
                     seg if s == 0.0 else None, seg)


def naive_max(h_values):
    """Largest sample and its (lowest) index."""
    h = np.asarray(h_values, dtype=float)
    if h.size == 0:
        raise ValueError("naive_max of an empty sequence")
    k = int(np.argmax(h))
    return float(h[k]), k
