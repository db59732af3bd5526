"""Compiled per-sample dynamics kernels and the compiled RK4 rollout loop.

A system may carry a :class:`SystemKernels` tag naming one of the compiled
model families below plus its float parameter vector ``p``. Each family
provides ``drift(x, d, p, out)``, ``input_map(x, d, p, out)``,
``drift_jacobian(x, d, p, out)`` and ``input_map_jacobian(x, d, u, p, out)``.
The rollout loop then runs entirely in compiled code. It performs the same
RK4 step and exact step Jacobian as the numpy path in :mod:`rpcbf.rollout`.

Callers select a family by an integer code. Each family has its own cached
entry point that hands the family's functions to a shared loop, so the loop
is specialised per family at compile time. Function objects are never passed
in from Python, which would keep the kernels out of numba's on-disk cache.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import numba as nb
import numpy as np


class SystemKernels(NamedTuple):
    code: int
    params: np.ndarray
    # rows (coord, sign, bound, scale) when h is a max of scaled box faces
    faces: Optional[np.ndarray] = None


DOUBLE_INTEGRATOR = 0
SEGWAY = 1


POLICY_CODES = {"saturating_linear": 0, "constant": 1, "bang_bang": 2}


# -- double integrator: p' = v, v' = u / m, no parameters ---------------------

@nb.njit(cache=True, error_model='numpy')
def di_drift(x, d, p, out):
    out[0] = x[1]
    out[1] = 0.0


@nb.njit(cache=True, error_model='numpy')
def di_input_map(x, d, p, out):
    out[0, 0] = 0.0
    out[1, 0] = 1.0 / d[0]


@nb.njit(cache=True, error_model='numpy')
def di_drift_jacobian(x, d, p, out):
    out[:, :] = 0.0
    out[0, 1] = 1.0


@nb.njit(cache=True, error_model='numpy')
def di_input_map_jacobian(x, d, u, p, out):
    out[:, :] = 0.0


@nb.njit(cache=True, error_model='numpy')
def di_rhs_lanes(x, d, u, p, out):
    # closed-loop right-hand side for lanes x[:, l], d[:, l], u[:, l]
    for l in range(x.shape[1]):
        out[0, l] = x[1, l]
        out[1, l] = (1.0 / d[0, l]) * u[0, l]


# -- segway; p = [m_w, r, J_w, l, J_b, gravity], d[0] = body mass -------------

@nb.njit(cache=True, inline='always', error_model='numpy')
def _segway_mass(th, mb, p):
    m_w, r, J_w, l, J_b = p[0], p[1], p[2], p[3], p[4]
    m11 = m_w + J_w / (r * r) + mb
    m12 = mb * l * np.cos(th)
    m22 = mb * l * l + J_b
    return m11, m12, m22, m11 * m22 - m12 * m12


@nb.njit(cache=True, error_model='numpy')
def segway_drift(x, d, p, out):
    th, om, mb, l, grav = x[1], x[3], d[0], p[3], p[5]
    m11, m12, m22, det = _segway_mass(th, mb, p)
    s = np.sin(th)
    b1 = mb * l * s * om * om
    b2 = mb * grav * l * s
    out[0] = x[2]
    out[1] = om
    out[2] = (m22 * b1 - m12 * b2) / det
    out[3] = (m11 * b2 - m12 * b1) / det


@nb.njit(cache=True, error_model='numpy')
def segway_input_map(x, d, p, out):
    m11, m12, m22, det = _segway_mass(x[1], d[0], p)
    b1, b2 = 1.0 / p[1], -1.0
    out[0, 0] = 0.0
    out[1, 0] = 0.0
    out[2, 0] = (m22 * b1 - m12 * b2) / det
    out[3, 0] = (m11 * b2 - m12 * b1) / det


@nb.njit(cache=True, error_model='numpy')
def segway_drift_jacobian(x, d, p, out):
    th, om, mb, l, grav = x[1], x[3], d[0], p[3], p[5]
    m11, m12, m22, det = _segway_mass(th, mb, p)
    s, c = np.sin(th), np.cos(th)
    b1 = mb * l * s * om * om
    b2 = mb * grav * l * s
    acc1 = (m22 * b1 - m12 * b2) / det
    acc2 = (m11 * b2 - m12 * b1) / det
    dm12 = -mb * l * s
    r1 = mb * l * c * om * om - dm12 * acc2
    r2 = mb * grav * l * c - dm12 * acc1
    q1 = 2.0 * mb * l * s * om
    out[:, :] = 0.0
    out[0, 2] = 1.0
    out[1, 3] = 1.0
    out[2, 1] = (m22 * r1 - m12 * r2) / det
    out[3, 1] = (m11 * r2 - m12 * r1) / det
    out[2, 3] = m22 * q1 / det
    out[3, 3] = -m12 * q1 / det


@nb.njit(cache=True, error_model='numpy')
def segway_input_map_jacobian(x, d, u, p, out):
    th, mb, l = x[1], d[0], p[3]
    m11, m12, m22, det = _segway_mass(th, mb, p)
    b1, b2 = u[0] / p[1], -u[0]
    acc1 = (m22 * b1 - m12 * b2) / det
    acc2 = (m11 * b2 - m12 * b1) / det
    dm12 = -mb * l * np.sin(th)
    r1, r2 = -dm12 * acc2, -dm12 * acc1
    out[:, :] = 0.0
    out[2, 1] = (m22 * r1 - m12 * r2) / det
    out[3, 1] = (m11 * r2 - m12 * r1) / det


@nb.njit(cache=True, error_model='numpy')
def segway_rhs_lanes(x, d, u, p, out):
    r, l, grav = p[1], p[3], p[5]
    for q in range(x.shape[1]):
        th, om, mb = x[1, q], x[3, q], d[0, q]
        m11, m12, m22, det = _segway_mass(th, mb, p)
        s = np.sin(th)
        b1 = mb * l * s * om * om
        b2 = mb * grav * l * s
        g1, g2 = 1.0 / r, -1.0
        out[0, q] = x[2, q]
        out[1, q] = om
        out[2, q] = (m22 * b1 - m12 * b2) / det + (m22 * g1 - m12 * g2) / det * u[0, q]
        out[3, q] = (m11 * b2 - m12 * b1) / det + (m11 * g2 - m12 * g1) / det * u[0, q]


# -- rollout -------------------------------------------------------------------

@nb.njit(cache=True, inline='always', error_model='numpy')
def _policy(code, K, uc, lo, hi, x, u, Du):
    m, n = K.shape
    for i in range(m):
        if code == 1:
            u[i] = uc[i]
            for j in range(n):
                Du[i, j] = 0.0
            continue
        raw = 0.0
        for j in range(n):
            raw -= K[i, j] * x[j]
        if code == 0:
            inside = lo[i] < raw < hi[i]
            u[i] = min(max(raw, lo[i]), hi[i])
            for j in range(n):
                Du[i, j] = -K[i, j] if inside else 0.0
        else:
            if raw > 0:
                u[i] = hi[i]
            elif raw < 0:
                u[i] = lo[i]
            else:
                u[i] = min(max(0.0, lo[i]), hi[i])
            for j in range(n):
                Du[i, j] = 0.0


@nb.njit(cache=True, inline='always', error_model='numpy')
def _policy_lanes(code, K, uc, lo, hi, x, u):
    m, n = K.shape
    for i in range(m):
        for q in range(x.shape[1]):
            if code == 1:
                u[i, q] = uc[i]
                continue
            raw = 0.0
            for j in range(n):
                raw -= K[i, j] * x[j, q]
            if code == 0:
                u[i, q] = min(max(raw, lo[i]), hi[i])
            elif raw > 0:
                u[i, q] = hi[i]
            elif raw < 0:
                u[i, q] = lo[i]
            else:
                u[i, q] = min(max(0.0, lo[i]), hi[i])


@nb.njit(cache=True, inline='always', error_model='numpy')
def _rollout_loop(drift, input_map, drift_jacobian, input_map_jacobian, sp, code, K, uc, lo, hi,
                  x0, dist, dt, H, with_sens, states, sens):
    B, n = x0.shape
    m = K.shape[0]
    f = np.empty(n)
    G = np.empty((n, m))
    u = np.empty(m)
    Du = np.empty((m, n))
    Jf = np.empty((n, n))
    Jg = np.empty((n, n))
    ks = np.empty((4, n))
    Ds = np.empty((4, n, n))
    xs = np.empty(n)
    J = np.empty((n, n))
    S = np.empty((n, n))
    Phi = np.empty((n, n))
    coef = (0.0, 0.5, 0.5, 1.0)
    for b in range(B):
        x = x0[b].copy()
        states[b, 0] = x
        if with_sens:
            Phi[:, :] = 0.0
            for i in range(n):
                Phi[i, i] = 1.0
            sens[b, 0] = Phi
        for k in range(H - 1):
            d = dist[b, k]
            for st in range(4):
                for i in range(n):
                    xs[i] = x[i] + coef[st] * dt * ks[st - 1, i] if st > 0 else x[i]
                _policy(code, K, uc, lo, hi, xs, u, Du)
                drift(xs, d, sp, f)
                input_map(xs, d, sp, G)
                for i in range(n):
                    acc = f[i]
                    for j in range(m):
                        acc += G[i, j] * u[j]
                    ks[st, i] = acc
                if with_sens:
                    drift_jacobian(xs, d, sp, Jf)
                    input_map_jacobian(xs, d, u, sp, Jg)
                    for i in range(n):
                        for j in range(n):
                            acc = Jf[i, j] + Jg[i, j]
                            for l in range(m):
                                acc += G[i, l] * Du[l, j]
                            J[i, j] = acc
                    if st == 0:
                        Ds[0] = J
                    else:
                        c = coef[st] * dt
                        for i in range(n):
                            for j in range(n):
                                acc = J[i, j]
                                for l in range(n):
                                    acc += J[i, l] * c * Ds[st - 1, l, j]
                                Ds[st, i, j] = acc
            finite = True
            for i in range(n):
                x[i] = x[i] + (dt / 6.0) * (ks[0, i] + 2.0 * ks[1, i] + 2.0 * ks[2, i] + ks[3, i])
                if not np.isfinite(x[i]):
                    finite = False
            if not finite:
                return k + 1, b
            states[b, k + 1] = x
            if with_sens:
                for i in range(n):
                    for j in range(n):
                        S[i, j] = (dt / 6.0) * (Ds[0, i, j] + 2.0 * Ds[1, i, j]
                                                + 2.0 * Ds[2, i, j] + Ds[3, i, j])
                    S[i, i] += 1.0
                for i in range(n):
                    for j in range(n):
                        acc = 0.0
                        for l in range(n):
                            acc += S[i, l] * Phi[l, j]
                        J[i, j] = acc
                Phi[:, :] = J
                sens[b, k + 1] = Phi
    return -1, -1


@nb.njit(cache=True, inline='always', error_model='numpy')
def _values_loop(rhs, sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout):
    # all N samples of one initial state advance in lockstep (the lanes), so
    # the inner loops run over independent samples
    B, n = x0.shape
    N = dist.shape[2]
    m = K.shape[0]
    u = np.empty((m, N))
    ks = np.empty((4, n, N))
    xs = np.empty((n, N))
    x = np.empty((n, N))
    best = np.empty(N)
    coef = (0.0, 0.5, 0.5, 1.0)
    for b in range(B):
        for i in range(n):
            for q in range(N):
                x[i, q] = x0[b, i]
        for k in range(H):
            if k > 0:
                d = dist[k - 1]
                for st in range(4):
                    if st == 0:
                        xs[:, :] = x
                    else:
                        c = coef[st] * dt
                        for i in range(n):
                            for q in range(N):
                                xs[i, q] = x[i, q] + c * ks[st - 1, i, q]
                    _policy_lanes(code, K, uc, lo, hi, xs, u)
                    rhs(xs, d, u, sp, ks[st])
                for i in range(n):
                    for q in range(N):
                        x[i, q] = x[i, q] + (dt / 6.0) * (ks[0, i, q] + 2.0 * ks[1, i, q]
                                                          + 2.0 * ks[2, i, q] + ks[3, i, q])
                for q in range(N):
                    for i in range(n):
                        if not np.isfinite(x[i, q]):
                            return k, b * N + q
            best[:] = -np.inf
            for f in range(faces.shape[0]):
                ci, sg, bd, sc = int(faces[f, 0]), faces[f, 1], faces[f, 2], faces[f, 3]
                for q in range(N):
                    val = (sg * x[ci, q] - bd) / sc
                    if val > best[q]:
                        best[q] = val
            for q in range(N):
                hout[b * N + q, k] = best[q]
    return -1, -1


# one cached entry point per family; the loops above are specialised on the
# family's functions at compile time

@nb.njit(cache=True, error_model='numpy')
def _rollout_di(sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens):
    return _rollout_loop(di_drift, di_input_map, di_drift_jacobian, di_input_map_jacobian,
                         sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens)


@nb.njit(cache=True, error_model='numpy')
def _rollout_segway(sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens):
    return _rollout_loop(segway_drift, segway_input_map, segway_drift_jacobian,
                         segway_input_map_jacobian,
                         sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens)


@nb.njit(cache=True, error_model='numpy')
def _values_di(sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout):
    return _values_loop(di_rhs_lanes, sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout)


@nb.njit(cache=True, error_model='numpy')
def _values_segway(sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout):
    return _values_loop(segway_rhs_lanes, sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout)


_ROLLOUT = {DOUBLE_INTEGRATOR: _rollout_di, SEGWAY: _rollout_segway}
_VALUES = {DOUBLE_INTEGRATOR: _values_di, SEGWAY: _values_segway}


def rollout_kernel(sys_code, sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens):
    """Fill ``states`` (and ``sens``); return ``(step, sample)`` of a blow-up or ``(-1, -1)``."""
    return _ROLLOUT[sys_code](sp, code, K, uc, lo, hi, x0, dist, dt, H, with_sens, states, sens)


def constraint_values_kernel(sys_code, sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout):
    """Fill ``hout[b * N + s, k]`` with ``h`` along the rollout of ``x0[b]`` under sample ``s``.

    ``dist`` is laid out as ``(steps, d, N)``.
    ``h`` is the max over ``faces`` rows ``(coord, sign, bound, scale)`` of
    ``(sign * x[coord] - bound) / scale``. States are not stored. Returns
    ``(step, row)`` of a blow-up or ``(-1, -1)``.
    """
    return _VALUES[sys_code](sp, code, K, uc, lo, hi, faces, x0, dist, dt, H, hout)


# -- spline maximum --------------------------------------------------------------

@nb.njit(cache=True, error_model='numpy')
def spline_max_kernel(h, M, dt, value, seg, off):
    """Per-row maximum of the spline with knot values ``h`` and second derivatives ``M``.

    Candidates are visited in time order and only a strictly larger value
    replaces the incumbent, so ties resolve to the earliest time.
    """
    R, H = h.shape
    for r in range(R):
        best = h[r, 0]
        bseg = 0
        boff = 0.0
        for k in range(H - 1):
            if k > 0 and h[r, k] > best:
                best, bseg, boff = h[r, k], k, 0.0
            a = h[r, k]
            b = (h[r, k + 1] - h[r, k]) / dt - dt * (2.0 * M[r, k] + M[r, k + 1]) / 6.0
            c = 0.5 * M[r, k]
            d = (M[r, k + 1] - M[r, k]) / (6.0 * dt)
            A, Bq, C = 3.0 * d, 2.0 * c, b
            disc = Bq * Bq - 4.0 * A * C
            if disc < 0:
                continue
            q = -0.5 * (Bq + (1.0 if Bq >= 0 else -1.0) * np.sqrt(disc))
            r1 = q / A if A != 0 else np.nan
            r2 = C / q if q != 0 else np.nan
            if r1 > r2:
                r1, r2 = r2, r1
            for s in (r1, r2):
                if s > 0 and s < dt:
                    v = a + s * (b + s * (c + s * d))
                    if v > best:
                        best, bseg, boff = v, k, s
        if h[r, H - 1] > best:
            best, bseg, boff = h[r, H - 1], H - 1, 0.0
        value[r] = best
        seg[r] = bseg
        off[r] = boff
