"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports cleanly and the environment
variable ``ENTOT_DISABLE_NUMBA`` is unset (or ``0``).  Both paths compute the
same quantities; they are kept side by side so tests can compare them and
``benchmarks/bench_kernels.py`` can time them.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_DISABLED = os.environ.get("ENTOT_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")
_backend = "numba" if (HAVE_NUMBA and not _DISABLED) else "numpy"

# Status codes returned by the coordinate-descent kernel.
RUNNING, CONVERGED, EXHAUSTED = 0, 1, 2


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ---------------------------------------------------------------------------
# log-sum-exp along both axes of M_ij = logK_ij + scale * (a_i + b_j) + offset


def _lse_axes_numpy(logK, a, b, scale, offset):
    M = logK + scale * (a[:, None] + b[None, :]) + offset
    rmax = M.max(axis=1)
    row = rmax + np.log(np.exp(M - rmax[:, None]).sum(axis=1))
    cmax = M.max(axis=0)
    col = cmax + np.log(np.exp(M - cmax[None, :]).sum(axis=0))
    top = row.max()
    total = top + math.log(np.exp(row - top).sum())
    return total, row, col


def _njit(fn):
    if HAVE_NUMBA:
        return numba.njit(cache=True)(fn)
    return fn


@_njit
def _lse_axes_loops(logK, a, b, scale, offset):
    n, m = logK.shape
    rmax = np.full(n, -np.inf)
    cmax = np.full(m, -np.inf)
    for i in range(n):
        ai = scale * a[i] + offset
        for j in range(m):
            x = logK[i, j] + ai + scale * b[j]
            if x > rmax[i]:
                rmax[i] = x
            if x > cmax[j]:
                cmax[j] = x
    rsum = np.zeros(n)
    csum = np.zeros(m)
    for i in range(n):
        ai = scale * a[i] + offset
        for j in range(m):
            x = logK[i, j] + ai + scale * b[j]
            rsum[i] += math.exp(x - rmax[i])
            csum[j] += math.exp(x - cmax[j])
    row = rmax + np.log(rsum)
    col = cmax + np.log(csum)
    top = row.max()
    s = 0.0
    for i in range(n):
        s += math.exp(row[i] - top)
    return top + math.log(s), row, col


# ---------------------------------------------------------------------------
# Greedy coordinate steps (Greenkhorn).  State arrays are updated in place:
#   u, v     log-scalings
#   rs, cs   cached row / column sums of B(u, v)
#   acc      [sum of B, <u, r>, <v, c>]
# Records for iterate t go to res[t], dual[t]; the coordinate moved at step t
# goes to axis[t] (0 row, 1 column) and idx[t].


# rho(a, b) = b - a + a log(a / b) = a * h((b - a) / a) with h(x) = x - log1p(x).
# Near convergence h(x) ~ x^2 / 2 is far below the rounding error of the
# direct formula, which would make the greedy choice noise; a series keeps
# full relative accuracy for |x| < 0.1.
_SERIES_X = 0.1
_DIRECT_X = 1e300
_SERIES_TERMS = 16


@_njit
def _h(x):
    if abs(x) >= _SERIES_X:
        return x - math.log1p(x)
    s = 0.0
    p = x
    for k in range(2, _SERIES_TERMS + 2):
        p = -p * x
        s += p / k
    return -s


@_njit
def _gain(a, b):
    if b <= 0.0:
        return math.inf
    if a == 0.0:
        return b
    if b < (1.0 - _SERIES_X) * a:
        # x = (b - a) / a near -1 would lose b's precision; the direct form
        # has no cancellation here
        q = a / b
        lq = math.log(q) if q < math.inf else math.log(a) - math.log(b)
        return b - a + a * lq
    if b - a > _DIRECT_X * a:
        # (b - a) / a would overflow
        return b - a + a * (math.log(a) - math.log(b))
    return a * _h((b - a) / a)


@_njit
def _gk_refresh_loops(logK, r, c, u, v, rs, cs, acc):
    n, m = logK.shape
    total, row, col = _lse_axes_loops(logK, u, v, 1.0, 0.0)
    ur = 0.0
    for i in range(n):
        rs[i] = math.exp(row[i])
        ur += u[i] * r[i]
    vc = 0.0
    for j in range(m):
        cs[j] = math.exp(col[j])
        vc += v[j] * c[j]
    acc[0] = math.exp(total)
    acc[1] = ur
    acc[2] = vc


@_njit
def _gk_steps_loops(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                    t0, t1, max_iter, tol, refresh):
    n, m = logK.shape
    t = t0
    while t < t1:
        if refresh > 0 and t > 0 and t % refresh == 0:
            _gk_refresh_loops(logK, r, c, u, v, rs, cs, acc)
        err = 0.0
        for i in range(n):
            err += abs(rs[i] - r[i])
        for j in range(m):
            err += abs(cs[j] - c[j])
        res[t] = err
        dual[t] = acc[0] - acc[1] - acc[2]
        if err <= tol:
            return t, CONVERGED
        if t >= max_iter:
            return t, EXHAUSTED
        best_i, gain_i = 0, -1.0
        for i in range(n):
            g = _gain(r[i], rs[i])
            if g > gain_i:
                best_i, gain_i = i, g
        best_j, gain_j = 0, -1.0
        for j in range(m):
            g = _gain(c[j], cs[j])
            if g > gain_j:
                best_j, gain_j = j, g
        if gain_i > gain_j:
            i = best_i
            mx = -math.inf
            for j in range(m):
                x = v[j] + logK[i, j]
                if x > mx:
                    mx = x
            s = 0.0
            for j in range(m):
                s += math.exp(v[j] + logK[i, j] - mx)
            new = math.log(r[i]) - (mx + math.log(s))
            delta = new - u[i]
            total = 0.0
            for j in range(m):
                old_e = math.exp(u[i] + v[j] + logK[i, j])
                new_e = math.exp(new + v[j] + logK[i, j])
                cs[j] += new_e - old_e
                total += new_e
            acc[0] += total - rs[i]
            acc[1] += r[i] * delta
            rs[i] = total
            u[i] = new
            axis[t] = 0
            idx[t] = i
        else:
            j = best_j
            mx = -math.inf
            for i in range(n):
                x = u[i] + logK[i, j]
                if x > mx:
                    mx = x
            s = 0.0
            for i in range(n):
                s += math.exp(u[i] + logK[i, j] - mx)
            new = math.log(c[j]) - (mx + math.log(s))
            delta = new - v[j]
            total = 0.0
            for i in range(n):
                old_e = math.exp(u[i] + v[j] + logK[i, j])
                new_e = math.exp(u[i] + new + logK[i, j])
                rs[i] += new_e - old_e
                total += new_e
            acc[0] += total - cs[j]
            acc[2] += c[j] * delta
            cs[j] = total
            v[j] = new
            axis[t] = 1
            idx[t] = j
        t += 1
    return t, RUNNING


def _gk_steps_numpy(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                    t0, t1, max_iter, tol, refresh):
    log_r = np.log(r)
    log_c = np.log(c)
    t = t0
    while t < t1:
        if refresh > 0 and t > 0 and t % refresh == 0:
            total, row, col = _lse_axes_numpy(logK, u, v, 1.0, 0.0)
            rs[:] = np.exp(row)
            cs[:] = np.exp(col)
            acc[:] = (math.exp(total), u @ r, v @ c)
        err = np.abs(rs - r).sum() + np.abs(cs - c).sum()
        res[t] = err
        dual[t] = acc[0] - acc[1] - acc[2]
        if err <= tol:
            return t, CONVERGED
        if t >= max_iter:
            return t, EXHAUSTED
        gr = _gain_vec(r, rs)
        gc = _gain_vec(c, cs)
        i = int(np.argmax(gr))
        j = int(np.argmax(gc))
        if gr[i] > gc[j]:
            line = v + logK[i]
            mx = line.max()
            new = log_r[i] - (mx + math.log(np.exp(line - mx).sum()))
            old_e = np.exp(u[i] + line)
            new_e = np.exp(new + line)
            cs += new_e - old_e
            total = new_e.sum()
            acc[0] += total - rs[i]
            acc[1] += r[i] * (new - u[i])
            rs[i] = total
            u[i] = new
            axis[t], idx[t] = 0, i
        else:
            line = u + logK[:, j]
            mx = line.max()
            new = log_c[j] - (mx + math.log(np.exp(line - mx).sum()))
            old_e = np.exp(v[j] + line)
            new_e = np.exp(new + line)
            rs += new_e - old_e
            total = new_e.sum()
            acc[0] += total - cs[j]
            acc[2] += c[j] * (new - v[j])
            cs[j] = total
            v[j] = new
            axis[t], idx[t] = 1, j
        t += 1
    return t, RUNNING


def _h_vec(x):
    out = np.empty_like(x)
    big = np.abs(x) >= _SERIES_X
    out[big] = x[big] - np.log1p(x[big])
    xs = x[~big]
    s = np.zeros_like(xs)
    p = xs.copy()
    for k in range(2, _SERIES_TERMS + 2):
        p = -p * xs
        s += p / k
    out[~big] = -s
    return out


# Direct expm1(x) - x loses about 2 eps / |x| relative accuracy, so below
# |x| = 0.05 the Taylor series is used instead (11 terms reach 1e-17).
_EM1_SERIES_X = 0.05


def expm1_minus_x(x):
    """``exp(x) - 1 - x`` with full relative accuracy near zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = np.abs(x) >= _EM1_SERIES_X
    with np.errstate(over="ignore"):
        out[big] = np.expm1(x[big]) - x[big]
    xs = x[~big]
    s = np.zeros_like(xs)
    p = xs * xs / 2.0
    for k in range(3, 14):
        s += p
        p = p * xs / k
    out[~big] = s
    return out


def _gain_vec(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        safe_a = np.where(a > 0, a, 1.0)
        safe_b = np.where(b > 0, b, 1.0)
        below = b < (1.0 - _SERIES_X) * a
        far = below | (b - a > _DIRECT_X * a)
        x = np.where(far, 0.0, (b - a) / safe_a)
        q = safe_a / safe_b
        lq = np.where(below & np.isfinite(q), np.log(q), np.log(safe_a) - np.log(safe_b))
        direct = b - a + a * lq
        g = np.where(a > 0, np.where(far, direct, a * _h_vec(x)), b)
    return np.where(b > 0, g, np.inf)


# ---------------------------------------------------------------------------
# Bregman gap of the multiplier duals along a step d from mu:
#   sum P_ij (e^D_ij - 1 - D_ij),  P = exp(logK + (mu_i + mu_j)/eta + offset),
#   D_ij = (d_i + d_j) / eta, optionally centred under P first.


@_njit
def _em1mx(x):
    if abs(x) >= _EM1_SERIES_X:
        return math.expm1(x) - x
    s = 0.0
    p = x * x / 2.0
    for k in range(3, 14):
        s += p
        p = p * x / k
    return s


@_njit
def _bregman_sum_loops(logK, mu, d, inv_eta, offset, centred):
    n = logK.shape[0]
    P = np.empty((n, n))
    shift = 0.0
    for i in range(n):
        for j in range(n):
            P[i, j] = math.exp(logK[i, j] + (mu[i] + mu[n + j]) * inv_eta + offset)
            if centred:
                shift += P[i, j] * (d[i] + d[n + j]) * inv_eta
    s = 0.0
    for i in range(n):
        for j in range(n):
            s += P[i, j] * _em1mx((d[i] + d[n + j]) * inv_eta - shift)
    return s


def _bregman_sum_numpy(logK, mu, d, inv_eta, offset, centred):
    n = logK.shape[0]
    P = np.exp(logK + (mu[:n, None] + mu[None, n:]) * inv_eta + offset)
    D = (d[:n, None] + d[None, n:]) * inv_eta
    if centred:
        D = D - np.sum(P * D)
    return float(np.sum(P * expm1_minus_x(D)))


def bregman_sum(logK, mu, d, inv_eta, offset, centred):
    with np.errstate(over="ignore", invalid="ignore"):
        if _backend == "numba":
            return float(_bregman_sum_loops(logK, mu, d, float(inv_eta), float(offset), bool(centred)))
        return _bregman_sum_numpy(logK, mu, d, inv_eta, offset, centred)


def lse_axes(logK, a, b, scale=1.0, offset=0.0):
    """Log-sum-exp of M = logK + scale*(a_i + b_j) + offset.

    Returns ``(total, row, col)`` where ``row[i] = log sum_j exp(M_ij)`` and
    ``col[j] = log sum_i exp(M_ij)``.  Every sum is max-subtracted per line.
    """
    if _backend == "numba":
        return _lse_axes_loops(logK, a, b, float(scale), float(offset))
    return _lse_axes_numpy(logK, a, b, scale, offset)


def greenkhorn_steps(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                     t0, t1, max_iter, tol, refresh):
    if _backend == "numba":
        t, status = _gk_steps_loops(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                                  t0, t1, max_iter, tol, refresh)
    else:
        t, status = _gk_steps_numpy(logK, r, c, u, v, rs, cs, acc, res, dual, axis, idx,
                                    t0, t1, max_iter, tol, refresh)
    return int(t), int(status)
