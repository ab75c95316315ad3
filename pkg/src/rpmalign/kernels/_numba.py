"""Numba-jitted implementations of the hot kernels.

Signature-compatible with ``_numpy.py``. All kernels are serial
(``parallel=False``) so that reduction order, and therefore results, are
deterministic for a given backend.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_JIT = dict(cache=True, fastmath=False, nogil=True)


@njit(**_JIT)
def pairwise_sqdist(a, b):
    j, d = a.shape
    k = b.shape[0]
    out = np.empty((j, k), dtype=np.float64)
    for p in range(j):
        for q in range(k):
            acc = 0.0
            for c in range(d):
                diff = a[p, c] - b[q, c]
                acc += diff * diff
            out[p, q] = acc
    return out


@njit(**_JIT)
def pairwise_sqdist_vjp(a, b, grad):
    j, d = a.shape
    k = b.shape[0]
    ga = np.zeros((j, d), dtype=np.float64)
    gb = np.zeros((k, d), dtype=np.float64)
    for p in range(j):
        for q in range(k):
            g2 = 2.0 * grad[p, q]
            for c in range(d):
                diff = a[p, c] - b[q, c]
                ga[p, c] += g2 * diff
                gb[q, c] -= g2 * diff
    return ga, gb


@njit(**_JIT)
def _lse_row(x, row, n):
    m = x[row, 0]
    for c in range(1, n):
        if x[row, c] > m:
            m = x[row, c]
    acc = 0.0
    for c in range(n):
        acc += np.exp(x[row, c] - m)
    return m + np.log(acc)


@njit(**_JIT)
def _lse_col(x, col, n):
    m = x[0, col]
    for r in range(1, n):
        if x[r, col] > m:
            m = x[r, col]
    acc = 0.0
    for r in range(n):
        acc += np.exp(x[r, col] - m)
    return m + np.log(acc)


@njit(**_JIT)
def sinkhorn_log_nograd(log_m, n_rows, n_cols, n_iters):
    out = log_m.copy()
    nr1, nc1 = out.shape
    for _ in range(n_iters):
        for r in range(n_rows):
            z = _lse_row(out, r, nc1)
            for c in range(nc1):
                out[r, c] -= z
        for c in range(n_cols):
            z = _lse_col(out, c, nr1)
            for r in range(nr1):
                out[r, c] -= z
    return out


@njit(**_JIT)
def sinkhorn_log_fwd(log_m, n_rows, n_cols, n_iters):
    out = log_m.copy()
    nr1, nc1 = out.shape
    saved = np.empty((2 * n_iters, nr1, nc1), dtype=np.float64)
    for it in range(n_iters):
        saved[2 * it] = out
        for r in range(n_rows):
            z = _lse_row(out, r, nc1)
            for c in range(nc1):
                out[r, c] -= z
        saved[2 * it + 1] = out
        for c in range(n_cols):
            z = _lse_col(out, c, nr1)
            for r in range(nr1):
                out[r, c] -= z
    return out, saved


@njit(**_JIT)
def sinkhorn_log_vjp(saved, n_rows, n_cols, grad):
    g = grad.copy()
    nr1, nc1 = g.shape
    n_iters = saved.shape[0] // 2
    for it in range(n_iters - 1, -1, -1):
        pre = saved[2 * it + 1]
        for c in range(n_cols):
            z = _lse_col(pre, c, nr1)
            gs = 0.0
            for r in range(nr1):
                gs += g[r, c]
            for r in range(nr1):
                g[r, c] -= np.exp(pre[r, c] - z) * gs
        pre = saved[2 * it]
        for r in range(n_rows):
            z = _lse_row(pre, r, nc1)
            gs = 0.0
            for c in range(nc1):
                gs += g[r, c]
            for c in range(nc1):
                g[r, c] -= np.exp(pre[r, c] - z) * gs
    return g


@njit(**_JIT)
def segment_max(x, starts):
    n_seg = starts.shape[0] - 1
    n_col = x.shape[1]
    out = np.empty((n_seg, n_col), dtype=np.float64)
    argrow = np.empty((n_seg, n_col), dtype=np.int64)
    for s in range(n_seg):
        lo = starts[s]
        hi = starts[s + 1]
        for c in range(n_col):
            best = x[lo, c]
            arg = lo
            for r in range(lo + 1, hi):
                if x[r, c] > best:
                    best = x[r, c]
                    arg = r
            out[s, c] = best
            argrow[s, c] = arg
    return out, argrow


@njit(**_JIT)
def radius_pairs(points, radius):
    n = points.shape[0]
    r2 = radius * radius
    counts = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            d2 = 0.0
            for c in range(3):
                diff = points[i, c] - points[j, c]
                d2 += diff * diff
            if d2 <= r2:
                counts[i] += 1
    starts = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        starts[i + 1] = starts[i] + counts[i]
    indices = np.empty(starts[n], dtype=np.int64)
    for i in range(n):
        pos = starts[i]
        for j in range(n):
            d2 = 0.0
            for c in range(3):
                diff = points[i, c] - points[j, c]
                d2 += diff * diff
            if d2 <= r2:
                indices[pos] = j
                pos += 1
    return indices, starts


@njit(**_JIT)
def _clip_acos(x):
    if x > 1.0:
        x = 1.0
    elif x < -1.0:
        x = -1.0
    return np.arccos(x)


@njit(**_JIT)
def ppf_rows(points, normals, indices, starts):
    n = points.shape[0]
    total = indices.shape[0]
    rows = np.empty((total, 10), dtype=np.float64)
    for cen in range(n):
        for p in range(starts[cen], starts[cen + 1]):
            nbr = indices[p]
            dx0 = points[nbr, 0] - points[cen, 0]
            dx1 = points[nbr, 1] - points[cen, 1]
            dx2 = points[nbr, 2] - points[cen, 2]
            dist = np.sqrt(dx0 * dx0 + dx1 * dx1 + dx2 * dx2)
            rows[p, 0] = points[cen, 0]
            rows[p, 1] = points[cen, 1]
            rows[p, 2] = points[cen, 2]
            rows[p, 3] = dx0
            rows[p, 4] = dx1
            rows[p, 5] = dx2
            if dist == 0.0:
                rows[p, 6] = 0.0
                rows[p, 7] = 0.0
                rows[p, 8] = 0.0
                rows[p, 9] = 0.0
            else:
                u0 = dx0 / dist
                u1 = dx1 / dist
                u2 = dx2 / dist
                nc0 = normals[cen, 0]
                nc1 = normals[cen, 1]
                nc2 = normals[cen, 2]
                ni0 = normals[nbr, 0]
                ni1 = normals[nbr, 1]
                ni2 = normals[nbr, 2]
                rows[p, 6] = _clip_acos(nc0 * u0 + nc1 * u1 + nc2 * u2)
                rows[p, 7] = _clip_acos(ni0 * u0 + ni1 * u1 + ni2 * u2)
                rows[p, 8] = _clip_acos(nc0 * ni0 + nc1 * ni1 + nc2 * ni2)
                rows[p, 9] = dist
    return rows
