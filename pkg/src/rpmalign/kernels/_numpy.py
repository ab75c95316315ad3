"""Pure-numpy reference implementations of the hot kernels.

Every function here has a numba twin in ``_numba.py`` with the same
signature. The active backend is chosen at import time by the package
``__init__`` (env var ``RPM_ALIGN_NUMBA``). Keep the two files in sync;
``tests/test_kernels.py`` checks them against each other.
"""

from __future__ import annotations

import numpy as np

# Block size for chunked pairwise distances: bounds the (block, K, D)
# temporary while keeping per-call numpy overhead low.
_BLOCK = 64


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of a (J,D) and b (K,D)."""
    j = a.shape[0]
    out = np.empty((j, b.shape[0]), dtype=np.float64)
    for lo in range(0, j, _BLOCK):
        hi = min(lo + _BLOCK, j)
        diff = a[lo:hi, None, :] - b[None, :, :]
        out[lo:hi] = np.einsum("jkd,jkd->jk", diff, diff)
    return out


def pairwise_sqdist_vjp(
    a: np.ndarray, b: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad * pairwise_sqdist(a, b)) w.r.t. a and b."""
    # d/da_j = sum_k g_jk * 2(a_j - b_k); split to avoid a (J,K,D) temporary.
    row = grad.sum(axis=1)
    col = grad.sum(axis=0)
    ga = 2.0 * (a * row[:, None] - grad @ b)
    gb = 2.0 * (b * col[:, None] - grad.T @ a)
    return ga, gb


def _logsumexp_rows(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=1)
    return m + np.log(np.exp(x - m[:, None]).sum(axis=1))


def sinkhorn_log_nograd(
    log_m: np.ndarray, n_rows: int, n_cols: int, n_iters: int
) -> np.ndarray:
    """Alternating row/column normalization in log space.

    ``log_m`` is (n_rows+1, n_cols+1): the trailing row/column are slack
    entries. Real rows are normalized over all n_cols+1 entries, real
    columns over all n_rows+1 entries; the slack row/column is never
    normalized itself (it is only rescaled by the passes it joins).
    """
    out = log_m.copy()
    for _ in range(n_iters):
        out[:n_rows] -= _logsumexp_rows(out[:n_rows])[:, None]
        out[:, :n_cols] -= _logsumexp_rows(out[:, :n_cols].T)[None, :]
    return out


def sinkhorn_log_fwd(
    log_m: np.ndarray, n_rows: int, n_cols: int, n_iters: int
) -> tuple[np.ndarray, np.ndarray]:
    """Like ``sinkhorn_log_nograd`` but saves the pre-pass matrices."""
    out = log_m.copy()
    saved = np.empty((2 * n_iters,) + log_m.shape, dtype=np.float64)
    for it in range(n_iters):
        saved[2 * it] = out
        out[:n_rows] -= _logsumexp_rows(out[:n_rows])[:, None]
        saved[2 * it + 1] = out
        out[:, :n_cols] -= _logsumexp_rows(out[:, :n_cols].T)[None, :]
    return out, saved


def sinkhorn_log_vjp(
    saved: np.ndarray, n_rows: int, n_cols: int, grad: np.ndarray
) -> np.ndarray:
    """Backward pass through the unrolled normalizations.

    Each pass computes y_i = x_i - lse(x) on the normalized slice, so the
    adjoint is g - softmax(x) * sum(g), applied in reverse pass order.
    """
    g = grad.copy()
    n_iters = saved.shape[0] // 2
    for it in range(n_iters - 1, -1, -1):
        # column pass (was applied second)
        pre = saved[2 * it + 1]
        cols = pre[:, :n_cols]
        sm = np.exp(cols - _logsumexp_rows(cols.T)[None, :])
        g[:, :n_cols] -= sm * g[:, :n_cols].sum(axis=0)[None, :]
        # row pass
        pre = saved[2 * it]
        rows = pre[:n_rows]
        sm = np.exp(rows - _logsumexp_rows(rows)[:, None])
        g[:n_rows] -= sm * g[:n_rows].sum(axis=1)[:, None]
    return g


def segment_max(x: np.ndarray, starts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Columnwise max over row segments [starts[s], starts[s+1]).

    Returns the per-segment maxima and the row index of the first maximum
    per (segment, column) — the tie rule used by the backward pass.
    """
    n_seg = starts.shape[0] - 1
    n_col = x.shape[1]
    out = np.empty((n_seg, n_col), dtype=np.float64)
    argrow = np.empty((n_seg, n_col), dtype=np.int64)
    for s in range(n_seg):
        lo, hi = starts[s], starts[s + 1]
        block = x[lo:hi]
        idx = block.argmax(axis=0)
        out[s] = block[idx, np.arange(n_col)]
        argrow[s] = lo + idx
    return out, argrow


def radius_pairs(points: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All (center, neighbor) pairs within ``radius``, CSR-style.

    Returns (indices, starts) where indices[starts[c]:starts[c+1]] are the
    neighbor indices of center c in ascending order. A point is always its
    own neighbor (distance 0).
    """
    d2 = pairwise_sqdist(points, points)
    mask = d2 <= radius * radius
    counts = mask.sum(axis=1)
    starts = np.zeros(points.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    indices = np.nonzero(mask)[1].astype(np.int64)
    return indices, starts


def ppf_rows(
    points: np.ndarray,
    normals: np.ndarray,
    indices: np.ndarray,
    starts: np.ndarray,
) -> np.ndarray:
    """Raw 10-D input rows [x_c, dx, ppf] for every (center, neighbor) pair.

    The point-pair feature is (angle(n_c, dx), angle(n_i, dx),
    angle(n_c, n_i), |dx|) with angles from arccos of the clamped cosine.
    Self pairs get dx = 0 and ppf = (0, 0, 0, 0).
    """
    n = points.shape[0]
    centers = np.repeat(np.arange(n), np.diff(starts))
    xc = points[centers]
    xi = points[indices]
    nc = normals[centers]
    ni = normals[indices]
    dx = xi - xc
    dist = np.sqrt(np.einsum("rd,rd->r", dx, dx))
    # coincident points (the self pair, or duplicates) get the degenerate
    # all-zero angle convention
    degenerate = dist == 0.0

    safe = np.where(dist > 0.0, dist, 1.0)
    u = dx / safe[:, None]

    def _angle(va, vb):
        cos = np.clip(np.einsum("rd,rd->r", va, vb), -1.0, 1.0)
        return np.arccos(cos)

    a1 = np.where(degenerate, 0.0, _angle(nc, u))
    a2 = np.where(degenerate, 0.0, _angle(ni, u))
    a3 = np.where(degenerate, 0.0, _angle(nc, ni))

    rows = np.empty((indices.shape[0], 10), dtype=np.float64)
    rows[:, 0:3] = xc
    rows[:, 3:6] = dx
    rows[:, 6] = a1
    rows[:, 7] = a2
    rows[:, 8] = a3
    rows[:, 9] = dist
    return rows
