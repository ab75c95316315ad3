"""Neural-net building blocks on top of the tape: layers and pooling.

Conventions fixed here for reproducibility: relu's subgradient at 0 is 0,
max pooling routes gradient to the first maximum per column, group
normalization uses eps 1e-5, l2 normalization floors the norm at 1e-12.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .. import kernels
from .tensor import Tensor, as_tensor, make_op, matmul, add

GN_EPS = 1e-5
L2_EPS = 1e-12


def dense(x, weights, bias) -> Tensor:
    """Affine map over the trailing axis: x @ W + b, W is (Din, Dout)."""
    x, weights = as_tensor(x), as_tensor(weights)
    if x.data.shape[-1] != weights.data.shape[0]:
        raise ValueError(
            f"dense: input dim {x.data.shape[-1]} != weight rows {weights.data.shape[0]}")
    return add(matmul(x, weights), bias)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0.0
    data = np.where(mask, x.data, 0.0)
    return make_op(data, (x,), lambda g: (g * mask,))


def softplus(x) -> Tensor:
    """ln(1 + e^x), evaluated stably; strictly positive for finite x."""
    x = as_tensor(x)
    data = np.where(x.data > 0.0,
                    x.data + np.log1p(np.exp(-np.abs(x.data))),
                    np.log1p(np.exp(np.minimum(x.data, 0.0))))
    sig = expit(x.data)
    return make_op(data, (x,), lambda g: (g * sig,))


def group_norm(x, num_groups: int, gain, shift) -> Tensor:
    """Per-row standardization over channel groups, then per-channel affine.

    x is (N, C) with C divisible by num_groups; gain/shift are (C,).
    """
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    n, c = x.data.shape
    if c % num_groups != 0:
        raise ValueError(f"group_norm: {c} channels not divisible by {num_groups} groups")
    m = c // num_groups
    grouped = x.data.reshape(n, num_groups, m)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    invstd = 1.0 / np.sqrt(var + GN_EPS)
    xhat = ((grouped - mean) * invstd).reshape(n, c)
    data = xhat * gain.data + shift.data

    def vjp(g):
        dgain = (g * xhat).sum(axis=0)
        dshift = g.sum(axis=0)
        dxhat = (g * gain.data).reshape(n, num_groups, m)
        xh = xhat.reshape(n, num_groups, m)
        s1 = dxhat.sum(axis=2, keepdims=True)
        s2 = (dxhat * xh).sum(axis=2, keepdims=True)
        dx = invstd / m * (m * dxhat - s1 - xh * s2)
        return dx.reshape(n, c), dgain, dshift

    return make_op(data, (x, gain, shift), vjp)


def segment_max(x, starts: np.ndarray) -> Tensor:
    """Columnwise max over contiguous row segments [starts[s], starts[s+1])."""
    x = as_tensor(x)
    starts = np.asarray(starts, dtype=np.int64)
    data, argrow = kernels.segment_max(np.ascontiguousarray(x.data), starts)

    def vjp(g):
        full = np.zeros_like(x.data)
        cols = np.broadcast_to(np.arange(x.data.shape[1]), argrow.shape)
        np.add.at(full, (argrow.ravel(), cols.ravel()), np.asarray(g).ravel())
        return (full,)

    return make_op(data, (x,), vjp)


def max_pool(x) -> tuple[Tensor, np.ndarray]:
    """Columnwise max over all rows of (N, D); also returns argmax rows."""
    x = as_tensor(x)
    starts = np.array([0, x.data.shape[0]], dtype=np.int64)
    data, argrow = kernels.segment_max(np.ascontiguousarray(x.data), starts)

    def vjp(g):
        full = np.zeros_like(x.data)
        full[argrow[0], np.arange(x.data.shape[1])] = np.asarray(g).ravel()
        return (full,)

    out = make_op(data[0], (x,), vjp)
    return out, argrow[0]


def l2_normalize(x) -> Tensor:
    """Normalize each trailing-axis vector; zero vectors stay zero."""
    x = as_tensor(x)
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    safe = np.maximum(norms, L2_EPS)
    data = x.data / safe

    def vjp(g):
        proj = (g * data).sum(axis=-1, keepdims=True)
        return ((g - data * proj * (norms > L2_EPS)) / safe,)

    return make_op(data, (x,), vjp)


def pairwise_sqdist(a, b) -> Tensor:
    """Squared distances between rows of a (J,D) and b (K,D) as a (J,K) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    ad = np.ascontiguousarray(a.data)
    bd = np.ascontiguousarray(b.data)
    data = kernels.pairwise_sqdist(ad, bd)

    def vjp(g):
        ga, gb = kernels.pairwise_sqdist_vjp(ad, bd, np.ascontiguousarray(g))
        return ga, gb

    return make_op(data, (a, b), vjp)
