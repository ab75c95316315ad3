"""Soft assignment and rigid-transform estimation.

The two alternating halves of soft-correspondence registration:

* building a positive score matrix from spatial or feature distances,
  normalizing it with slack-augmented Sinkhorn passes, and reading off
  weighted correspondences;
* solving the weighted least-squares rigid transform by SVD, with an
  analytic backward pass so the whole chain is differentiable.

Everything runs on the nncore tape, so the same code serves the classical
(no-grad) baselines and the trained pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geom import RigidTransform, PointCloud
from .nncore import Tensor, as_tensor, make_op
from .nncore import tensor as tt

EPS_WEIGHT = 1e-12
EPS_SVD = 1e-8


class MatchError(RuntimeError):
    pass


class NoInliersError(MatchError):
    pass


class RankDeficientError(MatchError):
    pass


@dataclass(frozen=True)
class AnnealParams:
    """Outlier threshold (alpha) and assignment hardness (beta)."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha >= 0.0):
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not (np.isfinite(self.beta) and self.beta > 0.0):
            raise ValueError(f"beta must be > 0, got {self.beta}")


@dataclass
class MatchMatrix:
    """Soft assignment with slack: the full (J+1, K+1) nonnegative matrix.

    The trailing row/column are the slack entries that let points match
    nothing; the corner is bookkeeping only. In the square no-slack
    testing mode the matrix is just (J, K) and the slack accessors raise.
    """

    full: Tensor
    n_rows: int
    n_cols: int
    has_slack: bool = True

    def _need_slack(self):
        if not self.has_slack:
            raise MatchError("this match matrix was built without slack")

    @property
    def values(self) -> np.ndarray:
        return self.full.data[: self.n_rows, : self.n_cols]

    @property
    def slack_row(self) -> np.ndarray:
        self._need_slack()
        return self.full.data[self.n_rows, : self.n_cols]

    @property
    def slack_col(self) -> np.ndarray:
        self._need_slack()
        return self.full.data[: self.n_rows, self.n_cols]

    @property
    def slack_corner(self) -> float:
        self._need_slack()
        return float(self.full.data[self.n_rows, self.n_cols])

    def row_sums(self) -> np.ndarray:
        """Real-row sums over all K+1 entries (slack column included)."""
        return self.full.data[: self.n_rows].sum(axis=1)

    def col_sums(self) -> np.ndarray:
        """Real-column sums over all J+1 entries (slack row included)."""
        return self.full.data[:, : self.n_cols].sum(axis=0)

    def real_mass(self) -> float:
        return float(self.values.sum())


@dataclass
class Correspondences:
    """Per-source-point weighted targets: y_hat rows and weights."""

    targets: Tensor  # (J, 3)
    weights: Tensor  # (J,)
    active: np.ndarray  # bool (J,): weight above floor

    @property
    def n_active(self) -> int:
        return int(self.active.sum())


# -- match initialization -----------------------------------------------------


def match_log_scores(sqdist, alpha, beta) -> Tensor:
    """Log-space scores -beta * (d^2 - alpha); inputs may be tensors."""
    sqdist, alpha, beta = as_tensor(sqdist), as_tensor(alpha), as_tensor(beta)
    return tt.mul(beta, tt.sub(alpha, sqdist))


def init_match_spatial(x_pts, y_pts, params: AnnealParams) -> Tensor:
    """exp(-beta (|x_j - y_k|^2 - alpha)), strictly positive (J, K)."""
    d2 = _spatial_sqdist(x_pts, y_pts)
    return tt.tensor_exp(match_log_scores(d2, params.alpha, params.beta))


def init_match_feature(f_x, f_y, params: AnnealParams) -> Tensor:
    """exp(-beta (|F_xj - F_yk|^2 - alpha)) from feature rows."""
    from .nncore import pairwise_sqdist

    d2 = pairwise_sqdist(as_tensor(f_x), as_tensor(f_y))
    return tt.tensor_exp(match_log_scores(d2, params.alpha, params.beta))


def _spatial_sqdist(x_pts, y_pts) -> Tensor:
    from .nncore import pairwise_sqdist

    x = x_pts.points if isinstance(x_pts, PointCloud) else x_pts
    y = y_pts.points if isinstance(y_pts, PointCloud) else y_pts
    return pairwise_sqdist(as_tensor(x), as_tensor(y))


# -- Sinkhorn ------------------------------------------------------------------


def sinkhorn_core(log_scores: Tensor, n_iters: int, slack: bool = True) -> MatchMatrix:
    """Normalize log-space scores; the hot path shared by all callers.

    With slack (the default), the matrix is augmented with a row and
    column of ones (zeros in log space); each pass normalizes real rows
    over K+1 entries then real columns over J+1 entries. Without slack
    (square testing mode), plain alternating row/column normalization.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    log_scores = as_tensor(log_scores)
    j, k = log_scores.data.shape
    padded = tt.pad_slack(log_scores) if slack else log_scores

    src = np.ascontiguousarray(padded.data)
    if tt.grad_enabled() and padded.requires_grad:
        out_log, saved = kernels.sinkhorn_log_fwd(src, j, k, n_iters)

        def vjp(g):
            return (kernels.sinkhorn_log_vjp(saved, j, k,
                                             np.ascontiguousarray(g)),)

        log_out = make_op(out_log, (padded,), vjp)
    else:
        log_out = Tensor(kernels.sinkhorn_log_nograd(src, j, k, n_iters))

    return MatchMatrix(full=tt.tensor_exp(log_out), n_rows=j, n_cols=k,
                       has_slack=slack)


def sinkhorn(raw, n_iters: int, slack: bool = True) -> MatchMatrix:
    """Sinkhorn normalization of a strictly positive matrix.

    Works in log space internally; ``slack=False`` is the square testing
    hook (no augmentation, both constraint sets normalized directly).
    """
    raw = as_tensor(raw)
    if raw.data.ndim != 2:
        raise ValueError("sinkhorn expects a 2-d matrix")
    if not np.all(raw.data > 0.0):
        raise ValueError("sinkhorn requires strictly positive entries")
    return sinkhorn_core(tt.tensor_log(raw), n_iters, slack=slack)


# -- correspondence extraction --------------------------------------------------


def extract_correspondences(match: MatchMatrix, y_pts) -> Correspondences:
    """Weighted target coordinates y_hat_j and weights w_j from the real block.

    Rows whose total real mass is at or below the weight floor get zero
    weight and a zero target; they are inert downstream. Raises
    NoInliersError when every row is below the floor.
    """
    y = y_pts.points if isinstance(y_pts, PointCloud) else np.asarray(y_pts, float)
    j, k = match.n_rows, match.n_cols
    if y.shape != (k, 3):
        raise ValueError(f"expected ({k}, 3) reference points, got {y.shape}")

    real = tt.getitem(match.full, (slice(0, j), slice(0, k)))
    weights = tt.tensor_sum(real, axis=1)
    active = weights.data > EPS_WEIGHT
    if not active.any():
        raise NoInliersError("no correspondences above the weight floor")

    mass = tt.matmul(real, tt.constant(y))  # (J, 3)
    denom = tt.add(tt.mul(weights, tt.constant(active.astype(np.float64))),
                   tt.constant(1.0 - active.astype(np.float64)))
    targets = tt.mul(tt.div(mass, tt.reshape(denom, (j, 1))),
                     tt.constant(active.astype(np.float64)[:, None]))
    weights = tt.mul(weights, tt.constant(active.astype(np.float64)))
    return Correspondences(targets=targets, weights=weights, active=active)


# -- weighted Procrustes ---------------------------------------------------------


def rotation_from_covariance(h) -> Tensor:
    """Optimal rotation from the weighted cross-covariance via SVD.

    Forward: H = U S V^T, R = V diag(1, 1, det(VU^T)) U^T (the determinant
    correction excludes reflections). Backward: the SVD differential with
    each inverse singular-value gap 1/(s_b^2 - s_a^2) replaced by its
    Tikhonov-regularized form g/(g^2 + eps^2). Raises RankDeficientError
    when the second singular value vanishes (the rotation is then not
    determined by the data).
    """
    h = as_tensor(h)
    if h.data.shape != (3, 3):
        raise ValueError("covariance must be 3x3")
    u, s, vt = np.linalg.svd(h.data)
    if s[1] < 1e-12:
        raise RankDeficientError("rank-deficient correspondences")
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    diag = np.array([1.0, 1.0, d])
    r = (v * diag) @ u.T

    def vjp(g):
        g_tilde = v.T @ g @ u
        a = diag[:, None] * g_tilde  # D @ G~
        b = g_tilde * diag[None, :]  # G~ @ D
        s2 = s * s
        gap = s2[None, :] - s2[:, None]  # gap[a, b] = s_b^2 - s_a^2
        f = gap / (gap * gap + EPS_SVD * EPS_SVD)
        c = ((b - b.T) * s[:, None] - (a - a.T) * s[None, :]) * f
        np.fill_diagonal(c, 0.0)
        return (u @ c @ v.T,)

    return make_op(r, (h,), vjp)


def weighted_procrustes_t(x_pts, targets, weights) -> tuple[Tensor, Tensor]:
    """Tape version: returns (rotation, translation) tensors.

    Minimizes sum_j w_j |R x_j + t - y_hat_j|^2 over SE(3). Zero-weight
    rows are inert; at least 3 positive weights over a non-degenerate
    configuration are required.
    """
    x = as_tensor(x_pts)
    targets = as_tensor(targets)
    weights = as_tensor(weights)
    j = x.data.shape[0]
    if targets.data.shape != (j, 3):
        raise ValueError("targets must match the source point count")
    n_active = int((weights.data > EPS_WEIGHT).sum())
    if n_active < 3:
        raise RankDeficientError(
            f"need at least 3 weighted correspondences, have {n_active}")

    w_col = tt.reshape(weights, (j, 1))
    total = tt.tensor_sum(weights)
    x_cent = tt.div(tt.tensor_sum(tt.mul(w_col, x), axis=0), total)
    y_cent = tt.div(tt.tensor_sum(tt.mul(w_col, targets), axis=0), total)
    x_c = tt.sub(x, tt.reshape(x_cent, (1, 3)))
    y_c = tt.sub(targets, tt.reshape(y_cent, (1, 3)))
    cov = tt.matmul(tt.transpose(x_c), tt.mul(w_col, y_c))
    rot = rotation_from_covariance(cov)
    trans = tt.sub(y_cent, tt.matmul(rot, x_cent))
    return rot, trans


def weighted_procrustes(x_pts: np.ndarray, corr: Correspondences) -> RigidTransform:
    """Weighted least-squares rigid transform x_j -> y_hat_j."""
    rot, trans = weighted_procrustes_t(x_pts, corr.targets, corr.weights)
    return RigidTransform(rot.data, trans.data)


def procrustes_backward(
    x_pts,
    targets,
    weights,
    grad_rotation: np.ndarray,
    grad_translation: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vector-Jacobian product of the weighted Procrustes solve.

    Contracts the upstream (rotation, translation) gradients against the
    solve's Jacobian, returning gradients w.r.t. the source points, the
    targets and the weights.
    """
    x = Tensor(np.asarray(x_pts, dtype=np.float64), requires_grad=True)
    t = Tensor(np.asarray(targets, dtype=np.float64), requires_grad=True)
    w = Tensor(np.asarray(weights, dtype=np.float64), requires_grad=True)
    rot, trans = weighted_procrustes_t(x, t, w)
    scalar = tt.add(tt.tensor_sum(tt.mul(rot, tt.constant(grad_rotation))),
                    tt.tensor_sum(tt.mul(trans, tt.constant(grad_translation))))
    scalar.backward()
    zero = np.zeros_like
    return (x.grad if x.grad is not None else zero(x.data),
            t.grad if t.grad is not None else zero(t.data),
            w.grad if w.grad is not None else zero(w.data))
