"""Hybrid per-point features and the annealing-parameter network.

Each point's descriptor is pooled from the 10-D raw rows
[x_c, dx_ci, ppf(x_c, x_i)] of its radius neighborhood: a shared dense
stack over rows, a columnwise max over the neighborhood, then a second
dense stack and l2 normalization. The annealing-parameter network takes
both clouds as a (J+K, 4) matrix (coordinates plus an origin flag) and
maps a global max-pool through a dense head with a softplus output so
alpha and beta stay positive.

Raw rows are plain arrays (they carry no gradient: the networks are
differentiated w.r.t. their parameters only); everything from the first
dense layer on lives on the nncore tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import kernels
from .geom import PointCloud
from .nncore import (
    ParamBundle,
    Tensor,
    dense,
    group_norm,
    he_weights,
    l2_normalize,
    max_pool,
    relu,
    reshape,
    segment_max,
    softplus,
)

# raw input channel layout produced by kernels.ppf_rows
_XC = slice(0, 3)
_DX = slice(3, 6)
_PPF = slice(6, 10)


@dataclass(frozen=True)
class NeighborhoodSet:
    """Radius neighborhoods in CSR form: indices[starts[c]:starts[c+1]]."""

    indices: np.ndarray
    starts: np.ndarray
    tau_rad: float

    def neighbors_of(self, center: int) -> np.ndarray:
        return self.indices[self.starts[center]: self.starts[center + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.starts)

    def __len__(self) -> int:
        return self.starts.shape[0] - 1


@dataclass(frozen=True)
class FeatureConfig:
    """Architecture of the hybrid feature extractor."""

    pre_pool: tuple[int, ...] = (64, 64, 128)
    post_pool: tuple[int, ...] = (128, 96)
    tau_rad: float = 0.3
    max_neighbors: int = 64
    use_xc: bool = True
    use_dx: bool = True
    use_ppf: bool = True
    gn_max_groups: int = 4

    @property
    def input_dim(self) -> int:
        return 3 * self.use_xc + 3 * self.use_dx + 4 * self.use_ppf

    @property
    def feature_dim(self) -> int:
        return self.post_pool[-1]

    def active_columns(self) -> np.ndarray:
        cols: list[int] = []
        if self.use_xc:
            cols.extend(range(_XC.start, _XC.stop))
        if self.use_dx:
            cols.extend(range(_DX.start, _DX.stop))
        if self.use_ppf:
            cols.extend(range(_PPF.start, _PPF.stop))
        if not cols:
            raise ValueError("at least one input channel must be enabled")
        return np.array(cols, dtype=np.int64)


@dataclass(frozen=True)
class ParamNetConfig:
    """Architecture of the annealing-parameter predictor (output is 2)."""

    pre_pool: tuple[int, ...] = (32, 64)
    head: tuple[int, ...] = (32, 2)

    def __post_init__(self):
        if self.head[-1] != 2:
            raise ValueError("parameter head must end with 2 outputs")


@dataclass(frozen=True)
class ModelConfig:
    """Everything that determines parameter shapes and the forward pass."""

    feature: FeatureConfig = field(default_factory=FeatureConfig)
    param_net: ParamNetConfig = field(default_factory=ParamNetConfig)
    use_learned_anneal: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        feat = dict(doc.get("feature", {}))
        for key in ("pre_pool", "post_pool"):
            if key in feat:
                feat[key] = tuple(feat[key])
        pnet = dict(doc.get("param_net", {}))
        for key in ("pre_pool", "head"):
            if key in pnet:
                pnet[key] = tuple(pnet[key])
        return cls(feature=FeatureConfig(**feat),
                   param_net=ParamNetConfig(**pnet),
                   use_learned_anneal=bool(doc.get("use_learned_anneal", True)))


def gn_groups(channels: int, max_groups: int = 4) -> int:
    g = min(max_groups, channels)
    return g if channels % g == 0 else 1


ANNEAL_INIT_ALPHA = 0.5
ANNEAL_INIT_BETA = 5.0


def _inv_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


# -- neighborhoods and raw inputs ---------------------------------------------


def radius_neighbors(
    cloud: PointCloud,
    tau_rad: float,
    max_neighbors: int = 64,
    rng_seed: int = 0,
) -> NeighborhoodSet:
    """All points within tau_rad of each center, capped at max_neighbors.

    A point always neighbors itself. Oversized neighborhoods are
    subsampled uniformly with the seeded generator; the center is always
    retained and lists stay sorted by index.
    """
    if tau_rad <= 0.0:
        raise ValueError("tau_rad must be positive")
    if max_neighbors < 1:
        raise ValueError("max_neighbors must be >= 1")
    pts = np.ascontiguousarray(cloud.points)
    indices, starts = kernels.radius_pairs(pts, float(tau_rad))
    counts = np.diff(starts)
    if counts.max() <= max_neighbors:
        return NeighborhoodSet(indices=indices, starts=starts, tau_rad=tau_rad)

    rng = np.random.default_rng(rng_seed)
    out_lists: list[np.ndarray] = []
    for c in range(len(cloud)):
        nbrs = indices[starts[c]: starts[c + 1]]
        if nbrs.shape[0] > max_neighbors:
            others = nbrs[nbrs != c]
            keep = rng.choice(others, size=max_neighbors - 1, replace=False)
            nbrs = np.sort(np.concatenate(([c], keep)))
        out_lists.append(nbrs)
    new_counts = np.array([len(v) for v in out_lists], dtype=np.int64)
    new_starts = np.zeros(len(cloud) + 1, dtype=np.int64)
    np.cumsum(new_counts, out=new_starts[1:])
    return NeighborhoodSet(indices=np.concatenate(out_lists),
                           starts=new_starts, tau_rad=tau_rad)


def ppf(x_c, n_c, x_i, n_i) -> np.ndarray:
    """Point-pair feature between two oriented points.

    (angle(n_c, dx), angle(n_i, dx), angle(n_c, n_i), |dx|), angles in
    [0, pi] via arccos of the clamped cosine. Coincident points use the
    degenerate all-zero convention.
    """
    x_c = np.asarray(x_c, dtype=np.float64)
    x_i = np.asarray(x_i, dtype=np.float64)
    dx = x_i - x_c
    dist = float(np.linalg.norm(dx))
    if dist == 0.0:
        return np.zeros(4)
    u = dx / dist

    def angle(a, b):
        return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))

    return np.array([angle(n_c, u), angle(n_i, u), angle(n_c, n_i), dist])


def assemble_inputs(cloud: PointCloud, nbrs: NeighborhoodSet) -> np.ndarray:
    """The (R, 10) raw rows [x_c, dx, ppf] for every (center, neighbor) pair."""
    return kernels.ppf_rows(
        np.ascontiguousarray(cloud.points),
        np.ascontiguousarray(cloud.normals),
        nbrs.indices,
        nbrs.starts,
    )


# -- parameter construction ----------------------------------------------------


def init_model_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamBundle:
    """Seeded parameter bundle matching ``cfg`` (He init, zero biases)."""
    tensors: dict[str, np.ndarray] = {}

    def stack(prefix: str, dims: list[int], final_plain: bool):
        for i in range(len(dims) - 1):
            fan_in, fan_out = dims[i], dims[i + 1]
            tensors[f"{prefix}.{i}.w"] = he_weights(rng, fan_in, fan_out)
            tensors[f"{prefix}.{i}.b"] = np.zeros(fan_out)
            last = i == len(dims) - 2
            if not (final_plain and last):
                tensors[f"{prefix}.{i}.gain"] = np.ones(fan_out)
                tensors[f"{prefix}.{i}.shift"] = np.zeros(fan_out)

    feat = cfg.feature
    stack("feat.pre", [feat.input_dim, *feat.pre_pool], final_plain=False)
    stack("feat.post", [feat.pre_pool[-1], *feat.post_pool], final_plain=True)

    # Annealing starts at alpha 0.5, beta 5: unit-norm feature distances lie
    # in [0, 4], and a collapsed beta kills the feature gradients (the
    # match matrix goes uniform), so beta must start in the informative
    # regime for training to take off.
    if cfg.use_learned_anneal:
        pnet = cfg.param_net
        stack("pnet.pre", [4, *pnet.pre_pool], final_plain=False)
        stack("pnet.head", [pnet.pre_pool[-1], *pnet.head], final_plain=True)
        head_bias = f"pnet.head.{len(pnet.head) - 1}.b"
        tensors[head_bias] = np.array([_inv_softplus(ANNEAL_INIT_ALPHA),
                                       _inv_softplus(ANNEAL_INIT_BETA)])
    else:
        tensors["anneal.raw_alpha"] = np.array(_inv_softplus(ANNEAL_INIT_ALPHA))
        tensors["anneal.raw_beta"] = np.array(_inv_softplus(ANNEAL_INIT_BETA))

    return ParamBundle({n: Tensor(v, requires_grad=True)
                        for n, v in tensors.items()})


def _run_stack(
    x: Tensor,
    params: ParamBundle,
    prefix: str,
    n_layers: int,
    final_plain: bool,
    gn_max_groups: int,
) -> Tensor:
    h = x
    for i in range(n_layers):
        h = dense(h, params[f"{prefix}.{i}.w"], params[f"{prefix}.{i}.b"])
        if final_plain and i == n_layers - 1:
            break
        channels = h.data.shape[-1]
        h = group_norm(h, gn_groups(channels, gn_max_groups),
                       params[f"{prefix}.{i}.gain"], params[f"{prefix}.{i}.shift"])
        h = relu(h)
    return h


# -- forward passes --------------------------------------------------------------


def extract_hybrid_features(
    cloud: PointCloud,
    params: ParamBundle,
    cfg: FeatureConfig,
    rng_seed: int = 0,
    gn_max_groups: int | None = None,
) -> Tensor:
    """Unit-norm (N, D) hybrid features, differentiable w.r.t. ``params``."""
    expected = "feat.pre.0.w"
    if expected not in params:
        raise ValueError("parameter bundle lacks feature-network tensors")
    if params[expected].data.shape[0] != cfg.input_dim:
        raise ValueError(
            f"feature net expects input dim {params[expected].data.shape[0]}, "
            f"config provides {cfg.input_dim}")
    groups = cfg.gn_max_groups if gn_max_groups is None else gn_max_groups

    nbrs = radius_neighbors(cloud, cfg.tau_rad, cfg.max_neighbors, rng_seed)
    rows = assemble_inputs(cloud, nbrs)[:, cfg.active_columns()]

    h = _run_stack(Tensor(rows), params, "feat.pre",
                   len(cfg.pre_pool), final_plain=False, gn_max_groups=groups)
    pooled = segment_max(h, nbrs.starts)
    out = _run_stack(pooled, params, "feat.post",
                     len(cfg.post_pool), final_plain=True, gn_max_groups=groups)
    return l2_normalize(out)


def predict_anneal_params(
    x_pts: np.ndarray,
    y_pts: np.ndarray,
    params: ParamBundle,
    cfg: ModelConfig,
) -> tuple[Tensor, Tensor]:
    """Predict (alpha, beta) from the current cloud pair; both positive.

    With learned annealing the inputs are the stacked coordinates with a
    0/1 origin-flag column; otherwise the two standalone raw parameters
    are passed through softplus.
    """
    if not cfg.use_learned_anneal:
        alpha = softplus(params["anneal.raw_alpha"])
        beta = softplus(params["anneal.raw_beta"])
        return alpha, beta

    x_pts = np.asarray(x_pts, dtype=np.float64)
    y_pts = np.asarray(y_pts, dtype=np.float64)
    j, k = x_pts.shape[0], y_pts.shape[0]
    inp = np.zeros((j + k, 4))
    inp[:j, :3] = x_pts
    inp[j:, :3] = y_pts
    inp[j:, 3] = 1.0

    pnet = cfg.param_net
    h = _run_stack(Tensor(inp), params, "pnet.pre", len(pnet.pre_pool),
                   final_plain=False, gn_max_groups=cfg.feature.gn_max_groups)
    pooled, _ = max_pool(h)
    h = _run_stack(reshape(pooled, (1, pooled.data.shape[0])), params,
                   "pnet.head", len(pnet.head), final_plain=True,
                   gn_max_groups=cfg.feature.gn_max_groups)
    out = softplus(h)
    return out[0, 0], out[0, 1]
