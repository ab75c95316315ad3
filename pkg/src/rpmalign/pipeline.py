"""The registration outer loops: learned pipeline, training, ICP and RPM.

The learned pipeline alternates per iteration: transform the source by
the current cumulative estimate, extract hybrid features of both clouds,
predict annealing parameters, build the feature-distance match matrix,
normalize it with slack Sinkhorn passes, extract weighted correspondences
and solve the weighted Procrustes problem. The solve maps the *original*
source points to the targets, so each iteration yields the cumulative
transform directly (algebraically equivalent to composing a delta with
the previous estimate, without drift).

Training stops gradients at the start of each iteration: the incoming
transform is a constant, so a step's loss is a weighted sum of
independent per-iteration losses.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geom import (
    PointCloud,
    RigidTransform,
    apply_transform,
    isotropic_errors,
    modified_chamfer,
    rotation_angle_deg,
)
from .features import (
    ModelConfig,
    extract_hybrid_features,
    init_model_params,
    predict_anneal_params,
)
from .match import (
    AnnealParams,
    MatchError,
    MatchMatrix,
    extract_correspondences,
    match_log_scores,
    sinkhorn_core,
    weighted_procrustes_t,
)
from .nncore import (
    AdamState,
    ParamBundle,
    Tensor,
    adam_step,
    no_grad,
    pairwise_sqdist,
)
from .nncore import tensor as tt


class PipelineError(RuntimeError):
    pass


class NonFiniteLossError(PipelineError):
    """Raised when a training loss goes non-finite; carries a snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class IterationRecord:
    """One outer iteration: cumulative transform, annealing, inlier mass."""

    transform: RigidTransform
    anneal: AnnealParams | None
    inlier_mass: float


@dataclass
class RegistrationResult:
    final_transform: RigidTransform
    per_iteration: list[IterationRecord]
    converged: bool
    iterations_run: int
    match_matrices: list[np.ndarray] | None = None

    def __post_init__(self):
        if len(self.per_iteration) != self.iterations_run:
            raise ValueError("per_iteration length must equal iterations_run")


@dataclass
class LossReport:
    """Weighted loss aggregates plus the per-iteration audit trail."""

    l_reg: float
    l_inlier: float
    l_total: float
    per_iteration_weights: list[float]
    l_reg_per_iter: list[float] = field(default_factory=list)
    l_inlier_per_iter: list[float] = field(default_factory=list)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    lam: float = 0.01
    n_iters_train: int = 2
    n_iters_eval: int = 5
    sinkhorn_iters: int = 5
    epochs: int = 40
    seed: int = 0
    val_pairs_cap: int = 16
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        for name in ("lr", "lam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("n_iters_train", "n_iters_eval", "sinkhorn_iters", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        doc = {
            "lr": self.lr,
            "lam": self.lam,
            "n_iters_train": self.n_iters_train,
            "n_iters_eval": self.n_iters_eval,
            "sinkhorn_iters": self.sinkhorn_iters,
            "epochs": self.epochs,
            "seed": self.seed,
            "val_pairs_cap": self.val_pairs_cap,
            "model": self.model.to_dict(),
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        model = doc.pop("model", None)
        cfg = cls(**doc) if model is None else cls(
            model=ModelConfig.from_dict(model), **doc)
        return cfg


def loss_weights(n_iters: int) -> list[float]:
    """Per-iteration weights (1/2)^(N-i) for 1-indexed iterations."""
    return [0.5 ** (n_iters - i) for i in range(1, n_iters + 1)]


# -- learned pipeline -----------------------------------------------------------


def _one_iteration(
    source: PointCloud,
    reference: PointCloud,
    f_y: Tensor,
    params: ParamBundle,
    cfg: ModelConfig,
    sinkhorn_iters: int,
    current: RigidTransform,
    rng_seed: int,
) -> tuple[Tensor, Tensor, MatchMatrix, Tensor, Tensor]:
    """One alignment iteration starting from the (detached) transform."""
    x_t = apply_transform(source, current)
    f_x = extract_hybrid_features(x_t, params, cfg.feature, rng_seed)
    alpha, beta = predict_anneal_params(x_t.points, reference.points, params, cfg)
    d2 = pairwise_sqdist(f_x, f_y)
    match = sinkhorn_core(match_log_scores(d2, alpha, beta), sinkhorn_iters)
    corr = extract_correspondences(match, reference.points)
    rot, trans = weighted_procrustes_t(source.points, corr.targets, corr.weights)
    return rot, trans, match, alpha, beta


def _iterate(
    source: PointCloud,
    reference: PointCloud,
    params: ParamBundle,
    cfg: ModelConfig,
    n_iters: int,
    sinkhorn_iters: int,
    rng_seed: int,
    initial: RigidTransform | None = None,
) -> list[dict]:
    """Run the outer loop; per-iteration tensors stay on the tape."""
    f_y = extract_hybrid_features(reference, params, cfg.feature, rng_seed)
    current = RigidTransform.identity() if initial is None else initial
    steps: list[dict] = []
    for i in range(1, n_iters + 1):
        try:
            rot, trans, match, alpha, beta = _one_iteration(
                source, reference, f_y, params, cfg,
                sinkhorn_iters, current, rng_seed)
        except MatchError as exc:
            raise PipelineError(f"iteration {i}: {exc}") from exc
        current = RigidTransform(rot.data, trans.data)
        steps.append({
            "rot": rot, "trans": trans, "match": match,
            "alpha": alpha, "beta": beta, "transform": current,
        })
    return steps


def rpmnet_register(
    source: PointCloud,
    reference: PointCloud,
    params: ParamBundle,
    cfg: ModelConfig | None = None,
    n_iters: int = 5,
    sinkhorn_iters: int = 5,
    keep_match: bool = False,
    rng_seed: int = 0,
) -> RegistrationResult:
    """Register source onto reference with the learned pipeline (no grad)."""
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    cfg = cfg if cfg is not None else ModelConfig()
    with no_grad():
        steps = _iterate(source, reference, params, cfg,
                         n_iters, sinkhorn_iters, rng_seed)
    records = [
        IterationRecord(
            transform=s["transform"],
            anneal=AnnealParams(float(s["alpha"].data), float(s["beta"].data)),
            inlier_mass=s["match"].real_mass(),
        )
        for s in steps
    ]
    return RegistrationResult(
        final_transform=records[-1].transform,
        per_iteration=records,
        converged=True,
        iterations_run=n_iters,
        match_matrices=[s["match"].values.copy() for s in steps]
        if keep_match else None,
    )


def training_loss(
    source: PointCloud,
    reference: PointCloud,
    gt: RigidTransform,
    params: ParamBundle,
    cfg: TrainConfig,
    n_iters: int | None = None,
    initial: RigidTransform | None = None,
) -> tuple[Tensor, LossReport, RigidTransform]:
    """Tape loss over ``n_iters`` alignment iterations of one pair.

    Gradients flow within each iteration only (the incoming transform is
    detached), matching the single-iteration training scheme.
    """
    n_iters = cfg.n_iters_train if n_iters is None else n_iters
    steps = _iterate(source, reference, params, cfg.model,
                     n_iters, cfg.sinkhorn_iters, cfg.seed, initial=initial)
    weights = loss_weights(n_iters)
    j, k = len(source), len(reference)
    gt_mapped = tt.constant(gt.apply_points(source.points))
    x_const = tt.constant(source.points)

    total: Tensor | None = None
    reg_vals: list[float] = []
    inl_vals: list[float] = []
    for w, s in zip(weights, steps):
        pred = tt.add(tt.matmul(x_const, tt.transpose(s["rot"])),
                      tt.reshape(s["trans"], (1, 3)))
        l_reg = tt.mul(tt.tensor_sum(tt.tensor_abs(tt.sub(gt_mapped, pred))),
                       1.0 / j)
        real = tt.getitem(s["match"].full, (slice(0, j), slice(0, k)))
        l_inl = tt.mul(tt.tensor_sum(real), -(1.0 / j + 1.0 / k))
        term = tt.mul(tt.add(l_reg, tt.mul(l_inl, cfg.lam)), w)
        total = term if total is None else tt.add(total, term)
        reg_vals.append(float(l_reg.data))
        inl_vals.append(float(l_inl.data))

    report = LossReport(
        l_reg=float(np.dot(weights, reg_vals)),
        l_inlier=float(np.dot(weights, inl_vals)),
        l_total=float(total.data),
        per_iteration_weights=weights,
        l_reg_per_iter=reg_vals,
        l_inlier_per_iter=inl_vals,
    )
    return total, report, steps[-1]["transform"]


def compute_losses(
    result: RegistrationResult,
    match_matrices: list[np.ndarray],
    x_pts: np.ndarray,
    t_gt: RigidTransform,
    cfg: TrainConfig,
) -> LossReport:
    """Loss report for a finished registration (plain numpy, no tape)."""
    n = result.iterations_run
    if len(match_matrices) != n:
        raise ValueError("need one match matrix per iteration")
    x_pts = np.asarray(x_pts, dtype=np.float64)
    j = x_pts.shape[0]
    gt_mapped = t_gt.apply_points(x_pts)
    weights = loss_weights(n)
    reg_vals, inl_vals = [], []
    for rec, m in zip(result.per_iteration, match_matrices):
        pred = rec.transform.apply_points(x_pts)
        reg_vals.append(float(np.abs(gt_mapped - pred).sum() / j))
        k = m.shape[1]
        inl_vals.append(float(-(1.0 / j + 1.0 / k) * m.sum()))
    l_reg = float(np.dot(weights, reg_vals))
    l_inl = float(np.dot(weights, inl_vals))
    return LossReport(
        l_reg=l_reg,
        l_inlier=l_inl,
        l_total=l_reg + cfg.lam * l_inl,
        per_iteration_weights=weights,
        l_reg_per_iter=reg_vals,
        l_inlier_per_iter=inl_vals,
    )


# -- training ---------------------------------------------------------------------


@dataclass
class TrainOutput:
    params: ParamBundle
    adam_state: AdamState
    log: list[dict]
    aborted: bool = False


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def validate(
    pairs,
    params: ParamBundle,
    cfg: TrainConfig,
    n_iters: int | None = None,
) -> dict:
    """Mean isotropic rotation error and modified Chamfer over pairs."""
    n_iters = cfg.n_iters_eval if n_iters is None else n_iters
    rots, chams = [], []
    for pair in pairs:
        result = rpmnet_register(pair.source, pair.reference, params, cfg.model,
                                 n_iters=n_iters,
                                 sinkhorn_iters=cfg.sinkhorn_iters)
        rot, _ = isotropic_errors(pair.gt, result.final_transform)
        cham = modified_chamfer(
            apply_transform(pair.source, result.final_transform),
            pair.reference,
            apply_transform(pair.source_clean, result.final_transform),
            pair.reference_clean,
        )
        rots.append(rot)
        chams.append(cham)
    return {"val_iso_rot_deg": float(np.mean(rots)),
            "val_chamfer": float(np.mean(chams))}


def train(
    dataset,
    cfg: TrainConfig,
    params: ParamBundle | None = None,
    adam_state: AdamState | None = None,
    val_dataset=None,
) -> TrainOutput:
    """Train on registration pairs, one pair per optimizer step.

    Deterministic given cfg.seed: initialization, per-epoch shuffling and
    every forward pass are seeded. Resuming from a checkpointed
    ``adam_state`` at an epoch boundary reproduces the uninterrupted run.
    Raises NonFiniteLossError (with a diagnostic snapshot) if a loss goes
    non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if params is None:
        params = init_model_params(cfg.model, np.random.default_rng(cfg.seed))
    if adam_state is None:
        adam_state = AdamState.fresh(params)
    epochs_done = adam_state.step // len(dataset)

    val_pairs = list(val_dataset) if val_dataset is not None else list(dataset)
    val_pairs = val_pairs[: cfg.val_pairs_cap]

    log: list[dict] = []
    for epoch in range(epochs_done, cfg.epochs):
        t0 = time.perf_counter()
        order = _epoch_order(cfg.seed, epoch, len(dataset))
        reg_vals, inl_vals = [], []
        for idx in order:
            pair = dataset[idx]
            params.zero_grad()
            loss, report, _ = training_loss(
                pair.source, pair.reference, pair.gt, params, cfg)
            if not np.isfinite(loss.data):
                snapshot = {
                    "epoch": epoch,
                    "pair_id": pair.pair_id,
                    "step": adam_state.step,
                    "l_reg_per_iter": report.l_reg_per_iter,
                    "l_inlier_per_iter": report.l_inlier_per_iter,
                }
                raise NonFiniteLossError(
                    f"non-finite loss on pair {pair.pair_id} at epoch {epoch}",
                    snapshot)
            loss.backward()
            params, adam_state = adam_step(params, params.grads(), adam_state,
                                           lr=cfg.lr)
            reg_vals.append(report.l_reg)
            inl_vals.append(report.l_inlier)
        with no_grad():
            val = validate(val_pairs, params, cfg)
        log.append({
            "epoch": epoch,
            "mean_l_reg": float(np.mean(reg_vals)),
            "mean_l_inlier": float(np.mean(inl_vals)),
            "val_iso_rot_deg": val["val_iso_rot_deg"],
            "val_chamfer": val["val_chamfer"],
            "seconds": round(time.perf_counter() - t0, 3),
        })
    return TrainOutput(params=params, adam_state=adam_state, log=log)


# -- classical baselines -------------------------------------------------------------


@dataclass(frozen=True)
class RpmSchedule:
    """Fixed annealing schedule for the classical soft-assign baseline."""

    alpha: float = 0.5
    beta0: float = 1.0
    rate: float = 1.5
    n_outer: int = 20
    sinkhorn_iters: int = 20
    slack: bool = True

    def __post_init__(self):
        if self.beta0 <= 0.0:
            raise ValueError("beta0 must be positive")
        if self.rate <= 1.0:
            raise ValueError("rate must be > 1")
        if self.n_outer < 1:
            raise ValueError("n_outer >= 1 required")


def classical_rpm(
    source: PointCloud,
    reference: PointCloud,
    schedule: RpmSchedule = RpmSchedule(),
) -> RegistrationResult:
    """Soft assignment on spatial distances under a fixed annealing schedule."""
    records: list[IterationRecord] = []
    current = RigidTransform.identity()
    y = reference.points
    with no_grad():
        for i in range(schedule.n_outer):
            beta = schedule.beta0 * schedule.rate ** i
            x_t = current.apply_points(source.points)
            d2 = pairwise_sqdist(tt.constant(x_t), tt.constant(y))
            scores = match_log_scores(d2, schedule.alpha, beta)
            try:
                mm = sinkhorn_core(scores, schedule.sinkhorn_iters,
                                   slack=schedule.slack)
                corr = extract_correspondences(mm, y)
                rot, trans = weighted_procrustes_t(
                    source.points, corr.targets, corr.weights)
            except MatchError as exc:
                raise PipelineError(f"iteration {i + 1}: {exc}") from exc
            current = RigidTransform(rot.data, trans.data)
            records.append(IterationRecord(
                transform=current,
                anneal=AnnealParams(schedule.alpha, beta),
                inlier_mass=mm.real_mass(),
            ))
    return RegistrationResult(
        final_transform=current,
        per_iteration=records,
        converged=True,
        iterations_run=schedule.n_outer,
    )


@dataclass(frozen=True)
class IcpConfig:
    max_iters: int = 100
    tol_deg: float = 1e-5


def icp(
    source: PointCloud,
    reference: PointCloud,
    cfg: IcpConfig = IcpConfig(),
) -> RegistrationResult:
    """Point-to-point ICP with hard nearest-neighbor assignment."""
    tree = cKDTree(reference.points)
    current = RigidTransform.identity()
    records: list[IterationRecord] = []
    converged = False
    with no_grad():
        for _ in range(cfg.max_iters):
            x_t = current.apply_points(source.points)
            _, idx = tree.query(x_t, k=1)
            targets = reference.points[np.asarray(idx).ravel()]
            rot, trans = weighted_procrustes_t(
                source.points, targets, np.ones(len(source)))
            new = RigidTransform(rot.data, trans.data)
            update = rotation_angle_deg(current.rotation.T @ new.rotation)
            current = new
            records.append(IterationRecord(
                transform=current, anneal=None, inlier_mass=float(len(source))))
            if update < cfg.tol_deg:
                converged = True
                break
    return RegistrationResult(
        final_transform=current,
        per_iteration=records,
        converged=converged,
        iterations_run=len(records),
    )
