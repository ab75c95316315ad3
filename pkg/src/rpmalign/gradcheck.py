"""Gradient-check suites: every layer, the Procrustes solve, the full loss.

Each suite builds seeded random instances positioned away from
non-smooth points (relu kinks, pooling ties), runs the analytic backward
pass and compares against central finite differences. Suites return one
GradCheckReport per (seed, target) and are shared by the ``gradcheck``
CLI command and the acceptance tests.
"""

from __future__ import annotations

import numpy as np

from .data import PairConfig, gen_primitive, make_pair
from .features import FeatureConfig, ModelConfig, ParamNetConfig, init_model_params
from .match import sinkhorn_core, weighted_procrustes_t
from .nncore import (
    GradCheckReport,
    ParamBundle,
    Tensor,
    dense,
    grad_check,
    group_norm,
    l2_normalize,
    max_pool,
    pairwise_sqdist,
    relu,
    softplus,
)
from .nncore import tensor as tt
from .pipeline import TrainConfig, training_loss

TOL = 1e-4


def tiny_model_config() -> ModelConfig:
    """A few hundred parameters; enough to exercise every code path."""
    return ModelConfig(
        feature=FeatureConfig(pre_pool=(8, 8), post_pool=(8,), tau_rad=1.5,
                              max_neighbors=8),
        param_net=ParamNetConfig(pre_pool=(8,), head=(8, 2)),
    )


def _bundle(**arrays) -> ParamBundle:
    return ParamBundle({k: Tensor(v, requires_grad=True)
                        for k, v in arrays.items()})


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05):
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


def layer_checks(n_seeds: int = 50, max_dims: int | None = None
                 ) -> dict[str, list[GradCheckReport]]:
    """Finite-difference checks for each nncore layer."""
    reports: dict[str, list[GradCheckReport]] = {}

    def run(name, make_fn_params):
        out = []
        for seed in range(n_seeds):
            rng = np.random.default_rng(1000 + seed)
            fn, params = make_fn_params(rng)
            out.append(grad_check(fn, params, max_dims_per_param=max_dims,
                                  rng=np.random.default_rng(seed)))
        reports[name] = out

    def mk_dense(rng):
        c = rng.normal(size=(4, 2))
        params = _bundle(x=rng.normal(size=(4, 3)),
                         w=rng.normal(size=(3, 2)), b=rng.normal(size=2))
        return (lambda p: tt.tensor_sum(
            tt.mul(dense(p["x"], p["w"], p["b"]), tt.constant(c)))), params

    def mk_relu(rng):
        c = rng.normal(size=(5, 4))
        params = _bundle(x=_away_from_zero(rng, (5, 4)))
        return (lambda p: tt.tensor_sum(tt.mul(relu(p["x"]), tt.constant(c)))), params

    def mk_softplus(rng):
        c = rng.normal(size=(5, 4))
        params = _bundle(x=rng.normal(size=(5, 4)) * 3.0)
        return (lambda p: tt.tensor_sum(
            tt.mul(softplus(p["x"]), tt.constant(c)))), params

    def mk_group_norm(rng):
        c = rng.normal(size=(4, 8))
        params = _bundle(x=rng.normal(size=(4, 8)),
                         gain=rng.uniform(0.5, 1.5, size=8),
                         shift=rng.normal(size=8))
        return (lambda p: tt.tensor_sum(
            tt.mul(group_norm(p["x"], 4, p["gain"], p["shift"]),
                   tt.constant(c)))), params

    def mk_max_pool(rng):
        c = rng.normal(size=6)
        params = _bundle(x=rng.normal(size=(5, 6)))

        def fn(p):
            pooled, _ = max_pool(p["x"])
            return tt.tensor_sum(tt.mul(pooled, tt.constant(c)))

        return fn, params

    def mk_l2(rng):
        c = rng.normal(size=(4, 5))
        params = _bundle(x=_away_from_zero(rng, (4, 5), margin=0.2))
        return (lambda p: tt.tensor_sum(
            tt.mul(l2_normalize(p["x"]), tt.constant(c)))), params

    def mk_pairwise(rng):
        c = rng.normal(size=(4, 6))
        params = _bundle(a=rng.normal(size=(4, 3)), b=rng.normal(size=(6, 3)))
        return (lambda p: tt.tensor_sum(
            tt.mul(pairwise_sqdist(p["a"], p["b"]), tt.constant(c)))), params

    def mk_sinkhorn(rng):
        c = rng.normal(size=(6, 5))
        params = _bundle(scores=rng.normal(size=(5, 4)))
        return (lambda p: tt.tensor_sum(
            tt.mul(sinkhorn_core(p["scores"], 5).full, tt.constant(c)))), params

    run("dense", mk_dense)
    run("relu", mk_relu)
    run("softplus", mk_softplus)
    run("group_norm", mk_group_norm)
    run("max_pool", mk_max_pool)
    run("l2_normalize", mk_l2)
    run("pairwise_sqdist", mk_pairwise)
    run("sinkhorn", mk_sinkhorn)
    return reports


def procrustes_checks(n_seeds: int = 50, n_points: int = 6
                      ) -> list[GradCheckReport]:
    """Finite-difference checks of the weighted Procrustes solve."""
    reports = []
    for seed in range(n_seeds):
        rng = np.random.default_rng(2000 + seed)
        g_rot = rng.normal(size=(3, 3))
        g_trans = rng.normal(size=3)
        params = _bundle(x=rng.normal(size=(n_points, 3)),
                         targets=rng.normal(size=(n_points, 3)),
                         weights=rng.uniform(0.3, 1.0, size=n_points))

        def fn(p):
            rot, trans = weighted_procrustes_t(p["x"], p["targets"], p["weights"])
            return tt.add(tt.tensor_sum(tt.mul(rot, tt.constant(g_rot))),
                          tt.tensor_sum(tt.mul(trans, tt.constant(g_trans))))

        reports.append(grad_check(fn, params))
    return reports


def full_pipeline_checks(n_seeds: int = 50, n_points: int = 8,
                         max_dims: int = 4) -> list[GradCheckReport]:
    """Finite-difference checks of the whole registration loss.

    Runs a tiny architecture on 8-point clouds; coordinates are
    subsampled per tensor (seeded) to keep the finite differencing
    tractable while covering every parameter tensor.
    """
    cfg = TrainConfig(model=tiny_model_config(), epochs=1)
    reports = []
    for seed in range(n_seeds):
        rng = np.random.default_rng(3000 + seed)
        model = gen_primitive("two_lobe", 32, rng)
        pair = make_pair(model, PairConfig(mode="clean", n_points=n_points),
                         seed=int(rng.integers(1 << 31)))
        params = init_model_params(cfg.model, rng)

        def fn(p):
            loss, _, _ = training_loss(pair.source, pair.reference, pair.gt,
                                       p, cfg)
            return loss

        reports.append(grad_check(fn, params, max_dims_per_param=max_dims,
                                  rng=np.random.default_rng(seed)))
    return reports


def run_scope(scope: str, n_seeds: int) -> tuple[bool, list[str]]:
    """Run one gradcheck scope; returns (all_passed, report lines)."""
    lines: list[str] = []
    ok = True

    def absorb(name: str, reports: list[GradCheckReport]):
        nonlocal ok
        worst = max(r.max_rel_err for r in reports)
        passed = worst <= TOL
        ok = ok and passed
        lines.append(f"{name}: max rel err {worst:.3e} over {len(reports)} seeds "
                     f"-> {'PASS' if passed else 'FAIL'}")

    if scope in ("layers", "all"):
        for name, reps in layer_checks(n_seeds).items():
            absorb(f"layer {name}", reps)
    if scope in ("procrustes", "all"):
        absorb("procrustes", procrustes_checks(n_seeds))
    if scope in ("full", "all"):
        absorb("full pipeline", full_pipeline_checks(n_seeds))
    return ok, lines
