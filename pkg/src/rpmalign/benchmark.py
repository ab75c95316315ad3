"""Benchmark the numba kernels against the pure-numpy fallbacks.

Run with ``python -m rpmalign.benchmark``. Times each hot kernel on
pipeline-shaped inputs under both backends and reports the speedup, plus
an end-to-end training-step comparison. The active backend for normal
use is selected by ``RPM_ALIGN_NUMBA`` (see ``rpmalign.kernels``).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from .kernels import _numba, _numpy


def _time(fn, *args, repeats: int = 5) -> float:
    fn(*args)  # warmup (includes jit compilation for the numba backend)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(n_points: int, feat_dim: int, rng: np.random.Generator):
    pts = rng.normal(size=(n_points, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    nrm = pts.copy()
    feats = rng.normal(size=(n_points, feat_dim))
    grad = rng.normal(size=(n_points, n_points))
    log_m = rng.normal(size=(n_points + 1, n_points + 1))
    indices, starts = _numpy.radius_pairs(pts, 0.5)
    rows = rng.normal(size=(indices.shape[0], 64))
    _, saved = _numpy.sinkhorn_log_fwd(log_m, n_points, n_points, 5)
    gfull = rng.normal(size=log_m.shape)

    return [
        ("pairwise_sqdist", (feats, feats)),
        ("pairwise_sqdist_vjp", (feats, feats, grad)),
        ("sinkhorn_log_nograd", (log_m, n_points, n_points, 5)),
        ("sinkhorn_log_fwd", (log_m, n_points, n_points, 5)),
        ("sinkhorn_log_vjp", (saved, n_points, n_points, gfull)),
        ("segment_max", (rows, starts)),
        ("radius_pairs", (pts, 0.5)),
        ("ppf_rows", (pts, nrm, indices, starts)),
    ]


def run(n_points: int, feat_dim: int, repeats: int) -> None:
    rng = np.random.default_rng(0)
    cases = kernel_cases(n_points, feat_dim, rng)
    width = max(len(name) for name, _ in cases)
    print(f"kernel benchmark: {n_points} points, {feat_dim}-d features, "
          f"best of {repeats}")
    print(f"{'kernel':<{width}}  {'numpy':>10}  {'numba':>10}  {'speedup':>8}")
    for name, args in cases:
        t_np = _time(getattr(_numpy, name), *args, repeats=repeats)
        t_nb = _time(getattr(_numba, name), *args, repeats=repeats)
        print(f"{name:<{width}}  {t_np * 1e3:>8.3f}ms  {t_nb * 1e3:>8.3f}ms  "
              f"{t_np / t_nb:>7.1f}x")


def run_training_step(repeats: int) -> None:
    """End-to-end loss+backward timing under the active backend."""
    from .data import DatasetConfig, build_pair
    from .features import init_model_params
    from .pipeline import TrainConfig, training_loss
    from . import kernels

    cfg = TrainConfig()
    pair = build_pair(DatasetConfig(n_pairs=1, master_seed=7), 0)
    params = init_model_params(cfg.model, np.random.default_rng(0))

    def step():
        params.zero_grad()
        loss, _, _ = training_loss(pair.source, pair.reference, pair.gt,
                                   params, cfg)
        loss.backward()

    t = _time(step, repeats=repeats)
    print(f"training step ({kernels.BACKEND} backend, "
          f"{len(pair.source)}/{len(pair.reference)} points): {t * 1e3:.1f}ms")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--points", type=int, default=256)
    parser.add_argument("--feat-dim", type=int, default=96)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args(argv)
    run(args.points, args.feat_dim, args.repeats)
    run_training_step(args.repeats)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
