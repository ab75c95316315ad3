"""Command-line entry points.

Subcommands: ``synth`` (dataset generation), ``register`` (one pair),
``train``, ``eval`` (metrics tables) and ``gradcheck``. Every command
echoes its fully resolved configuration into the output directory so runs
are reproducible; all randomness flows from ``--seed``. Exit codes:
0 success, 1 runtime/numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import geom
from . import pipeline as P
from .features import ModelConfig
from .gradcheck import run_scope
from .nncore import load_checkpoint, save_checkpoint

METHODS = ("icp", "rpm", "rpmnet", "gt")
EVAL_COLUMNS = ("method", "aniso_rot", "aniso_trans", "iso_rot", "iso_trans",
                "chamfer_mod")


class UsageError(ValueError):
    pass


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8", newline="\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError("an output directory (-o/--out) is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _transform_doc(t: geom.RigidTransform) -> dict:
    return {"rotation": t.rotation.reshape(-1).tolist(),
            "translation": t.translation.tolist()}


# -- synth ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    file_cfg = _load_config_file(args.config)
    doc = {
        "n_pairs": args.pairs if args.pairs is not None else file_cfg.get("n_pairs", 64),
        "kinds": (args.kinds.split(",") if args.kinds
                  else file_cfg.get("kinds", ["box", "two_lobe"])),
        "n_model": args.n_model if args.n_model is not None else file_cfg.get("n_model", 512),
        "master_seed": args.seed if args.seed is not None else file_cfg.get("master_seed", 0),
        "pair": dict(file_cfg.get("pair", {})),
    }
    if args.mode is not None:
        doc["pair"]["mode"] = args.mode
    if args.n_points is not None:
        doc["pair"]["n_points"] = args.n_points
    cfg = D.DatasetConfig.from_dict(doc)
    _write_json(out / "resolved_config.json", cfg.to_dict())
    manifest = D.generate_dataset(cfg, out)
    print(f"wrote {len(manifest.pair_paths)} pairs and manifest.json to {out}")
    return 0


# -- register --------------------------------------------------------------------


def _register_one(method: str, pair: D.RegistrationPair,
                  checkpoint: str | None, iters: int | None,
                  seed: int) -> P.RegistrationResult:
    if method == "icp":
        cfg = P.IcpConfig() if iters is None else P.IcpConfig(max_iters=iters)
        return P.icp(pair.source, pair.reference, cfg)
    if method == "rpm":
        sched = P.RpmSchedule() if iters is None else replace(
            P.RpmSchedule(), n_outer=iters)
        return P.classical_rpm(pair.source, pair.reference, sched)
    if method == "rpmnet":
        if checkpoint is None:
            raise UsageError("rpmnet requires --checkpoint")
        params, arch, _ = load_checkpoint(checkpoint)
        cfg = ModelConfig.from_dict(arch)
        return P.rpmnet_register(pair.source, pair.reference, params, cfg,
                                 n_iters=5 if iters is None else iters,
                                 rng_seed=seed)
    if method == "gt":
        rec = P.IterationRecord(transform=pair.gt, anneal=None, inlier_mass=0.0)
        return P.RegistrationResult(final_transform=pair.gt, per_iteration=[rec],
                                    converged=True, iterations_run=1)
    raise UsageError(f"unknown method '{method}' (choose from {METHODS})")


def _result_doc(method: str, pair: D.RegistrationPair,
                result: P.RegistrationResult) -> dict:
    metrics = geom.compute_metrics(pair.gt, result.final_transform,
                                   pair.source, pair.reference,
                                   pair.source_clean, pair.reference_clean)
    per_iter = []
    for rec in result.per_iteration:
        entry = _transform_doc(rec.transform)
        entry["inlier_mass"] = rec.inlier_mass
        if rec.anneal is not None:
            entry["alpha"] = rec.anneal.alpha
            entry["beta"] = rec.anneal.beta
        per_iter.append(entry)
    return {
        "method": method,
        "pair_id": pair.pair_id,
        "converged": result.converged,
        "transform": _transform_doc(result.final_transform),
        "per_iteration": per_iter,
        "metrics": metrics.as_dict(),
    }


def cmd_register(args) -> int:
    out = _out_dir(args)
    if args.method not in METHODS:
        raise UsageError(f"unknown method '{args.method}' (choose from {METHODS})")
    if args.method == "rpmnet" and args.checkpoint is None:
        raise UsageError("rpmnet requires --checkpoint")
    pair = D.load_pair(args.pair)
    _write_json(out / "resolved_config.json", {
        "method": args.method, "pair": str(args.pair),
        "checkpoint": args.checkpoint, "iters": args.iters, "seed": args.seed,
    })
    try:
        result = _register_one(args.method, pair, args.checkpoint, args.iters,
                               args.seed)
    except P.PipelineError as exc:
        _write_json(out / "result.json", {
            "method": args.method, "pair_id": pair.pair_id, "error": str(exc),
        })
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    _write_json(out / "result.json", _result_doc(args.method, pair, result))
    print(f"wrote {out / 'result.json'}")
    return 0


# -- train -----------------------------------------------------------------------


def cmd_train(args) -> int:
    out = _out_dir(args)
    file_cfg = _load_config_file(args.config)
    doc = dict(file_cfg)
    if args.epochs is not None:
        doc["epochs"] = args.epochs
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.lr is not None:
        doc["lr"] = args.lr
    try:
        cfg = P.TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc

    dataset = D.load_dataset(args.manifest)
    if len(dataset) == 0:
        raise UsageError("training manifest lists no pairs")
    val_dataset = D.load_dataset(args.val_manifest) if args.val_manifest else None

    params = adam_state = None
    if args.resume:
        params, arch, adam_state = load_checkpoint(args.resume)
        if arch != cfg.model.to_dict():
            raise UsageError("checkpoint architecture does not match config")
        if adam_state is None:
            raise UsageError("checkpoint has no adam_state; cannot resume")

    _write_json(out / "resolved_config.json", cfg.to_dict())
    log_path = out / "train.log.jsonl"
    mode = "a" if args.resume else "w"
    try:
        result = P.train(dataset, cfg, params=params, adam_state=adam_state,
                         val_dataset=val_dataset)
    except P.NonFiniteLossError as exc:
        snap_path = out / "abort_snapshot.json"
        _write_json(snap_path, exc.snapshot)
        print(f"training aborted: {exc} (snapshot: {snap_path})", file=sys.stderr)
        return 1
    with open(log_path, mode, encoding="utf-8", newline="\n") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    save_checkpoint(out / "checkpoint.json", result.params,
                    cfg.model.to_dict(), result.adam_state)
    print(f"wrote {out / 'checkpoint.json'} and {log_path}")
    return 0


# -- eval ------------------------------------------------------------------------


def _eval_worker(task: tuple) -> dict:
    method, pair_path, checkpoint, iters, seed = task
    pair = D.load_pair(pair_path)
    try:
        result = _register_one(method, pair, checkpoint, iters, seed)
    except P.PipelineError as exc:
        return {"method": method, "pair_id": pair.pair_id, "error": str(exc)}
    doc = _result_doc(method, pair, result)
    if method == "rpmnet":
        doc["chamfer_per_iter"] = [
            geom.modified_chamfer(
                geom.apply_transform(pair.source, rec.transform),
                pair.reference,
                geom.apply_transform(pair.source_clean, rec.transform),
                pair.reference_clean)
            for rec in result.per_iteration
        ]
    doc.pop("per_iteration", None)
    return doc


def cmd_eval(args) -> int:
    out = _out_dir(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method '{m}' (choose from {METHODS})")
    if "rpmnet" in methods and args.checkpoint is None:
        raise UsageError("rpmnet requires --checkpoint")
    manifest = D.load_manifest(args.manifest)
    base = Path(args.manifest).parent
    jobs = args.jobs if args.jobs is not None else int(
        os.environ.get("RPM_ALIGN_JOBS", "1"))

    _write_json(out / "resolved_config.json", {
        "manifest": str(args.manifest), "methods": methods,
        "checkpoint": args.checkpoint, "iters": args.iters,
        "jobs": jobs, "seed": args.seed,
    })

    tasks = [(m, str(base / rel), args.checkpoint, args.iters, args.seed)
             for m in methods for rel in manifest.pair_paths]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            details = list(pool.map(_eval_worker, tasks))
    else:
        details = [_eval_worker(t) for t in tasks]
    details.sort(key=lambda d: (methods.index(d["method"]), d["pair_id"]))

    failures = [d for d in details if "error" in d]
    _write_json(out / "details.json", details)

    rows = []
    for m in methods:
        mine = [d for d in details if d["method"] == m and "error" not in d]
        if not mine:
            continue
        rows.append({
            "method": m,
            "aniso_rot": float(np.mean([d["metrics"]["aniso_rot_deg"] for d in mine])),
            "aniso_trans": float(np.mean([d["metrics"]["aniso_trans"] for d in mine])),
            "iso_rot": float(np.mean([d["metrics"]["iso_rot_deg"] for d in mine])),
            "iso_trans": float(np.mean([d["metrics"]["iso_trans"] for d in mine])),
            "chamfer_mod": float(np.mean([d["metrics"]["chamfer_mod"] for d in mine])),
        })
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "metrics.json", rows)

    for row in rows:
        print(", ".join(f"{k}={row[k]}" if k == "method" else f"{k}={row[k]:.6g}"
                        for k in EVAL_COLUMNS))
    if failures:
        print(f"{len(failures)} pair evaluations failed; see details.json",
              file=sys.stderr)
        return 1
    return 0


# -- gradcheck ---------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    ok, lines = run_scope(args.scope, args.seeds)
    for line in lines:
        print(line)
    return 0 if ok else 1


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpmalign",
        description="Rigid point-cloud registration toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic pair dataset")
    p.add_argument("--mode", choices=("clean", "noisy", "partial"))
    p.add_argument("--pairs", type=int)
    p.add_argument("--kinds", help="comma-separated primitive kinds")
    p.add_argument("--n-model", type=int, dest="n_model")
    p.add_argument("--n-points", type=int, dest="n_points")
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="JSON config file (flags override)")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register one stored pair")
    p.add_argument("--method", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train", help="train the learned pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--config", help="JSON config file (flags override)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate methods over a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--methods", default="icp,rpm")
    p.add_argument("--checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("scope", choices=("layers", "procrustes", "full", "all"))
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (D.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except P.PipelineError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
