"""Checkpoint serialization: one JSON document per trained model.

Layout (field names are pinned by ``schemas/checkpoint.schema.json``)::

    {
      "format_version": 1,
      "architecture_config": { ... },
      "parameters": {"<name>": {"shape": [...], "values": [...]}},
      "adam_state": {"step": N, "m": {...}, "v": {...}}   # optional
    }

Values are row-major decimal numbers; python's repr round-trips float64
exactly, so save/load is lossless.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import FORMAT_VERSION, AdamState, ParamBundle
from .tensor import Tensor


class CheckpointError(ValueError):
    pass


def _tensor_dict(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": arr.reshape(-1).tolist()}


def _tensor_from(obj: dict, where: str) -> np.ndarray:
    if not isinstance(obj, dict) or "shape" not in obj or "values" not in obj:
        raise CheckpointError(f"{where}: expected an object with shape/values")
    shape = tuple(int(s) for s in obj["shape"])
    values = np.asarray(obj["values"], dtype=np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if values.size != expected:
        raise CheckpointError(
            f"{where}: {values.size} values do not fill shape {shape}")
    return values.reshape(shape)


def save_checkpoint(
    path: str | Path,
    params: ParamBundle,
    architecture_config: dict,
    adam_state: AdamState | None = None,
) -> None:
    doc: dict = {
        "format_version": FORMAT_VERSION,
        "architecture_config": architecture_config,
        "parameters": {n: _tensor_dict(t.data) for n, t in params.tensors.items()},
    }
    if adam_state is not None:
        doc["adam_state"] = {
            "step": adam_state.step,
            "m": {n: _tensor_dict(a) for n, a in adam_state.m.items()},
            "v": {n: _tensor_dict(a) for n, a in adam_state.v.items()},
        }
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":"))
                          + "\n", encoding="utf-8", newline="\n")


def load_checkpoint(
    path: str | Path,
) -> tuple[ParamBundle, dict, AdamState | None]:
    """Read a checkpoint; returns (params, architecture_config, adam_state)."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise CheckpointError(f"{path}: top level must be an object")
    for key in ("format_version", "architecture_config", "parameters"):
        if key not in doc:
            raise CheckpointError(f"{path}: missing required field '{key}'")
    if int(doc["format_version"]) != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {doc['format_version']}")

    tensors = {
        name: Tensor(_tensor_from(obj, f"parameters.{name}"), requires_grad=True)
        for name, obj in doc["parameters"].items()
    }
    params = ParamBundle(tensors)

    adam_state = None
    if "adam_state" in doc:
        raw = doc["adam_state"]
        for key in ("step", "m", "v"):
            if key not in raw:
                raise CheckpointError(f"{path}: adam_state missing '{key}'")
        m = {n: _tensor_from(o, f"adam_state.m.{n}") for n, o in raw["m"].items()}
        v = {n: _tensor_from(o, f"adam_state.v.{n}") for n, o in raw["v"].items()}
        if set(m) != set(tensors) or set(v) != set(tensors):
            raise CheckpointError(f"{path}: adam_state names do not match parameters")
        adam_state = AdamState(m=m, v=v, step=int(raw["step"]))

    return params, doc["architecture_config"], adam_state
