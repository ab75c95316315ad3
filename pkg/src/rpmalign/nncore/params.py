"""Named parameter bundles, the Adam optimizer, and finite-difference checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad

FORMAT_VERSION = 1


@dataclass
class ParamBundle:
    """Named map of trainable tensors plus a version tag."""

    tensors: dict[str, Tensor]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        for name, t in self.tensors.items():
            if not isinstance(t, Tensor):
                self.tensors[name] = Tensor(np.asarray(t, dtype=np.float64),
                                            requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Collected gradients; missing ones are zeros."""
        return {n: (np.zeros_like(t.data) if t.grad is None else t.grad)
                for n, t in self.tensors.items()}

    def copy(self) -> "ParamBundle":
        return ParamBundle({n: Tensor(t.data.copy(), requires_grad=True)
                            for n, t in self.tensors.items()}, self.version)

    def n_values(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


@dataclass
class AdamState:
    """First/second moment estimates per parameter and the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: ParamBundle) -> "AdamState":
        return cls(m={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
                   v={n: np.zeros_like(t.data) for n, t in params.tensors.items()})


def adam_step(
    params: ParamBundle,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamBundle, AdamState]:
    """One bias-corrected Adam update. Functional: returns new bundle/state."""
    t = state.step + 1
    new_tensors: dict[str, Tensor] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, tensor in params.tensors.items():
        g = grads[name]
        if g.shape != tensor.data.shape:
            raise ValueError(f"adam_step: gradient shape mismatch for {name}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_tensors[name] = Tensor(new_data, requires_grad=True)
        new_m[name] = m
        new_v[name] = v
    return (ParamBundle(new_tensors, params.version),
            AdamState(m=new_m, v=new_v, step=t))


@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: GradCheckEntry | None
    n_checked: int
    entries: list[GradCheckEntry] = field(repr=False, default_factory=list)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err <= tol


def grad_check(
    fn: Callable[[ParamBundle], Tensor],
    params: ParamBundle,
    h: float = 1e-6,
    rel_floor: float = 1e-6,
    max_dims_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar map against central differences.

    ``max_dims_per_param`` subsamples coordinates (seeded) for large bundles;
    relative error uses max(|analytic|, |numeric|, rel_floor) as denominator.
    """
    params.zero_grad()
    loss = fn(params)
    if loss.data.ndim != 0:
        raise ValueError("grad_check: fn must return a scalar tensor")
    if not np.isfinite(loss.data):
        raise FloatingPointError("grad_check: non-finite function value")
    loss.backward()
    analytic = params.grads()

    if rng is None:
        rng = np.random.default_rng(0)
    check_names = list(names) if names is not None else params.names()

    entries: list[GradCheckEntry] = []
    for name in check_names:
        data = params[name].data
        n = data.size
        if max_dims_per_param is not None and n > max_dims_per_param:
            flat_idx = np.sort(rng.choice(n, size=max_dims_per_param, replace=False))
        else:
            flat_idx = np.arange(n)
        flat = data.reshape(-1)
        for fi in flat_idx:
            orig = flat[fi]
            with no_grad():
                flat[fi] = orig + h
                f_plus = float(fn(params).data)
                flat[fi] = orig - h
                f_minus = float(fn(params).data)
            flat[fi] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[fi])
            denom = max(abs(ana), abs(numeric), rel_floor)
            idx = np.unravel_index(int(fi), data.shape)
            entries.append(GradCheckEntry(name, idx, ana, numeric,
                                          abs(ana - numeric) / denom))

    worst = max(entries, key=lambda e: e.rel_err) if entries else None
    return GradCheckReport(
        max_rel_err=worst.rel_err if worst else 0.0,
        worst=worst,
        n_checked=len(entries),
        entries=entries,
    )


# -- initialization helpers ---------------------------------------------------


def he_weights(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """Gaussian init scaled for relu stacks."""
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


def glorot_weights(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
