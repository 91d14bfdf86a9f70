"""Adam, gradient evaluation and finite-difference checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor

__all__ = [
    "ContractError",
    "AdamState",
    "adam_step",
    "grad_of",
    "finite_diff_check",
    "GradCheckReport",
]

Params = dict[str, np.ndarray]


class ContractError(ValueError):
    """Shapes or names passed between components do not line up."""


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Params, grads: Mapping[str, np.ndarray],
              frozen: frozenset[str] | set[str] = frozenset()) -> Params:
    """Apply one bias-corrected Adam update in place and return ``params``.

    Gradients for names in ``frozen`` are accepted and discarded. Every
    trainable parameter needs a gradient of matching shape.
    """
    trainable = [k for k in params if k not in frozen]
    for k in trainable:
        if k not in grads:
            raise ContractError(f"missing gradient for trainable parameter {k!r}")
        if np.shape(grads[k]) != params[k].shape:
            raise ContractError(
                f"gradient shape {np.shape(grads[k])} != parameter shape {params[k].shape} for {k!r}")
    for k in grads:
        if k not in params:
            raise ContractError(f"gradient for unknown parameter {k!r}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k in trainable:
        g = np.asarray(grads[k], dtype=np.float64)
        if state.weight_decay:
            g = g + state.weight_decay * params[k]
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[k] = m
        state.v[k] = v
        params[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def grad_of(loss_fn: Callable[..., Tensor], params: Mapping[str, np.ndarray], *inputs,
            **kwargs) -> tuple[float, Params]:
    """Evaluate ``loss_fn(tensors, *inputs)`` and its gradient w.r.t. every entry of ``params``."""
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
              for k, v in params.items()}
    loss = loss_fn(leaves, *inputs, **kwargs)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
             for k, t in leaves.items()}
    return float(loss.data), grads


@dataclass
class GradCheckReport:
    max_rel: dict[str, float]
    tol: float

    @property
    def worst(self) -> float:
        return max(self.max_rel.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def as_dict(self) -> dict:
        return {"tol": self.tol, "max_rel": self.max_rel, "worst": self.worst,
                "passed": self.passed}


def finite_diff_check(loss_fn: Callable[..., Tensor], params: Mapping[str, np.ndarray],
                      *inputs, tol: float = 1e-5, h: float = 1e-6,
                      grads: Mapping[str, np.ndarray] | None = None,
                      **kwargs) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    Deviation per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    Pass ``grads`` to audit a gradient from elsewhere; by default the tape
    gradient from :func:`grad_of` is checked. ``params`` is never mutated.
    """
    if grads is None:
        _, grads = grad_of(loss_fn, params, *inputs, **kwargs)
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def value(p):
        return float(loss_fn({k: Tensor(v) for k, v in p.items()}, *inputs, **kwargs).data)

    report = {}
    for name, arr in base.items():
        worst = 0.0
        flat = arr.reshape(-1)
        g = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value(base)
            flat[i] = orig - h
            down = value(base)
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, abs(g[i] - numeric) / max(1.0, abs(numeric)))
        report[name] = worst
    return GradCheckReport(report, tol)
