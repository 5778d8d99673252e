"""SGD with momentum and AdamW over lists of arrays."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tensor import Tensor


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


def optimizer_step(
    kind: str,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
    wd: float,
    state: dict,
    momentum: float = 0.9,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], dict]:
    """One update; returns new parameter arrays and the (mutated) state.

    sgd:   v <- mu * v + g ;  p <- p - lr * (v + wd * p)
    adamw: bias-corrected Adam moments with decoupled weight decay.
    """
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
    if kind == "sgd":
        vel = state.setdefault("velocity", [np.zeros_like(p) for p in params])
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            vel[i] = momentum * vel[i] + g
            out.append(p - lr * (vel[i] + wd * p))
        return out, state
    if kind == "adamw":
        b1, b2 = betas
        m = state.setdefault("m", [np.zeros_like(p) for p in params])
        v = state.setdefault("v", [np.zeros_like(p) for p in params])
        t = state["t"] = state.get("t", 0) + 1
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            m[i] = b1 * m[i] + (1.0 - b1) * g
            v[i] = b2 * v[i] + (1.0 - b2) * g * g
            step = (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)
            out.append(p - lr * (step + wd * p))
        return out, state
    raise ValueError(f"unknown optimizer {kind!r}")


class Optimizer:
    """Applies :func:`optimizer_step` to tensors in place (rebinding ``.data``)."""

    def __init__(self, kind: str, params: Sequence[Tensor], lr: float, wd: float = 0.0, **kw) -> None:
        self.kind = kind
        self.params = list(params)
        self.lr = lr
        self.wd = wd
        self.kw = kw
        self.state: dict = {}

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = optimizer_step(self.kind, [p.data for p in self.params], grads, self.lr, self.wd, self.state, **self.kw)
        for p, arr in zip(self.params, new):
            if not np.all(np.isfinite(arr)):
                raise DivergenceError("parameter update produced non-finite values")
            p.data = arr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
