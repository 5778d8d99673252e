"""Training loop and (lr, wd[, epochs]) grid search."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .data import ImageDataset
from .optim import DivergenceError, Optimizer

log = logging.getLogger(__name__)


class Trainable(Protocol):
    def parameters(self) -> list[Tensor]: ...

    def forward(self, images) -> Tensor: ...

    def clone(self) -> "Trainable": ...

    def zero_grad(self) -> None: ...


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lr_grid: tuple = (1e-3, 1e-2, 1e-1)
    wd_grid: tuple = (0.0, 1e-4)
    epochs: int = 50
    epochs_grid: Optional[tuple] = None
    batch_size: int = 32
    eval_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.lr_grid or not self.wd_grid:
            raise ValueError("lr_grid and wd_grid must be nonempty")
        if self.epochs <= 0 or (self.epochs_grid is not None and (not self.epochs_grid or min(self.epochs_grid) <= 0)):
            raise ValueError("epochs must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def optimizer_kwargs(self) -> dict:
        if self.optimizer == "sgd":
            return {"momentum": self.momentum}
        return {"betas": tuple(self.betas), "eps": self.eps}

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: Trainable, ds: ImageDataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        return float("nan")
    correct = 0
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            logits = model.forward(ds.images[start : start + batch_size]).data
            correct += int((logits.argmax(axis=1) == ds.labels[start : start + batch_size]).sum())
    return correct / len(ds)


def train_run(
    model: Trainable,
    train: ImageDataset,
    lr: float,
    wd: float,
    epochs: int,
    cfg: TrainConfig,
    seed: int,
    val: Optional[ImageDataset] = None,
) -> dict:
    """Train ``model`` in place; raises :class:`DivergenceError` on non-finite loss."""
    rng = np.random.default_rng(seed)
    params = model.parameters()
    opt = Optimizer(cfg.optimizer, params, lr, wd, **cfg.optimizer_kwargs())
    history = []
    loss_value = float("nan")
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            loss = T.cross_entropy(model.forward(train.images[idx]), train.labels[idx])
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            if params:
                T.backward(loss)
                opt.step()
        if val is not None and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            history.append((epoch + 1, evaluate(model, val)))
    return {"final_loss": loss_value, "history": history}


@dataclass
class GridReport:
    cells: list = field(default_factory=list)
    best: Optional[dict] = None
    val_accuracy: float = float("nan")
    test_accuracy: float = float("nan")

    @property
    def failed_cells(self) -> int:
        return sum(1 for c in self.cells if c["status"] != "ok")

    def to_dict(self) -> dict:
        return {
            "cells": self.cells,
            "best": self.best,
            "val_accuracy": self.val_accuracy,
            "test_accuracy": self.test_accuracy,
            "failed_cells": self.failed_cells,
        }


class GridFailedError(RuntimeError):
    """Every grid cell diverged."""


def grid_search_train(
    model: Trainable,
    train: ImageDataset,
    val: ImageDataset,
    test: Optional[ImageDataset],
    cfg: TrainConfig,
) -> tuple[Trainable, GridReport]:
    """Train a fresh clone per grid cell and keep the best by validation accuracy.

    All cells share the initial weights and the data order (seeded by
    ``cfg.seed``), so enumeration order cannot affect the outcome.  Ties go
    to the lower lr, then lower wd, then fewer epochs.
    """
    epochs_list = tuple(cfg.epochs_grid) if cfg.epochs_grid else (cfg.epochs,)
    report = GridReport()
    best_key, best_model = None, None
    for lr, wd, epochs in itertools.product(cfg.lr_grid, cfg.wd_grid, epochs_list):
        cell = {"lr": float(lr), "wd": float(wd), "epochs": int(epochs)}
        candidate = model.clone()
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                train_run(candidate, train, lr, wd, epochs, cfg, cfg.seed, val)
                acc = evaluate(candidate, val)
        except DivergenceError as exc:
            log.info("grid cell %s diverged: %s", cell, exc)
            report.cells.append({**cell, "status": "diverged", "val_accuracy": None})
            continue
        report.cells.append({**cell, "status": "ok", "val_accuracy": acc})
        key = (-acc, float(lr), float(wd), int(epochs))
        if best_key is None or key < best_key:
            best_key, best_model = key, candidate
            report.best = cell
    if best_model is None:
        raise GridFailedError(f"all {len(report.cells)} grid cells diverged")
    report.val_accuracy = -best_key[0]
    if test is not None:
        with np.errstate(over="ignore", invalid="ignore"):
            report.test_accuracy = evaluate(best_model, test)
    return best_model, report
