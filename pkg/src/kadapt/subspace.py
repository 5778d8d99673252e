"""Random-subspace reparameterisation and local intrinsic dimension.

A submodule's flattened parameters are written as ``theta0 + P @ theta`` with
``P`` a fixed random D x d projection (Fastfood or dense Gaussian) and only
``theta`` trained.  The local intrinsic dimension is the smallest grid value
of d whose accuracy reaches a fraction (0.9) of the directly trained
submodule's accuracy.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .peft import HEAD_PATHS, adapt_paths
from .tensor import Tensor
from .vit import ViTModel, forward

DENSE_CAP = 2**24


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalised Walsh-Hadamard transform along the last axis (length 2^m)."""
    x = np.array(x, dtype=np.float64)
    n = x.shape[-1]
    if n & (n - 1):
        raise ValueError(f"fwht: length {n} is not a power of two")
    lead = x.shape[:-1]
    h = 1
    while h < n:
        y = x.reshape(lead + (n // (2 * h), 2, h))
        a, b = y[..., 0, :], y[..., 1, :]
        x = np.stack((a + b, a - b), axis=-2).reshape(lead + (n,))
        h *= 2
    return x


class Projection:
    """Linear map R^d -> R^D with a matching transpose."""

    D: int
    d: int

    def project(self, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project_t(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def apply(self, theta: Tensor) -> Tensor:
        """Differentiable ``P @ theta``."""
        return T.record("project", self.project(theta.data), (theta,), lambda g: (self.project_t(g),))

    def matrix(self) -> np.ndarray:
        return np.stack([self.project(e) for e in np.eye(self.d)], axis=1) if self.d else np.zeros((self.D, 0))


class FastfoodProjection(Projection):
    """Stacked Fastfood blocks ``S H G Pi H B / sqrt(L)``, scaled by 1/sqrt(D).

    The input is zero-padded to the block length L (next power of two >= d),
    ceil(D / L) independent blocks are stacked and the output truncated to D
    rows.  Columns then have unit expected squared norm.
    """

    def __init__(self, D: int, d: int, seed: int = 0) -> None:
        if D < 1 or d < 1:
            raise ValueError("Fastfood needs D >= 1 and d >= 1")
        self.D, self.d, self.seed = D, d, seed
        self.L = 1 << (d - 1).bit_length()
        self.blocks = -(-D // self.L)
        rng = np.random.default_rng([seed, D, d])
        shape = (self.blocks, self.L)
        self.B = rng.choice([-1.0, 1.0], size=shape)
        self.perm = np.argsort(rng.random(shape), axis=1)
        self.G = rng.normal(size=shape)
        chi = np.sqrt(rng.chisquare(self.L, size=shape))
        self.S = chi / np.linalg.norm(self.G, axis=1, keepdims=True)

    def project(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        x = np.zeros(self.L)
        x[: self.d] = theta
        z = fwht(self.B * x)
        z = np.take_along_axis(z, self.perm, axis=1) * self.G
        z = fwht(z) * self.S / math.sqrt(self.L)
        return z.reshape(-1)[: self.D] / math.sqrt(self.D)

    def project_t(self, y: np.ndarray) -> np.ndarray:
        yp = np.zeros(self.blocks * self.L)
        yp[: self.D] = np.asarray(y, dtype=np.float64) / math.sqrt(self.D)
        z = fwht(yp.reshape(self.blocks, self.L) * self.S / math.sqrt(self.L)) * self.G
        w = np.zeros_like(z)
        np.put_along_axis(w, self.perm, z, axis=1)
        return (fwht(w) * self.B).sum(axis=0)[: self.d]


class DenseGaussianProjection(Projection):
    """Explicit D x d matrix with i.i.d. N(0, 1/D) entries (unit expected column norm)."""

    def __init__(self, D: int, d: int, seed: int = 0) -> None:
        if D * d > DENSE_CAP:
            raise ValueError(f"dense projection of {D}x{d} exceeds the {DENSE_CAP}-entry cap")
        self.D, self.d, self.seed = D, d, seed
        self.P = np.random.default_rng([seed, D, d]).normal(0.0, 1.0 / math.sqrt(D), size=(D, d))

    def project(self, theta: np.ndarray) -> np.ndarray:
        return self.P @ np.asarray(theta, dtype=np.float64)

    def project_t(self, y: np.ndarray) -> np.ndarray:
        return self.P.T @ np.asarray(y, dtype=np.float64)

    def matrix(self) -> np.ndarray:
        return self.P


def build_fastfood(D: int, d: int, seed: int = 0) -> FastfoodProjection:
    return FastfoodProjection(D, d, seed)


def dense_gaussian_projection(D: int, d: int, seed: int = 0) -> DenseGaussianProjection:
    return DenseGaussianProjection(D, d, seed)


def make_projection(kind: str, D: int, d: int, seed: int) -> Projection:
    if kind == "fastfood":
        return FastfoodProjection(D, d, seed)
    if kind == "dense":
        return DenseGaussianProjection(D, d, seed)
    raise ValueError(f"unknown projection kind {kind!r}")


# ------------------------------------------------------------------ targets


_MODULE_LEAVES = {
    "attention": ("attn.Wq", "attn.bq", "attn.Wk", "attn.bk", "attn.Wv", "attn.bv", "attn.Wo", "attn.bo"),
    "mlp": ("mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"),
}


@dataclass(frozen=True)
class SubmoduleTarget:
    module: str = "attention"
    layers: tuple = (0,)

    def __post_init__(self) -> None:
        if self.module not in _MODULE_LEAVES:
            raise ValueError(f"unknown submodule {self.module!r}; expected attention or mlp")
        if not self.layers:
            raise ValueError("target needs at least one layer")

    def paths(self, model: ViTModel) -> list[str]:
        out = [f"block.{i}.{leaf}" for i in self.layers for leaf in _MODULE_LEAVES[self.module]]
        missing = [p for p in out if p not in model.params]
        if missing:
            raise KeyError(f"target submodule paths not in model: {missing}")
        return out

    def dimension(self, model: ViTModel) -> int:
        return sum(model.params[p].size for p in self.paths(model))


class SubspaceModel:
    """Frozen model whose target submodule is ``theta0 + P @ theta``; the head also trains."""

    def __init__(self, model: ViTModel, target: SubmoduleTarget, projection: Optional[Projection], theta: Optional[Tensor] = None, head: Optional[dict] = None) -> None:
        self.model = model
        self.config = model.config
        self.target = target
        self.paths = target.paths(model)
        self.shapes = [model.params[p].shape for p in self.paths]
        self.theta0 = np.concatenate([model.params[p].data.reshape(-1) for p in self.paths])
        self.projection = projection
        d = projection.d if projection is not None else 0
        if projection is not None and projection.D != self.theta0.size:
            raise ValueError(f"projection maps to {projection.D} dims, target has {self.theta0.size}")
        self.theta = theta if theta is not None else (Tensor(np.zeros(d), requires_grad=True) if d else None)
        self.head = head or {p: Tensor(model.params[p].data.copy(), requires_grad=True) for p in HEAD_PATHS}

    def parameters(self) -> list[Tensor]:
        return ([self.theta] if self.theta is not None else []) + [self.head[p] for p in HEAD_PATHS]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> "SubspaceModel":
        theta = Tensor(self.theta.data.copy(), requires_grad=True) if self.theta is not None else None
        head = {p: Tensor(t.data.copy(), requires_grad=True) for p, t in self.head.items()}
        return SubspaceModel(self.model, self.target, self.projection, theta, head)

    def flat_params(self) -> np.ndarray:
        """Current submodule parameters, ``theta0 + P @ theta``."""
        if self.theta is None:
            return self.theta0.copy()
        return self.theta0 + self.projection.project(self.theta.data)

    def effective_params(self) -> dict:
        params = dict(self.model.params)
        params.update(self.head)
        if self.theta is None:
            return params
        flat = T.add(Tensor(self.theta0), self.projection.apply(self.theta))
        offset = 0
        for path, shape in zip(self.paths, self.shapes):
            count = int(np.prod(shape))
            params[path] = T.reshape(flat[offset : offset + count], shape)
            offset += count
        return params

    def forward(self, images) -> Tensor:
        return forward(self.effective_params(), self.config, images, self.model.variant)

    __call__ = forward


# ------------------------------------------------------------ measurements


@dataclass
class IDMeasurement:
    target: str
    grid: list
    full_accuracy: float
    threshold: float = 0.9
    results: list = field(default_factory=list)
    d_t: Optional[int] = None
    seeds: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("grid must be strictly ascending")

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "grid": list(self.grid),
            "accuracy": {str(d): acc for d, acc in self.results},
            "full_accuracy": self.full_accuracy,
            "threshold": self.threshold,
            "d_t": self.d_t,
            "seeds": list(self.seeds),
            **({"notes": self.notes} if self.notes else {}),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def threshold_crossing(results: Sequence[tuple], full_accuracy: float, threshold: float = 0.9) -> Optional[int]:
    """Smallest d in ``results`` whose accuracy reaches ``threshold * full_accuracy``."""
    goal = threshold * full_accuracy
    for d, acc in sorted(results):
        if acc >= goal:
            return d
    return None


def measure_local_id(
    evaluator: Callable[[int], float],
    grid: Sequence[int],
    full_accuracy: float,
    threshold: float = 0.9,
    target: str = "custom",
    seeds: Sequence[int] = (),
) -> IDMeasurement:
    """Walk ``grid`` upward, stopping at the first d that meets the threshold."""
    if full_accuracy <= 0:
        raise ValueError("full_accuracy must be positive")
    if not grid:
        raise ValueError("grid must be nonempty")
    m = IDMeasurement(target, list(grid), full_accuracy, threshold, seeds=list(seeds))
    for d in grid:
        m.results.append((d, float(evaluator(d))))
        if m.results[-1][1] >= threshold * full_accuracy:
            m.d_t = d
            break
    return m


def subspace_train(model: ViTModel, target: SubmoduleTarget, d: int, projection_kind: str, train_cfg, splits, seed: int = 0) -> tuple[float, object]:
    """Grid-trained validation accuracy of the subspace model at dimension ``d``.

    Returns ``(accuracy, GridReport)``.  ``d == 0`` trains the head alone.
    """
    from .harness.train import grid_search_train

    if d < 0:
        raise ValueError("subspace dimension must be non-negative")
    proj = make_projection(projection_kind, target.dimension(model), d, seed) if d > 0 else None
    sub = SubspaceModel(model, target, proj)
    _, report = grid_search_train(sub, splits.train, splits.val, splits.test, train_cfg)
    return report.val_accuracy, report


def full_submodule_accuracy(model: ViTModel, target: SubmoduleTarget, train_cfg, splits) -> float:
    """Validation accuracy of training the target submodule (and head) directly."""
    from .harness.train import grid_search_train

    _, report = grid_search_train(adapt_paths(model, target.paths(model)), splits.train, splits.val, splits.test, train_cfg)
    return report.val_accuracy


def measure_local_id_live(
    model: ViTModel,
    module: str,
    layers: Sequence[int],
    grid: Sequence[int],
    train_cfg,
    splits,
    projection_kind: str = "fastfood",
    threshold: float = 0.9,
    seed: int = 0,
) -> dict:
    """Per-layer measurements plus the crossing of the layer-averaged curve.

    Every layer is evaluated on the same ascending grid prefix, stopping once
    each layer and the mean curve have crossed the threshold.
    """
    per_layer = {}
    fulls = {}
    for layer in layers:
        tgt = SubmoduleTarget(module, (layer,))
        fulls[layer] = full_submodule_accuracy(model, tgt, train_cfg, splits)
    results: dict = {layer: [] for layer in layers}
    mean_full = float(np.mean(list(fulls.values())))
    for d in grid:
        for layer in layers:
            acc, _ = subspace_train(model, SubmoduleTarget(module, (layer,)), d, projection_kind, train_cfg, splits, seed)
            results[layer].append((d, acc))
        mean_curve = [(g, float(np.mean([results[l][i][1] for l in layers]))) for i, g in enumerate(grid[: len(results[layers[0]])])]
        done = all(threshold_crossing(results[l], fulls[l], threshold) is not None for l in layers)
        if done and threshold_crossing(mean_curve, mean_full, threshold) is not None:
            break
    for layer in layers:
        m = IDMeasurement(f"{module}@layer{layer}", list(grid), fulls[layer], threshold, results[layer], seeds=[seed])
        m.d_t = threshold_crossing(results[layer], fulls[layer], threshold)
        per_layer[layer] = m
    mean = IDMeasurement(f"{module}@mean", list(grid), mean_full, threshold, mean_curve, seeds=[seed])
    mean.d_t = threshold_crossing(mean_curve, mean_full, threshold)
    mean.notes = {
        "full_accuracy_reference": "direct training of the same submodule (plus head) with the same budget",
        "projection": projection_kind,
        "per_layer_d_t": {str(l): per_layer[l].d_t for l in layers},
    }
    return {"module": module, "layers": list(layers), "per_layer": per_layer, "mean": mean}
