"""Adaptation strategies: parameter selection, injected modules and weight deltas.

A strategy is applied to a frozen :class:`~kadapt.vit.ViTModel` and yields an
:class:`AdaptedModel` that owns a private copy of the registry plus any new
tensors.  Injected tensors use these path prefixes:

* ``delta.<site>.<factor>``: weight-delta factors (LoRA, KAdaptation), with
  the KAdaptation slow weights under ``delta.slow.A.<i>``
* ``adapter.<hook-site>.{down,up}.*``: bottleneck / Compacter adapters
* ``compacter.slow.A.<i>``: Compacter's shared slow weights
* ``probe.0.*``: the extra Transformer-probing block
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError
from .vit import AttentionVariant, PLAIN, ViTConfig, ViTModel, block_shapes, forward, init_param

KINDS = (
    "full_finetune",
    "linear_probe",
    "transformer_probe",
    "bitfit",
    "layernorm_tune",
    "attention_tune",
    "adapter",
    "adapter_drop",
    "lora",
    "compacter",
    "kadaptation",
    "lepe_tune",
    "rpb_tune",
)
DELTA_KINDS = ("lora", "kadaptation")
PLACEMENTS = ("after_mlp_and_attn", "inside_attention")
TARGET_GROUPS = {
    "attention_qv": ("attn.Wq", "attn.Wv"),
    "attention_q": ("attn.Wq",),
    "attention_all": ("attn.Wq", "attn.Wk", "attn.Wv", "attn.Wo"),
    "mlp": ("mlp.W1", "mlp.W2"),
}
HEAD_PATHS = ("head.W", "head.b")
BIAS_LEAVES = {"b", "bq", "bk", "bv", "bo", "b1", "b2", "beta", "gamma"}


class StrategyError(ValueError):
    """Strategy hyperparameters are incompatible with the model."""


class NotMergeableError(TypeError):
    pass


@dataclass(frozen=True)
class AdaptStrategy:
    """Declarative description of one adaptation method.

    Only the fields relevant to ``kind`` matter; the rest keep their defaults.
    ``lora`` with ``fix_a=True`` is LoRA-Fix.
    """

    kind: str
    bottleneck: int = 64
    placement: str = "after_mlp_and_attn"
    adapter_bias: bool = True
    r: int = 4
    targets: str = "attention_qv"
    fix_a: bool = False
    n: int = 32
    delta_bias: bool = False
    decompose_slow: bool = False
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise StrategyError(f"unknown strategy kind {self.kind!r}")
        for name in ("bottleneck", "r", "n", "kernel_size"):
            if getattr(self, name) <= 0:
                raise StrategyError(f"{name} must be positive, got {getattr(self, name)}")
        if self.placement not in PLACEMENTS:
            raise StrategyError(f"unknown adapter placement {self.placement!r}")
        if self.targets not in TARGET_GROUPS:
            raise StrategyError(f"unknown target group {self.targets!r}")

    @property
    def label(self) -> str:
        if self.kind == "lora":
            base = "lora_fix" if self.fix_a else "lora"
            return f"{base}(r={self.r},targets={self.targets})"
        if self.kind == "kadaptation":
            return f"kadaptation(n={self.n},r={self.r},targets={self.targets})"
        if self.kind == "compacter":
            return f"compacter(n={self.n},bottleneck={self.bottleneck})"
        if self.kind == "adapter":
            return f"adapter(bottleneck={self.bottleneck},placement={self.placement})"
        if self.kind == "adapter_drop":
            return f"adapter_drop(bottleneck={self.bottleneck})"
        return self.kind

    @property
    def mergeable(self) -> bool:
        return self.kind in DELTA_KINDS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdaptStrategy":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    @classmethod
    def kadaptation(cls, n: int = 32, r: int = 1, targets: str = "attention_qv", **kw) -> "AdaptStrategy":
        return cls("kadaptation", n=n, r=r, targets=targets, **kw)

    @classmethod
    def lora(cls, r: int = 4, targets: str = "attention_qv", fix_a: bool = False) -> "AdaptStrategy":
        return cls("lora", r=r, targets=targets, fix_a=fix_a)

    @classmethod
    def compacter(cls, n: int = 4, bottleneck: int = 64, **kw) -> "AdaptStrategy":
        return cls("compacter", n=n, bottleneck=bottleneck, **kw)


_ALIASES = {
    "lora_fix": ("lora", {"fix_a": True}),
    "compacter": ("compacter", {"n": 4}),
    "kadaptation": ("kadaptation", {"n": 32, "r": 1}),
}


def parse_strategy(text: str) -> AdaptStrategy:
    """Parse ``kind`` or ``kind:key=value,key=value`` (e.g. ``kadaptation:n=4,r=1``)."""
    kind, _, rest = text.strip().partition(":")
    kind = kind.strip().lower().replace("-", "_")
    kind, preset = _ALIASES.get(kind, (kind, {}))
    kw: dict = dict(preset)
    types = {f.name: f.type for f in fields(AdaptStrategy)}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, value = item.partition("=")
        key = key.strip()
        if not eq or key not in types or key == "kind":
            raise StrategyError(f"bad strategy option {item!r} in {text!r}")
        if types[key] in ("bool", bool):
            kw[key] = value.strip().lower() in ("1", "true", "yes", "on")
        elif types[key] in ("int", int):
            kw[key] = int(value)
        else:
            kw[key] = value.strip()
    return AdaptStrategy(kind, **kw)


# ------------------------------------------------------------ delta modules


@dataclass
class KronDelta:
    """Sum-of-Kronecker weight deltas with shared slow and per-site fast factors.

    ``slow`` holds the n matrices A_i (n x n).  Every site references the same
    list, so updating one A_i changes every site's delta.  ``fast[site]`` is a
    pair of lists ``(u, v)`` with u_i of shape (k/n, r) and v_i of shape
    (r, d/n) for a k x d site weight.
    """

    n: int
    slow: list
    fast: dict
    scale: float = 1.0
    bias: dict = field(default_factory=dict)
    slow_lowrank: Optional[list] = None

    def slow_factor(self, i: int) -> Tensor:
        if self.slow_lowrank is not None:
            a, b = self.slow_lowrank[i]
            return T.matmul(a, b)
        return self.slow[i]


def materialize_delta(delta: KronDelta, site: str) -> Tensor:
    """``scale * sum_i kron(A_i, u_i @ v_i)`` for one registered site."""
    if site not in delta.fast:
        raise KeyError(f"no Kronecker delta registered for site {site!r}")
    us, vs = delta.fast[site]
    total = None
    for i in range(delta.n):
        term = T.kron(delta.slow_factor(i), T.matmul(us[i], vs[i]))
        total = term if total is None else T.add(total, term)
    return total if delta.scale == 1.0 else T.scale(total, delta.scale)


@dataclass
class LoRADelta:
    """Per-site rank-r pairs: ``delta W = scale * B @ A`` with A (r x k), B (d x r)."""

    factors: dict
    fix_a: bool = False
    scale: float = 1.0

    def materialize(self, site: str) -> Tensor:
        a, b = self.factors[site]
        out = T.matmul(b, a)
        return out if self.scale == 1.0 else T.scale(out, self.scale)


@dataclass
class AdapterBlock:
    """Bottleneck ``x + up(gelu(down(x)))`` with (out, in)-shaped weights."""

    down_w: Tensor
    up_w: Tensor
    down_b: Optional[Tensor] = None
    up_b: Optional[Tensor] = None


def adapter_forward(block: AdapterBlock, x: Tensor) -> Tensor:
    if x.shape[-1] != block.down_w.shape[1]:
        raise ShapeError(f"adapter: input width {x.shape[-1]} != {block.down_w.shape[1]}")
    h = T.gelu(T.linear(x, block.down_w, block.down_b))
    return T.add(x, T.linear(h, block.up_w, block.up_b))


@dataclass
class CompacterBlock:
    """Adapter whose projections are sums of Kronecker products (PHM layers).

    ``slow`` is shared by every Compacter block of a model; each projection
    has its own rank-one fast factors ``(u_i, v_i)``.
    """

    slow: list
    down: tuple
    up: tuple
    down_b: Optional[Tensor] = None
    up_b: Optional[Tensor] = None

    def projection(self, which: str) -> Tensor:
        us, vs = self.down if which == "down" else self.up
        total = None
        for i, a in enumerate(self.slow):
            term = T.kron(a, T.matmul(us[i], vs[i]))
            total = term if total is None else T.add(total, term)
        return total


def compacter_forward(block: CompacterBlock, x: Tensor) -> Tensor:
    dense = AdapterBlock(block.projection("down"), block.projection("up"), block.down_b, block.up_b)
    return adapter_forward(dense, x)


# ------------------------------------------------------------ adapted model


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _leaf(path: str) -> str:
    return path.rsplit(".", 1)[-1]


def is_bias_path(path: str) -> bool:
    return _leaf(path) in BIAS_LEAVES


class AdaptedModel:
    """A frozen base plus whatever the strategy trains or injects.

    ``params`` is a private registry (copies of base tensors plus injected
    tensors); ``trainable`` lists the paths the optimizer may touch.  The
    ``base`` model passed in is never modified.
    """

    def __init__(
        self,
        base: ViTModel,
        strategy: Optional[AdaptStrategy],
        params: "OrderedDict[str, Tensor]",
        trainable: Iterable[str],
        variant: AttentionVariant = PLAIN,
        extra_blocks: tuple[str, ...] = (),
    ) -> None:
        self.base = base
        self.config: ViTConfig = base.config
        self.strategy = strategy
        self.params = params
        self.variant = variant
        self.extra_blocks = tuple(extra_blocks)
        trainable = set(trainable)
        unknown = trainable - set(params)
        if unknown:
            raise KeyError(f"trainable paths not in registry: {sorted(unknown)}")
        self.trainable = [p for p in params if p in trainable]
        for p, t in params.items():
            t.requires_grad = p in trainable
            t.grad = None

    # -- registry views
    def parameters(self) -> list[Tensor]:
        return [self.params[p] for p in self.trainable]

    def frozen_paths(self) -> list[str]:
        keep = set(self.trainable)
        return [p for p in self.params if p not in keep]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "AdaptedModel":
        params = OrderedDict((p, Tensor(t.data.copy())) for p, t in self.params.items())
        return AdaptedModel(self.base, self.strategy, params, self.trainable, self.variant, self.extra_blocks)

    # -- structured views over the registry
    def kron_delta(self) -> Optional[KronDelta]:
        s = self.strategy
        if s is None or s.kind != "kadaptation":
            return None
        n = s.n
        lowrank = None
        slow = [self.params.get(f"delta.slow.A.{i}") for i in range(n)]
        if s.decompose_slow:
            lowrank = [(self.params[f"delta.slow.a.{i}"], self.params[f"delta.slow.b.{i}"]) for i in range(n)]
        fast, bias = {}, {}
        for site in self.delta_sites():
            us = [self.params[f"delta.{site}.u.{i}"] for i in range(n)]
            vs = [self.params[f"delta.{site}.v.{i}"] for i in range(n)]
            fast[site] = (us, vs)
            if s.delta_bias:
                bias[site] = self.params[f"delta.{site}.bias"]
        return KronDelta(n=n, slow=slow, fast=fast, bias=bias, slow_lowrank=lowrank)

    def lora_delta(self) -> Optional[LoRADelta]:
        s = self.strategy
        if s is None or s.kind != "lora":
            return None
        factors = {site: (self.params[f"delta.{site}.A"], self.params[f"delta.{site}.B"]) for site in self.delta_sites()}
        return LoRADelta(factors, fix_a=s.fix_a)

    def delta_sites(self) -> list[str]:
        s = self.strategy
        if s is None or s.kind not in DELTA_KINDS:
            return []
        return target_sites(self.config, s.targets)

    def adapter_blocks(self) -> dict:
        s = self.strategy
        if s is None or s.kind not in ("adapter", "adapter_drop", "compacter"):
            return {}
        out = {}
        for hook in adapter_hook_sites(self.config, s):
            pre = f"adapter.{hook}"
            db, ub = self.params.get(f"{pre}.down.b"), self.params.get(f"{pre}.up.b")
            if s.kind == "compacter":
                slow = [self.params[f"compacter.slow.A.{i}"] for i in range(s.n)]
                down = ([self.params[f"{pre}.down.u.{i}"] for i in range(s.n)], [self.params[f"{pre}.down.v.{i}"] for i in range(s.n)])
                up = ([self.params[f"{pre}.up.u.{i}"] for i in range(s.n)], [self.params[f"{pre}.up.v.{i}"] for i in range(s.n)])
                out[hook] = CompacterBlock(slow, down, up, db, ub)
            else:
                out[hook] = AdapterBlock(self.params[f"{pre}.down.W"], self.params[f"{pre}.up.W"], db, ub)
        return out

    def effective_params(self) -> dict:
        """Registry with every weight-delta site replaced by W0 + delta W."""
        eff = dict(self.params)
        kd = self.kron_delta()
        if kd is not None:
            for site in kd.fast:
                eff[site] = T.add(self.params[site], materialize_delta(kd, site))
                if site in kd.bias:
                    bpath = bias_for(site)
                    eff[bpath] = T.add(self.params[bpath], kd.bias[site])
        ld = self.lora_delta()
        if ld is not None:
            for site in ld.factors:
                eff[site] = T.add(self.params[site], ld.materialize(site))
        return eff

    def hooks(self) -> dict:
        hooks = {}
        for hook, blk in self.adapter_blocks().items():
            if isinstance(blk, CompacterBlock):
                hooks[hook] = lambda x, blk=blk: compacter_forward(blk, x)
            else:
                hooks[hook] = lambda x, blk=blk: adapter_forward(blk, x)
        return hooks

    def forward(self, images, trace: Optional[dict] = None) -> Tensor:
        return forward(self.effective_params(), self.config, images, self.variant, self.hooks(), self.extra_blocks, trace)

    __call__ = forward


def target_sites(cfg: ViTConfig, group: str) -> list[str]:
    return [f"block.{i}.{leaf}" for i in range(cfg.num_layers) for leaf in TARGET_GROUPS[group]]


def bias_for(weight_path: str) -> str:
    prefix, leaf = weight_path.rsplit(".", 1)
    return f"{prefix}.b{leaf[1:]}"


def adapter_hook_sites(cfg: ViTConfig, s: AdaptStrategy) -> list[str]:
    layers = [cfg.num_layers - 1] if s.kind == "adapter_drop" else range(cfg.num_layers)
    if s.kind != "adapter_drop" and s.placement == "inside_attention":
        return [f"block.{i}.attn.inside" for i in layers]
    return [f"block.{i}.{where}" for i in layers for where in ("after_attn", "after_mlp")]


def _site_dims(params: Mapping[str, Tensor], site: str) -> tuple[int, int]:
    out_dim, in_dim = params[site].shape
    return out_dim, in_dim


def apply_strategy(model: ViTModel, strategy: AdaptStrategy, seed: int = 0) -> AdaptedModel:
    """Wrap ``model`` according to ``strategy``.

    Delta factors and adapter up-projections start at zero so the adapted
    forward initially reproduces the base logits.
    """
    s = strategy
    cfg = model.config
    rng = np.random.default_rng(seed)
    variant = PLAIN
    base_src = model
    if s.kind in ("lepe_tune", "rpb_tune"):
        variant = AttentionVariant("lepe" if s.kind == "lepe_tune" else "rpb", kernel_size=s.kernel_size)
        base_src = model.with_variant(variant, seed=seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict((p, Tensor(t.data.copy())) for p, t in base_src.params.items())
    base_paths = list(params)
    trainable: list[str] = list(HEAD_PATHS)
    extra_blocks: tuple[str, ...] = ()

    if s.kind == "full_finetune":
        trainable = base_paths
    elif s.kind == "linear_probe":
        pass
    elif s.kind == "bitfit":
        trainable += [p for p in base_paths if is_bias_path(p)]
    elif s.kind == "layernorm_tune":
        trainable += [p for p in base_paths if re.search(r"(^|\.)(ln1|ln2|norm)\.(gamma|beta)$", p)]
    elif s.kind == "attention_tune":
        trainable += [p for p in base_paths if re.search(r"\.attn\.(W|b)[qkvo]$", p)]
    elif s.kind in ("lepe_tune", "rpb_tune"):
        trainable += [p for p in base_paths if ".lepe." in p or ".rpb." in p]
    elif s.kind == "transformer_probe":
        for path, shape in block_shapes(cfg, "probe.0"):
            value = init_param(path, shape, rng)
            if path.endswith((".attn.Wo", ".attn.bo", ".mlp.W2", ".mlp.b2")):
                value = np.zeros(shape)
            params[path] = Tensor(value)
            trainable.append(path)
        extra_blocks = ("probe.0",)
    elif s.kind in ("adapter", "adapter_drop"):
        k, bd = cfg.d_model, s.bottleneck
        for hook in adapter_hook_sites(cfg, s):
            pre = f"adapter.{hook}"
            new = [(f"{pre}.down.W", _uniform(rng, (bd, k), k)), (f"{pre}.up.W", np.zeros((k, bd)))]
            if s.adapter_bias:
                new += [(f"{pre}.down.b", np.zeros(bd)), (f"{pre}.up.b", np.zeros(k))]
            for path, value in new:
                params[path] = Tensor(value)
                trainable.append(path)
    elif s.kind == "compacter":
        k, bd, n = cfg.d_model, s.bottleneck, s.n
        if k % n or bd % n:
            raise StrategyError(f"compacter: n={n} must divide hidden size {k} and bottleneck {bd}")
        for i in range(n):
            params[f"compacter.slow.A.{i}"] = Tensor(_uniform(rng, (n, n), n))
            trainable.append(f"compacter.slow.A.{i}")
        for hook in adapter_hook_sites(cfg, s):
            pre = f"adapter.{hook}"
            # down: (bd x k); up: (k x bd); up's v factors start at zero.
            for which, (rows, cols) in (("down", (bd, k)), ("up", (k, bd))):
                for i in range(n):
                    u = _uniform(rng, (rows // n, 1), rows // n)
                    v = np.zeros((1, cols // n)) if which == "up" else _uniform(rng, (1, cols // n), cols // n)
                    params[f"{pre}.{which}.u.{i}"] = Tensor(u)
                    params[f"{pre}.{which}.v.{i}"] = Tensor(v)
                    trainable += [f"{pre}.{which}.u.{i}", f"{pre}.{which}.v.{i}"]
            if s.adapter_bias:
                params[f"{pre}.down.b"] = Tensor(np.zeros(bd))
                params[f"{pre}.up.b"] = Tensor(np.zeros(k))
                trainable += [f"{pre}.down.b", f"{pre}.up.b"]
    elif s.kind == "lora":
        for site in target_sites(cfg, s.targets):
            d_out, k_in = _site_dims(params, site)
            if s.r > min(d_out, k_in):
                raise StrategyError(f"lora: rank {s.r} exceeds min({d_out}, {k_in}) at {site}")
            params[f"delta.{site}.A"] = Tensor(_uniform(rng, (s.r, k_in), k_in))
            params[f"delta.{site}.B"] = Tensor(np.zeros((d_out, s.r)))
            trainable.append(f"delta.{site}.B")
            if not s.fix_a:
                trainable.append(f"delta.{site}.A")
    elif s.kind == "kadaptation":
        n, r = s.n, s.r
        sites = target_sites(cfg, s.targets)
        for site in sites:
            rows, cols = _site_dims(params, site)
            if rows % n or cols % n:
                raise StrategyError(f"kadaptation: n={n} must divide both dimensions of {site} ({rows}x{cols})")
            if r > min(rows, cols):
                raise StrategyError(f"kadaptation: rank {r} exceeds min({rows}, {cols}) at {site}")
        for i in range(n):
            if s.decompose_slow:
                params[f"delta.slow.a.{i}"] = Tensor(_uniform(rng, (n, 1), n))
                params[f"delta.slow.b.{i}"] = Tensor(_uniform(rng, (1, n), 1))
                trainable += [f"delta.slow.a.{i}", f"delta.slow.b.{i}"]
            else:
                params[f"delta.slow.A.{i}"] = Tensor(_uniform(rng, (n, n), n))
                trainable.append(f"delta.slow.A.{i}")
        for site in sites:
            rows, cols = _site_dims(params, site)
            for i in range(n):
                params[f"delta.{site}.u.{i}"] = Tensor(_uniform(rng, (rows // n, r), rows // n))
                params[f"delta.{site}.v.{i}"] = Tensor(np.zeros((r, cols // n)))
                trainable += [f"delta.{site}.u.{i}", f"delta.{site}.v.{i}"]
            if s.delta_bias:
                params[f"delta.{site}.bias"] = Tensor(np.zeros(rows))
                trainable.append(f"delta.{site}.bias")
    return AdaptedModel(base_src, s, params, trainable, variant, extra_blocks)


def adapt_paths(model: ViTModel, paths: Iterable[str]) -> AdaptedModel:
    """Adapted wrapper training exactly ``paths`` (plus the head) of ``model``."""
    params = OrderedDict((p, Tensor(t.data.copy())) for p, t in model.params.items())
    return AdaptedModel(model, None, params, list(paths) + list(HEAD_PATHS), model.variant)


def merge(adapted: AdaptedModel) -> ViTModel:
    """Fold weight deltas into the base weights; only LoRA/KAdaptation qualify."""
    s = adapted.strategy
    if s is None or not s.mergeable:
        kind = "custom" if s is None else s.kind
        raise NotMergeableError(f"strategy {kind!r} injects modules and cannot be merged into the base weights")
    eff = adapted.effective_params()
    params = OrderedDict((p, Tensor(eff[p].data.copy())) for p in adapted.base.params)
    return ViTModel(adapted.config, params, adapted.variant)


# ------------------------------------------------------------ serialisation


def save_adapted(path, adapted: AdaptedModel) -> None:
    from .vit import save_checkpoint

    extra = {
        "variant": asdict(adapted.variant),
        "strategy": adapted.strategy.to_dict() if adapted.strategy else None,
        "trainable": adapted.trainable,
        "extra_blocks": list(adapted.extra_blocks),
    }
    save_checkpoint(path, adapted.config, adapted.params, extra)


def load_adapted(path) -> AdaptedModel:
    from .vit import model_shapes, read_checkpoint

    manifest, tensors = read_checkpoint(path)
    cfg = ViTConfig(**manifest["config"])
    variant = AttentionVariant(**manifest.get("variant", {}))
    if manifest.get("strategy") is None:
        raise ValueError(f"{path}: checkpoint carries no strategy")
    strategy = AdaptStrategy.from_dict(manifest["strategy"])
    base_params = OrderedDict()
    for p, shape in model_shapes(cfg, variant):
        if p not in tensors or tensors[p].shape != shape:
            raise ShapeError(f"{path}: base tensor {p} missing or mis-shaped")
        base_params[p] = Tensor(tensors[p].data.copy())
    base = ViTModel(cfg, base_params, variant)
    # Rebuild the expected layout and validate every injected tensor against it.
    template = apply_strategy(base, strategy, seed=0)
    for p, t in template.params.items():
        if p not in tensors or tensors[p].shape != t.shape:
            raise ShapeError(f"{path}: tensor {p} missing or has wrong shape")
    params = OrderedDict((p, tensors[p]) for p in template.params)
    return AdaptedModel(template.base, strategy, params, manifest.get("trainable", template.trainable), variant, template.extra_blocks)
