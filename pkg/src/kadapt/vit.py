"""A small pre-norm vision transformer with addressable parameters.

Weights follow the (out_features, in_features) convention and every tensor
lives in a flat registry keyed by a dotted path such as ``block.3.attn.Wq``.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError

CHECKPOINT_MAGIC = b"KADAPT01"


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    class_token: bool = True

    def __post_init__(self) -> None:
        for name in ("image_size", "patch_size", "channels", "d_model", "num_heads", "num_layers", "mlp_ratio", "num_classes"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ViTConfig.{name} must be positive")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens(self) -> int:
        return self.num_patches + int(self.class_token)

    @property
    def mlp_hidden(self) -> int:
        return self.d_model * self.mlp_ratio

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


PRESETS = {
    "vit-tiny": ViTConfig(),
    "vit-micro": ViTConfig(image_size=8, patch_size=4, d_model=16, num_heads=2, num_layers=2, mlp_ratio=2),
}


@dataclass(frozen=True)
class AttentionVariant:
    """Attention flavour: plain, LePE (depthwise conv on V) or relative position bias."""

    mode: str = "plain"
    kernel_size: int = 3

    def __post_init__(self) -> None:
        if self.mode not in ("plain", "lepe", "rpb"):
            raise ValueError(f"unknown attention variant {self.mode!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("LePE kernel size must be a positive odd number")


PLAIN = AttentionVariant()


def block_shapes(cfg: ViTConfig, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    d, h = cfg.d_model, cfg.mlp_hidden
    return [
        (f"{prefix}.ln1.gamma", (d,)),
        (f"{prefix}.ln1.beta", (d,)),
        (f"{prefix}.attn.Wq", (d, d)),
        (f"{prefix}.attn.bq", (d,)),
        (f"{prefix}.attn.Wk", (d, d)),
        (f"{prefix}.attn.bk", (d,)),
        (f"{prefix}.attn.Wv", (d, d)),
        (f"{prefix}.attn.bv", (d,)),
        (f"{prefix}.attn.Wo", (d, d)),
        (f"{prefix}.attn.bo", (d,)),
        (f"{prefix}.ln2.gamma", (d,)),
        (f"{prefix}.ln2.beta", (d,)),
        (f"{prefix}.mlp.W1", (h, d)),
        (f"{prefix}.mlp.b1", (h,)),
        (f"{prefix}.mlp.W2", (d, h)),
        (f"{prefix}.mlp.b2", (d,)),
    ]


def variant_shapes(cfg: ViTConfig, variant: AttentionVariant) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for i in range(cfg.num_layers):
        if variant.mode == "lepe":
            k = variant.kernel_size
            out.append((f"block.{i}.attn.lepe.kernel", (cfg.d_model, k, k)))
        elif variant.mode == "rpb":
            side = cfg.grid
            out.append((f"block.{i}.attn.rpb.table", ((2 * side - 1) ** 2, cfg.num_heads)))
            if cfg.class_token:
                out.append((f"block.{i}.attn.rpb.cls", (cfg.num_heads,)))
    return out


def model_shapes(cfg: ViTConfig, variant: AttentionVariant = PLAIN) -> list[tuple[str, tuple[int, ...]]]:
    patch_in = cfg.channels * cfg.patch_size**2
    shapes = [("patch_embed.W", (cfg.d_model, patch_in)), ("patch_embed.b", (cfg.d_model,))]
    if cfg.class_token:
        shapes.append(("cls_token", (1, cfg.d_model)))
    shapes.append(("pos_embed", (cfg.tokens, cfg.d_model)))
    for i in range(cfg.num_layers):
        shapes.extend(block_shapes(cfg, f"block.{i}"))
    shapes.extend(variant_shapes(cfg, variant))
    shapes += [
        ("norm.gamma", (cfg.d_model,)),
        ("norm.beta", (cfg.d_model,)),
        ("head.W", (cfg.num_classes, cfg.d_model)),
        ("head.b", (cfg.num_classes,)),
    ]
    return shapes


def init_param(path: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    leaf = path.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "cls") or path.endswith("rpb.table") or path.endswith("lepe.kernel"):
        return np.zeros(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    if path in ("cls_token", "pos_embed"):
        return rng.normal(0.0, 0.02, size=shape)
    bound = 1.0 / math.sqrt(shape[-1])
    return rng.uniform(-bound, bound, size=shape)


class ViTModel:
    """Configuration plus an ordered ``path -> Tensor`` registry."""

    def __init__(self, config: ViTConfig, params: Mapping[str, Tensor], variant: AttentionVariant = PLAIN) -> None:
        self.config = config
        self.variant = variant
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(params)
        expected = dict(model_shapes(config, variant))
        missing = set(expected) - set(self.params)
        if missing:
            raise KeyError(f"model registry missing {sorted(missing)}")
        for path, shape in expected.items():
            if self.params[path].shape != shape:
                raise ShapeError(f"{path}: expected {list(shape)}, got {list(self.params[path].shape)}")

    @classmethod
    def build(cls, config: ViTConfig, seed: int = 0, variant: AttentionVariant = PLAIN) -> "ViTModel":
        rng = np.random.default_rng(seed)
        params = OrderedDict((p, Tensor(init_param(p, s, rng))) for p, s in model_shapes(config, PLAIN))
        model = cls(config, params)
        return model.with_variant(variant, seed=seed) if variant.mode != "plain" else model

    def with_variant(self, variant: AttentionVariant, seed: int = 0) -> "ViTModel":
        """Copy of this model with (zero-initialised) variant parameters added."""
        rng = np.random.default_rng(seed)
        params = OrderedDict((p, Tensor(t.data.copy())) for p, t in self.params.items() if ".lepe." not in p and ".rpb." not in p)
        for p, s in variant_shapes(self.config, variant):
            params[p] = Tensor(init_param(p, s, rng))
        ordered = OrderedDict((p, params[p]) for p, _ in model_shapes(self.config, variant))
        return ViTModel(self.config, ordered, variant)

    def with_head(self, num_classes: int, seed: int) -> "ViTModel":
        """Copy with a freshly initialised classification head."""
        cfg = ViTConfig(**{**asdict(self.config), "num_classes": num_classes})
        rng = np.random.default_rng(seed)
        params = OrderedDict((p, Tensor(t.data.copy())) for p, t in self.params.items())
        params["head.W"] = Tensor(init_param("head.W", (num_classes, cfg.d_model), rng))
        params["head.b"] = Tensor(np.zeros(num_classes))
        return ViTModel(cfg, params, self.variant)

    def clone(self) -> "ViTModel":
        return ViTModel(self.config, OrderedDict((p, Tensor(t.data.copy())) for p, t in self.params.items()), self.variant)

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def __call__(self, images, **kw) -> Tensor:
        return forward(self.params, self.config, images, self.variant, **kw)


def param_paths(model: ViTModel) -> list[tuple[str, tuple[int, ...], int]]:
    return [(p, t.shape, t.size) for p, t in model.params.items()]


# ------------------------------------------------------------------- layers


def patchify(images: np.ndarray, cfg: ViTConfig) -> np.ndarray:
    b, c, h, w = images.shape
    p, g = cfg.patch_size, cfg.grid
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g, c * p * p)


def dwconv(v: Tensor, kernel: Tensor, class_token: bool = True) -> Tensor:
    """Depthwise 2-D cross-correlation of token features over the patch grid.

    ``v`` is (batch, tokens, channels); the patch tokens must form a square
    grid.  Zero padding keeps the grid size, and the class token (first
    token, when present) is passed through unchanged.
    """
    b, tokens, ch = v.shape
    offset = int(class_token)
    side = math.isqrt(tokens - offset)
    if side * side != tokens - offset:
        raise ShapeError(f"dwconv: {tokens - offset} patch tokens do not form a square grid")
    if kernel.ndim != 3 or kernel.shape[0] != ch or kernel.shape[1] != kernel.shape[2]:
        raise ShapeError(f"dwconv: kernel {list(kernel.shape)} incompatible with {ch} channels")
    k = kernel.shape[1]
    pad = k // 2
    grid = v.data[:, offset:, :].reshape(b, side, side, ch)
    padded = np.zeros((b, side + 2 * pad, side + 2 * pad, ch))
    padded[:, pad : pad + side, pad : pad + side] = grid
    kd = kernel.data
    conv = np.zeros_like(grid)
    for dy in range(k):
        for dx in range(k):
            conv += padded[:, dy : dy + side, dx : dx + side, :] * kd[:, dy, dx]
    out = v.data.copy()
    out[:, offset:, :] = conv.reshape(b, side * side, ch)

    def bw(g):
        gv = np.zeros_like(v.data)
        if offset:
            gv[:, 0, :] = g[:, 0, :]
        gg = g[:, offset:, :].reshape(b, side, side, ch)
        gpad = np.zeros_like(padded)
        gk = np.zeros_like(kd)
        for dy in range(k):
            for dx in range(k):
                gpad[:, dy : dy + side, dx : dx + side, :] += gg * kd[:, dy, dx]
                gk[:, dy, dx] = (gg * padded[:, dy : dy + side, dx : dx + side, :]).sum(axis=(0, 1, 2))
        gv[:, offset:, :] = gpad[:, pad : pad + side, pad : pad + side].reshape(b, side * side, ch)
        return gv, gk

    return T.record("dwconv", out, (v, kernel), bw)


def relative_index(side: int) -> np.ndarray:
    """(P, P) table indices for every pair of patches, Swin style."""
    ys, xs = np.divmod(np.arange(side * side), side)
    dy = ys[:, None] - ys[None, :] + side - 1
    dx = xs[:, None] - xs[None, :] + side - 1
    return dy * (2 * side - 1) + dx


def rpb_bias(table: Tensor, cls_bias: Optional[Tensor], side: int) -> Tensor:
    """Assemble the (heads, tokens, tokens) additive attention bias."""
    idx = relative_index(side)
    patch = T.transpose(T.index(table, idx), (2, 0, 1))  # heads, P, P
    if cls_bias is None:
        return patch
    heads, p = table.shape[1], side * side
    # Shared class-token bias on the first row and column.
    table_ext = T.concat([T.reshape(cls_bias, (heads, 1)), T.transpose(table)], axis=1)
    rows = np.zeros((p + 1, p + 1), dtype=np.int64)
    rows[1:, 1:] = idx + 1
    return T.transpose(T.index(T.transpose(table_ext), rows), (2, 0, 1))


Hooks = Mapping[str, Callable[[Tensor], Tensor]]


def attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: ViTConfig,
    variant: AttentionVariant,
    hooks: Optional[Hooks] = None,
    trace: Optional[dict] = None,
) -> Tensor:
    b, n, d = x.shape
    heads, hd = cfg.num_heads, cfg.head_dim
    q = T.linear(x, params[f"{prefix}.Wq"], params[f"{prefix}.bq"])
    k = T.linear(x, params[f"{prefix}.Wk"], params[f"{prefix}.bk"])
    v = T.linear(x, params[f"{prefix}.Wv"], params[f"{prefix}.bv"])

    def split(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / math.sqrt(hd))
    if variant.mode == "rpb":
        cls = params.get(f"{prefix}.rpb.cls") if cfg.class_token else None
        scores = T.add(scores, rpb_bias(params[f"{prefix}.rpb.table"], cls, cfg.grid))
    attn = T.softmax(scores, axis=-1)
    if trace is not None:
        trace.setdefault("attn", []).append(attn.data)
        trace.setdefault("v", []).append(v.data)
    ctx = T.reshape(T.transpose(T.matmul(attn, vh), (0, 2, 1, 3)), (b, n, d))
    if variant.mode == "lepe":
        ctx = T.add(ctx, dwconv(v, params[f"{prefix}.lepe.kernel"], cfg.class_token))
    if trace is not None:
        trace.setdefault("ctx", []).append(ctx.data)
    if hooks and f"{prefix}.inside" in hooks:
        ctx = hooks[f"{prefix}.inside"](ctx)
    return T.linear(ctx, params[f"{prefix}.Wo"], params[f"{prefix}.bo"])


def block(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    cfg: ViTConfig,
    variant: AttentionVariant = PLAIN,
    hooks: Optional[Hooks] = None,
    trace: Optional[dict] = None,
) -> Tensor:
    h = T.layernorm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    h = attention(h, params, f"{prefix}.attn", cfg, variant, hooks, trace)
    if hooks and f"{prefix}.after_attn" in hooks:
        h = hooks[f"{prefix}.after_attn"](h)
    x = T.add(x, h)
    h = T.layernorm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = T.gelu(T.linear(h, params[f"{prefix}.mlp.W1"], params[f"{prefix}.mlp.b1"]))
    h = T.linear(h, params[f"{prefix}.mlp.W2"], params[f"{prefix}.mlp.b2"])
    if hooks and f"{prefix}.after_mlp" in hooks:
        h = hooks[f"{prefix}.after_mlp"](h)
    return T.add(x, h)


def forward(
    params: Mapping[str, Tensor],
    cfg: ViTConfig,
    images,
    variant: AttentionVariant = PLAIN,
    hooks: Optional[Hooks] = None,
    extra_blocks: tuple[str, ...] = (),
    trace: Optional[dict] = None,
) -> Tensor:
    """Logits for a (batch, channels, height, width) image array.

    ``extra_blocks`` lists registry prefixes of additional encoder blocks run
    after the backbone and before the final norm.
    """
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    want = (cfg.channels, cfg.image_size, cfg.image_size)
    if imgs.ndim != 4 or imgs.shape[1:] != want:
        raise ShapeError(f"forward: expected images of shape [b, {', '.join(map(str, want))}], got {list(imgs.shape)}")
    b = imgs.shape[0]
    x = T.linear(Tensor(patchify(imgs, cfg)), params["patch_embed.W"], params["patch_embed.b"])
    if cfg.class_token:
        cls = T.index(params["cls_token"], (np.zeros(b, dtype=np.int64),))
        x = T.concat([T.reshape(cls, (b, 1, cfg.d_model)), x], axis=1)
    x = T.add(x, params["pos_embed"])
    for i in range(cfg.num_layers):
        x = block(x, params, f"block.{i}", cfg, variant, hooks, trace)
    for prefix in extra_blocks:
        x = block(x, params, prefix, cfg, PLAIN, None, trace)
    x = T.layernorm(x, params["norm.gamma"], params["norm.beta"])
    pooled = x[:, 0, :] if cfg.class_token else T.mean(x, axis=1)
    return T.linear(pooled, params["head.W"], params["head.b"])


# --------------------------------------------------------------- checkpoints


def save_checkpoint(path, config: ViTConfig, tensors: Mapping[str, Tensor], extra: Optional[dict] = None) -> None:
    """Write a JSON manifest followed by a little-endian float64 payload.

    Layout: 8-byte magic, little-endian uint64 manifest length, manifest
    bytes, payload.  Offsets in the manifest count float64 elements.
    """
    entries, offset = [], 0
    for name, t in tensors.items():
        entries.append({"path": name, "offset": offset, "shape": list(t.shape)})
        offset += t.size
    manifest = {"format": "kadapt-checkpoint/1", "config": asdict(config), "tensors": entries, "elements": offset}
    if extra:
        manifest.update(extra)
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, Tensor]"]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a kadapt checkpoint (bad magic {raw[:8]!r})")
    (mlen,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + mlen].decode("utf-8"))
    payload = np.frombuffer(raw[16 + mlen :], dtype="<f8")
    if payload.size != manifest["elements"] or len(raw[16 + mlen :]) % 8:
        raise ValueError(f"{path}: payload holds {payload.size} values, manifest declares {manifest['elements']}")
    tensors: "OrderedDict[str, Tensor]" = OrderedDict()
    expect = 0
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != expect or any(s <= 0 for s in e["shape"]):
            raise ValueError(f"{path}: bad table entry for {e['path']}")
        tensors[e["path"]] = Tensor(payload[expect : expect + count].astype(np.float64).reshape(e["shape"]))
        expect += count
    return manifest, tensors


def save_model(path, model: ViTModel, extra: Optional[dict] = None) -> None:
    meta = {"variant": asdict(model.variant)}
    meta.update(extra or {})
    save_checkpoint(path, model.config, model.params, meta)


def load_model(path) -> ViTModel:
    manifest, tensors = read_checkpoint(path)
    cfg = ViTConfig(**manifest["config"])
    variant = AttentionVariant(**manifest.get("variant", {}))
    want = model_shapes(cfg, variant)
    params = OrderedDict()
    for p, shape in want:
        if p not in tensors:
            raise ValueError(f"{path}: manifest lacks {p}")
        if tensors[p].shape != shape:
            raise ShapeError(f"{path}: {p} has shape {list(tensors[p].shape)}, config implies {list(shape)}")
        params[p] = tensors[p]
    return ViTModel(cfg, params, variant)
