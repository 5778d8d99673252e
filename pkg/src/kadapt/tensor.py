"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a :class:`Node`
carrying a monotonically increasing sequence number.  :func:`backward` gathers
the nodes reachable from a scalar loss into a :class:`Tape` ordered by that
sequence number and replays them once, in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "linear",
    "kron",
    "transpose",
    "reshape",
    "index",
    "concat",
    "tsum",
    "mean",
    "softmax",
    "layernorm",
    "gelu",
    "cross_entropy",
    "record",
    "backward",
    "finite_diff_grad",
    "memory",
    "no_grad",
]

LN_EPS = 1e-5
_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class _Memory:
    """Engine-side accounting of live tensor payload bytes."""

    def __init__(self) -> None:
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes: int) -> None:
        self.live += nbytes
        if self.live > self.peak:
            self.peak = self.live

    def free(self, nbytes: int) -> None:
        self.live -= nbytes

    def reset_peak(self) -> None:
        self.peak = self.live


memory = _Memory()


class Node:
    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward_fn) -> None:
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        self._data = arr
        memory.alloc(arr.nbytes)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    def __del__(self) -> None:
        try:
            memory.free(self._data.nbytes)
        except Exception:  # interpreter shutdown
            pass

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._data.shape:
            raise ShapeError(f"cannot assign {arr.shape} into tensor of shape {self._data.shape}")
        memory.free(self._data.nbytes)
        self._data = arr
        memory.alloc(arr.nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self._data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``out`` in a tensor and put it on the tape if any input needs grad.

    ``backward_fn(g)`` receives the upstream gradient array and returns one
    gradient array (or ``None``) per input, in order.
    """
    result = Tensor.__new__(Tensor)
    result._data = out if out.dtype == np.float64 else out.astype(np.float64)
    memory.alloc(result._data.nbytes)
    result.requires_grad = False
    result.grad = None
    result.node = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(op, tuple(inputs), backward_fn)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {list(a.shape)} with {list(b.shape)}") from exc
    sa, sb = a.shape, b.shape
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {list(a.shape)} with {list(b.shape)}") from exc
    sa, sb = a.shape, b.shape
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {list(a.shape)} with {list(b.shape)}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


# ------------------------------------------------------------------- products


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes broadcast as in ``numpy.matmul``."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} are not conformable")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} are not conformable") from exc

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return record("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out_features, in_features)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {list(x.shape)} does not match weight {list(w.shape)}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {list(b.shape)} does not match weight {list(w.shape)}")
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if b is not None:
        out += b.data
    out = out.reshape(lead + (wd.shape[0],))
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record("linear", out, inputs, bw)


def kron(a: Tensor, b: Tensor) -> Tensor:
    """Kronecker product: block (i, j) of the result is ``a[i, j] * b``."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"kron: both operands must be matrices, got {list(a.shape)} and {list(b.shape)}")
    (m, n), (p, q) = a.shape, b.shape
    ad, bd = a.data, b.data
    out = (ad[:, None, :, None] * bd[None, :, None, :]).reshape(m * p, n * q)

    def bw(g):
        g4 = g.reshape(m, p, n, q)
        ga = np.einsum("ipjq,pq->ij", g4, bd) if a.requires_grad else None
        gb = np.einsum("ipjq,ij->pq", g4, ad) if b.requires_grad else None
        return ga, gb

    return record("kron", out, (a, b), bw)


# ------------------------------------------------------------------ structure


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {list(a.shape)}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {list(src)} as {list(shape)}") from exc
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def index(a: Tensor, key) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    src = a.shape
    out = np.array(a.data[key])

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return record("index", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [list(t.shape) for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, tensors, bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return record("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ------------------------------------------------------------ nonlinearities


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: axis {axis} out of range for shape {list(x.shape)}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", s, (x,), bw)


def layernorm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine pair."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    width = xd.shape[-1]

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        g2 = g.reshape(-1, width)
        if gamma is not None:
            grads.append((g2 * xhat.reshape(-1, width)).sum(axis=0))
        if beta is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return record("layernorm", out, inputs, bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = xd * cdf

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return record("gelu", out, (x,), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {list(logits.shape)} vs labels {list(labels.shape)}")
    classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        bad = labels[(labels < 0) | (labels >= classes)][0]
        raise IndexError(f"cross_entropy: label {int(bad)} out of range for {classes} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(labels.size)
    batch = labels.size
    loss = -logp[rows, labels].sum() / batch

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / batch),)

    return record("cross_entropy", np.asarray(loss), (logits,), bw)


# ------------------------------------------------------------------- backward


class Tape:
    """Nodes reachable from a root, in recording order."""

    def __init__(self, root: Tensor) -> None:
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or t.node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.inputs)
        found.sort(key=lambda t: t.node.seq)
        self.outputs = found

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.outputs]

    def __len__(self) -> int:
        return len(self.outputs)

    def replay(self, seed_grad: np.ndarray) -> None:
        if not self.outputs:
            return
        grads: dict[int, np.ndarray] = {id(self.outputs[-1]): seed_grad}
        for out in reversed(self.outputs):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = out.node.backward_fn(g)
            for inp, gi in zip(out.node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires grad and feeds ``loss``.

    Leaf gradients accumulate across calls; clear them with ``zero_grad``.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("backward: loss was not produced on the tape (no input requires grad)")
    seed = np.ones(loss.shape)
    if loss.node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape(loss).replay(seed)


def finite_diff_grad(
    f: Callable[[Tensor], object],
    x: Tensor,
    h: float = 1e-5,
    coords: Optional[Iterable[int]] = None,
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place and restored, so ``f`` may also close over it.
    With ``coords`` (flat indices), a 1-D tensor of estimates for just those
    coordinates is returned.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")

    def value() -> float:
        out = f(x)
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    flat = x.data.reshape(-1)
    picks = range(flat.size) if coords is None else list(coords)
    est = []
    for i in picks:
        orig = flat[i]
        flat[i] = orig + h
        fp = value()
        flat[i] = orig - h
        fm = value()
        flat[i] = orig
        est.append((fp - fm) / (2.0 * h))
    est = np.asarray(est, dtype=np.float64)
    return Tensor(est.reshape(x.shape) if coords is None else est)
