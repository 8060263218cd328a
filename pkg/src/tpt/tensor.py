"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records a node
(parents, backward rule, sequence number) on its output. ``backward`` walks
the reachable nodes in reverse creation order, which is a valid topological
order because a node can only be created after all of its inputs.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "Node", "Tape", "TensorError", "ShapeError", "MaskedRowError",
    "NonFiniteError", "PrecisionError", "tensor", "parameter", "no_grad",
    "default_dtype", "set_default_dtype", "add", "sub", "mul", "neg", "scale",
    "matmul", "transpose", "transpose_last_two", "reshape", "broadcast_to",
    "concat", "stack", "split", "slice_axis", "sum", "mean", "softmax_last",
    "layer_norm", "gelu", "relu", "tanh", "exp", "log", "embedding_gather",
    "take_last", "backward", "build_tape", "zero_grads", "grad_check",
]


class TensorError(Exception):
    """Base class for tensor-engine errors."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class MaskedRowError(TensorError, ValueError):
    """A softmax row (or attention key set) with no unmasked entry."""


class NonFiniteError(TensorError, FloatingPointError):
    pass


class PrecisionError(TensorError, TypeError):
    pass


_state = threading.local()
_seq = itertools.count()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Node:
    __slots__ = ("parents", "backward", "seq", "op")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.op = op


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                arr = data
            else:
                arr = np.asarray(data, dtype=default_dtype())
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat view of the value buffer."""
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """A leaf tensor that always accumulates gradients."""
    arr = np.array(data, dtype=dtype if dtype is not None else default_dtype(), copy=True)
    return Tensor(arr, requires_grad=True)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else default_dtype()))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    track = _grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out.node = Node(parents, backward, op)
    return out


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


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape, detail="not broadcastable") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw, "mul")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


# -- linear algebra and shape manipulation ------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands need at least 2 axes")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner extents differ")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes not broadcastable") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, detail=f"bad permutation {axes}")
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def transpose_last_two(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError("transpose_last_two", x.shape, detail="needs at least 2 axes")
    return _result(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),),
                   "transpose_last_two")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = np.broadcast_to(x.data, tuple(shape))
    except ValueError:
        raise ShapeError("broadcast_to", src, tuple(shape)) from None
    return _result(np.ascontiguousarray(out), (x,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape, detail=f"mismatch off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    src, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return _result(x.data[index].copy(), (x,), bw, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ShapeError("split", x.shape, detail=f"sizes {tuple(sizes)} do not cover axis {axis}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(x, start, start + s, ax))
        start += s
    return out


# -- reductions ---------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), src).copy(),)

    return _result(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


# -- nonlinearities -----------------------------------------------------------

def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the trailing axis; ``-inf`` entries receive exactly zero mass."""
    d = x.data
    if d.ndim == 0 or d.shape[-1] < 1:
        raise ShapeError("softmax_last", d.shape, detail="trailing extent must be >= 1")
    dead = np.all(np.isneginf(d), axis=-1)
    if dead.any():
        raise MaskedRowError(f"softmax_last: {int(dead.sum())} fully masked row(s)")
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + x.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        gx = ggain = gbias = None
        if gain.requires_grad:
            ggain = (g * xhat).sum(axis=lead)
        if bias.requires_grad:
            gbias = g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _result(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error linear unit, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return (g * (cdf + xd * pdf),)

    return _result((xd * cdf).astype(xd.dtype, copy=False), (x,), bw, "gelu")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` set, inputs below it are clamped (zero gradient there)."""
    xd = x.data
    if floor is None:
        return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")
    live = xd > floor
    clamped = np.where(live, xd, x.dtype.type(floor))
    return _result(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0),), "log")


# -- indexing -----------------------------------------------------------------

def embedding_gather(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TensorError(f"embedding_gather: ids must be integers, got {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError("embedding_gather", table.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_gather: token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    src, dtype = table.shape, table.dtype

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, src[1]))
        return (full,)

    return _result(table.data[ids], (table,), bw, "embedding_gather")


def take_last(x: Tensor, index) -> Tensor:
    """``out[...] = x[..., index[...]]``; ``index`` has shape ``x.shape[:-1]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError("take_last", x.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= x.shape[-1]):
        raise IndexError(f"take_last: index out of range [0, {x.shape[-1]})")
    idx = index[..., None]
    src, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(src, dtype=dtype)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return _result(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), bw, "take_last")


# -- differentiation ----------------------------------------------------------

@dataclass
class Tape:
    """Recorded operations reachable from a loss, in creation (topological) order."""

    tensors: list[Tensor]

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def ops(self) -> list[str]:
        return [t.node.op for t in self.tensors]


def build_tape(loss: Tensor) -> Tape:
    seen: set[int] = set()
    found: list[Tensor] = []
    stack_ = [loss]
    while stack_:
        t = stack_.pop()
        if t.node is None or id(t) in seen:
            continue
        seen.add(id(t))
        found.append(t)
        stack_.extend(t.node.parents)
    found.sort(key=lambda t: t.node.seq)
    return Tape(found)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf requiring grad."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    tape = build_tape(loss)
    pending: dict[int, np.ndarray] = {id(loss): seed}
    for t in reversed(tape.tensors):
        g = pending.pop(id(t), None)
        if g is None:
            continue
        grads = t.node.backward(g)
        for p, pg in zip(t.node.parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=p.dtype)
                else:
                    p.grad += pg
            else:
                key = id(p)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad.fill(0)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor] | dict[str, Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
    report: dict | None = None,
) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` recomputes a scalar loss from the current parameter values.
    ``max_entries`` caps the probed coordinates per tensor (random subset);
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    If ``report`` is a dict it is filled with the per-tensor worst error.
    """
    named = dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}
    for name, p in named.items():
        if p.dtype != np.float64:
            raise PrecisionError(f"grad_check needs float64 parameters; {name} is {p.dtype}")
    zero_grads(named.values())
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"grad_check: non-finite loss {loss.data}")
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named.items():
        analytic = p.grad.reshape(-1).copy()
        flat = p.data.reshape(-1)
        if not np.shares_memory(flat, p.data):
            raise TensorError(f"grad_check: parameter {name} is not contiguous")
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        local = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"grad_check: non-finite loss while probing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            a = analytic[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            local = max(local, err)
        if report is not None:
            report[name] = local
        worst = max(worst, local)
    return worst
