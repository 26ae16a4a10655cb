"""Dense tensors with a define-by-run gradient tape.

Every differentiable primitive goes through :func:`primitive`, which records a
node on the active :class:`Tape` whenever one of its inputs requires a
gradient.  Backward rules live in :data:`BACKWARD_RULES` and are looked up by
name at backward time, so a rule can be swapped out (tests use this to plant a
corrupted rule and make sure the gradient checker notices).

Tensors have value semantics: no op returns a view that aliases writable
storage of another tensor.
"""
from __future__ import annotations

import contextlib
import math
import os
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AxisError, BroadcastError, ContractError, NonFiniteError, ShapeError, TapeError

PRECISIONS = {"f32": np.float32, "f64": np.float64}

_env_mode = os.environ.get("LG_PRECISION", "f32")
if _env_mode not in PRECISIONS:
    warnings.warn(f"ignoring LG_PRECISION={_env_mode!r}; expected one of {sorted(PRECISIONS)}")
    _env_mode = "f32"
_default_dtype = PRECISIONS[_env_mode]
_debug = os.environ.get("LG_DEBUG", "") not in ("", "0")
_local = threading.local()


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(mode) -> None:
    global _default_dtype
    _default_dtype = _resolve_dtype(mode)


def _resolve_dtype(mode):
    if isinstance(mode, str):
        try:
            return PRECISIONS[mode]
        except KeyError:
            raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(PRECISIONS)}") from None
    dt = np.dtype(mode).type
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {mode!r}")
    return dt


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch the default floating dtype (``"f32"`` or ``"f64"``)."""
    global _default_dtype
    old = _default_dtype
    _default_dtype = _resolve_dtype(mode)
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    global _debug
    old = _debug
    _debug = enabled
    try:
        yield
    finally:
        _debug = old


# ---------------------------------------------------------------------------
# MAC counting (used to cross-check the analytic FLOP counter)


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates executed by :func:`matmul` in this block.

    Yields a one-element list whose entry is updated in place.
    """
    counter = [0]
    stack = _stack("mac_counters")
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _stack(attr):
    s = getattr(_local, attr, None)
    if s is None:
        s = []
        setattr(_local, attr, s)
    return s


# ---------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _default_dtype
        self.data = np.array(data, dtype=dtype, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._node = None
        return t

    # construction helpers
    @classmethod
    def zeros(cls, shape, requires_grad=False, dtype=None):
        return cls(np.zeros(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)

    @classmethod
    def ones(cls, shape, requires_grad=False, dtype=None):
        return cls(np.ones(shape, dtype=dtype or _default_dtype), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, shape)

    def permute(self, *order):
        if len(order) == 1 and isinstance(order[0], (tuple, list)):
            order = order[0]
        return permute(self, order)

    def transpose(self, a=-2, b=-1):
        order = list(range(self.ndim))
        order[a], order[b] = order[b], order[a]
        return permute(self, order)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("log", self)

    def sqrt(self):
        return elementwise("sqrt", self)

    def tanh(self):
        return elementwise("tanh", self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=dtype or _default_dtype))


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("op", "inputs", "out", "ctx")

    def __init__(self, op, inputs, out, ctx):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; ops run inside the block are recorded when any
    input requires a gradient.  :meth:`backward` may run once per recording;
    call :meth:`reset` to reuse the tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self):
        _stack("tapes").append(self)
        return self

    def __exit__(self, *exc):
        _stack("tapes").pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def reset(self) -> None:
        self._release()
        self._consumed = False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse-accumulate d(loss)/d(leaf) for every reachable leaf.

        Returns a mapping from leaf tensor to gradient array; leaves also get
        ``.grad`` set.  Leaves that the loss does not depend on are absent.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss._node is not None and loss._node not in self._owned():
            raise ContractError("loss was recorded on a different tape")
        self._consumed = True
        if not loss.requires_grad:
            return {}

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._node is None:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = BACKWARD_RULES[node.op](node, g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"backward rule {node.op!r} returned {gi.shape}, expected {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if t._node is None:
                    leaves[key] = t
        out = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g
            out[leaf] = g
        self._release()
        return out

    def _release(self) -> None:
        # a consumed graph is never replayed; dropping it breaks the
        # tape <-> node <-> tensor cycles so memory is freed right away
        for node in self.nodes:
            node.out._node = None
            node.ctx.clear()
        self.nodes = []

    def _owned(self):
        # node identity set; built lazily only for the sanity check
        return set(self.nodes)


def active_tape() -> Tape | None:
    if getattr(_local, "no_grad", 0):
        return None
    tapes = _stack("tapes")
    return tapes[-1] if tapes else None


@contextlib.contextmanager
def no_grad():
    _local.no_grad = getattr(_local, "no_grad", 0) + 1
    try:
        yield
    finally:
        _local.no_grad -= 1


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Run backward on whichever tape recorded ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = getattr(loss._node, "ctx", {}).get("_tape") if loss._node is not None else active_tape()
    if tape is None:
        raise ContractError("loss was not produced under an active tape")
    return tape.backward(loss)


BACKWARD_RULES: dict[str, Callable[[_Node, np.ndarray], tuple]] = {}


def register_backward(name: str):
    def deco(fn):
        BACKWARD_RULES[name] = fn
        return fn

    return deco


def primitive(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], **ctx) -> Tensor:
    """Wrap ``out_data`` as a Tensor and record it on the active tape."""
    if _debug and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise NonFiniteError(f"op {op!r} produced non-finite values from finite inputs")
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        if tape._consumed:
            raise TapeError("tape already consumed by backward; call reset() before recording")
        out.requires_grad = True
        ctx["_tape"] = tape
        node = _Node(op, tuple(inputs), out, ctx)
        out._node = node
        tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise BroadcastError(f"shapes {a} and {b} are not broadcast-compatible") from None


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-dimension broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype)
    if not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# Elementwise ops

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}
_UNARY = {
    "neg": np.negative,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply an elementwise op: add, sub, mul, div, neg, exp, log, sqrt, tanh."""
    if kind in _BINARY:
        if b is None:
            raise TypeError(f"{kind} needs two operands")
        a, b = _pair(a, b)
        _broadcast_shape(a.shape, b.shape)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _BINARY[kind](a.data, b.data)
        return primitive(kind, out, (a, b))
    if kind in _UNARY:
        a = as_tensor(a)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _UNARY[kind](a.data)
        return primitive(kind, out, (a,))
    raise ValueError(f"unknown elementwise op {kind!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def div(a, b):
    return elementwise("div", a, b)


def neg(a):
    return elementwise("neg", a)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


def sqrt(a):
    return elementwise("sqrt", a)


def tanh(a):
    return elementwise("tanh", a)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = np.power(a.data, a.dtype.type(p))
    return primitive("pow", out, (a,), p=p)


@register_backward("add")
def _add_bw(node, g):
    a, b = node.inputs
    return unbroadcast(g, a.shape), unbroadcast(g, b.shape)


@register_backward("sub")
def _sub_bw(node, g):
    a, b = node.inputs
    return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)


@register_backward("mul")
def _mul_bw(node, g):
    a, b = node.inputs
    ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
    return ga, gb


@register_backward("div")
def _div_bw(node, g):
    a, b = node.inputs
    ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
    gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
    return ga, gb


@register_backward("neg")
def _neg_bw(node, g):
    return (-g,)


@register_backward("exp")
def _exp_bw(node, g):
    return (g * node.out.data,)


@register_backward("log")
def _log_bw(node, g):
    return (g / node.inputs[0].data,)


@register_backward("sqrt")
def _sqrt_bw(node, g):
    return (g / (2 * node.out.data),)


@register_backward("tanh")
def _tanh_bw(node, g):
    y = node.out.data
    return (g * (1 - y * y),)


@register_backward("pow")
def _pow_bw(node, g):
    x = node.inputs[0].data
    p = node.ctx["p"]
    return (g * p * np.power(x, x.dtype.type(p - 1)),)


# ---------------------------------------------------------------------------
# matmul


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise BroadcastError(f"matmul batch dims {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    counters = getattr(_local, "mac_counters", None)
    if counters:
        macs = math.prod(batch) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for c in counters:
            c[0] += macs
    return primitive("matmul", np.matmul(a.data, b.data), (a, b))


@register_backward("matmul")
def _matmul_bw(node, g):
    a, b = node.inputs
    ga = gb = None
    if a.requires_grad:
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
    if b.requires_grad:
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
    return ga, gb


# ---------------------------------------------------------------------------
# Reductions


def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise AxisError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise AxisError(f"repeated axis in {axis}")
    return tuple(sorted(out))


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """Reduce ``x`` with ``sum``, ``mean`` or ``max`` over ``axis``."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    if kind == "sum":
        out = np.sum(x.data, axis=axes, keepdims=keepdims)
    elif kind == "mean":
        out = np.mean(x.data, axis=axes, keepdims=keepdims)
    elif kind == "max":
        if x.size == 0:
            raise ShapeError("max of an empty tensor")
        out = np.max(x.data, axis=axes, keepdims=keepdims)
    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return primitive(kind, np.asarray(out, dtype=x.dtype), (x,), axes=axes, keepdims=keepdims)


def _expand(g, node):
    x = node.inputs[0]
    if not node.ctx["keepdims"]:
        g = np.expand_dims(g, node.ctx["axes"])
    return np.broadcast_to(g, x.shape)


@register_backward("sum")
def _sum_bw(node, g):
    return (np.array(_expand(g, node)),)


@register_backward("mean")
def _mean_bw(node, g):
    x = node.inputs[0]
    n = math.prod(x.shape[a] for a in node.ctx["axes"])
    return (np.array(_expand(g, node)) / n,)


@register_backward("max")
def _max_bw(node, g):
    # gradient goes to the first maximal element along the reduced axes only
    x = node.inputs[0]
    axes = node.ctx["axes"]
    keep = [a for a in range(x.ndim) if a not in axes]
    moved = np.transpose(x.data, keep + list(axes)).reshape(
        [x.shape[a] for a in keep] + [math.prod(x.shape[a] for a in axes)]
    )
    first = np.argmax(moved, axis=-1)
    onehot = np.zeros_like(moved)
    np.put_along_axis(onehot, first[..., None], 1, axis=-1)
    onehot = onehot.reshape([x.shape[a] for a in keep] + [x.shape[a] for a in axes])
    inv = np.argsort(keep + list(axes))
    onehot = np.transpose(onehot, inv)
    return (onehot * _expand(g, node),)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return reduce("sum", x, axis, keepdims)


def mean(x, axis=None, keepdims=False):
    return reduce("mean", x, axis, keepdims)


def max(x, axis=None, keepdims=False):  # noqa: A001
    return reduce("max", x, axis, keepdims)


# ---------------------------------------------------------------------------
# Shape ops


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = math.prod(s for s in shape if s != -1)
        if known == 0 or x.size % known:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    return primitive("reshape", x.data.reshape(shape).copy(), (x,))


@register_backward("reshape")
def _reshape_bw(node, g):
    return (g.reshape(node.inputs[0].shape),)


def permute(x, order) -> Tensor:
    x = as_tensor(x)
    order = tuple(int(o) % x.ndim if x.ndim else int(o) for o in order)
    if sorted(order) != list(range(x.ndim)):
        raise AxisError(f"{order} is not a permutation of {x.ndim} axes")
    return primitive("permute", np.ascontiguousarray(np.transpose(x.data, order)), (x,), order=order)


@register_backward("permute")
def _permute_bw(node, g):
    return (np.ascontiguousarray(np.transpose(g, np.argsort(node.ctx["order"]))),)


def getitem(x, idx) -> Tensor:
    """Index with any numpy index expression; the result is a copy."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data
    out = np.array(x.data[idx], copy=True)
    return primitive("getitem", out, (x,), idx=idx)


@register_backward("getitem")
def _getitem_bw(node, g):
    x = node.inputs[0]
    idx = node.ctx["idx"]
    gx = np.zeros_like(x.data)
    if _is_basic_index(idx):
        gx[idx] = g
    else:
        np.add.at(gx, idx, g)
    return (gx,)


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def pad(x, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad; ``widths`` holds one (before, after) pair per axis."""
    x = as_tensor(x)
    widths = [tuple(int(v) for v in w) for w in widths]
    if len(widths) != x.ndim or any(v < 0 for w in widths for v in w):
        raise ShapeError(f"bad pad widths {widths} for shape {x.shape}")
    if not any(v for w in widths for v in w):
        return x
    return primitive("pad", np.pad(x.data, widths), (x,), widths=widths)


@register_backward("pad")
def _pad_bw(node, g):
    sl = tuple(slice(b, g.shape[i] - a) for i, (b, a) in enumerate(node.ctx["widths"]))
    return (np.array(g[sl]),)


def roll(x, shifts: Sequence[int], axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shifts, axes = tuple(int(s) for s in shifts), tuple(int(a) for a in axes)
    if not any(s % x.shape[a] for s, a in zip(shifts, axes)):
        return primitive("roll", x.data.copy(), (x,), shifts=shifts, axes=axes)
    return primitive("roll", np.roll(x.data, shifts, axes), (x,), shifts=shifts, axes=axes)


@register_backward("roll")
def _roll_bw(node, g):
    return (np.roll(g, tuple(-s for s in node.ctx["shifts"]), node.ctx["axes"]),)


def add_n(tensors: Iterable[Tensor]) -> Tensor:
    """Sum same-shaped tensors independently of their order.

    Values are sorted elementwise before accumulation, so any permutation of
    the inputs gives a bit-identical result.
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"add_n shape mismatch: {shape} vs {t.shape}")
    if len(tensors) == 1:
        return primitive("add_n", tensors[0].data.copy(), tensors)
    stack = np.sort(np.stack([t.data for t in tensors]), axis=0)
    out = stack[0].copy()
    for row in stack[1:]:
        out += row
    return primitive("add_n", out, tensors)


@register_backward("add_n")
def _add_n_bw(node, g):
    return tuple(g for _ in node.inputs)
