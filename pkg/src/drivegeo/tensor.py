"""Dense tensors with a reverse-mode gradient tape.

Storage is a numpy array (float32 for training, float64 for gradient
checks). Every primitive materializes its output, checks it for NaN/Inf,
and, when any input requires gradients, records a tape entry. Replaying
the tape in reverse order accumulates ``dLoss/dLeaf`` into each
requires-grad leaf. Reductions inherit numpy's fixed pairwise order, so
repeated runs on one build are bit-identical.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "tensor",
    "zeros",
    "ones",
    "backward",
    "clear_tape",
    "tape_size",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "broadcast_to",
    "tsum",
    "tmean",
    "exp",
    "log",
    "sqrt",
    "tabs",
    "tanh",
    "gelu",
    "clamp",
    "softmax",
    "layer_norm",
    "l2_normalize",
    "vector_norm",
]

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class TensorError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(TensorError, ValueError):
    """Operand shapes or dtypes do not conform."""


class NonFiniteError(TensorError, ArithmeticError):
    """A primitive produced NaN or Inf, or was fed an out-of-domain value."""


class TapeError(TensorError, RuntimeError):
    """Backward called on an empty or already-consumed tape."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    # min+max propagates NaN and turns mixed +/-inf into NaN; avoids a
    # full-size boolean temporary.
    if arr.size == 0:
        return
    probe = float(arr.min()) + float(arr.max())
    if not np.isfinite(probe):
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class Tensor:
    """N-dimensional real array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if isinstance(data, np.generic):  # 0-d results degrade to numpy scalars
            data = np.asarray(data)
        if not isinstance(data, np.ndarray):
            raise ShapeError("Tensor wraps a numpy array; use tensor() to build one")
        if data.dtype not in _DTYPE_NAMES:
            raise ShapeError(f"unsupported dtype {data.dtype}; expected float32/float64")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

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
    def dtype(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        """The raw array. Treat as read-only; tensors are immutable by contract."""
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def tensor(data, dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    """Build a Tensor from array-like data in the given precision."""
    if dtype not in DTYPES:
        raise ShapeError(f"unknown dtype {dtype!r}; expected 'f32' or 'f64'")
    arr = np.asarray(data, dtype=DTYPES[dtype])
    _check_finite(arr, "tensor")
    return Tensor(arr, requires_grad=requires_grad)


def zeros(shape: Sequence[int], dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


def ones(shape: Sequence[int], dtype: str = "f32", requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPES[dtype]), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class _Node:
    __slots__ = ("op", "output", "inputs", "vjp")

    def __init__(self, op: str, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.op = op
        self.output = output
        self.inputs = inputs
        # vjp(grad_out) -> tuple of grad arrays (or None) aligned with inputs
        self.vjp = vjp


class ComputationTape:
    """Ordered record of primitive applications, replayed in reverse."""

    def __init__(self):
        self.entries: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.entries.append(node)

    def clear(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_TAPE = ComputationTape()
_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / benchmarks)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def tape_size() -> int:
    return len(_TAPE)


def clear_tape() -> None:
    _TAPE.clear()


def _record(op: str, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        _TAPE.record(_Node(op, output, inputs, vjp))
    return output


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf into every requires-grad leaf, then clear the tape."""
    if loss.ndim != 0 and loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if len(_TAPE) == 0:
        raise TapeError("backward called with an empty tape (already consumed?)")

    produced = {id(n.output) for n in _TAPE.entries}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_TAPE.entries):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.vjp(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            _check_finite(gi, f"grad[{node.op}]")
            if id(inp) in produced:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
    _TAPE.clear()


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    arr = np.asarray(x, dtype=dtype)
    _check_finite(arr, "constant")
    return Tensor(arr)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = _as_tensor(b, like=a)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = _as_tensor(a, like=b)
    else:
        a, b = _as_tensor(a), _as_tensor(b)
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    return a, b


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data + b.data
    _check_finite(out_data, "add")
    out = Tensor(out_data)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _record("add", out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data - b.data
    _check_finite(out_data, "sub")
    out = Tensor(out_data)

    def vjp(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _record("sub", out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data * b.data
    _check_finite(out_data, "mul")
    out = Tensor(out_data)

    def vjp(g):
        return _sum_to_shape(g * b.data, a.shape), _sum_to_shape(g * a.data, b.shape)

    return _record("mul", out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data / b.data
    _check_finite(out_data, "div")
    out = Tensor(out_data)

    def vjp(g):
        ga = _sum_to_shape(g / b.data, a.shape)
        gb = _sum_to_shape(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _record("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def vjp(g):
        return (-g,)

    return _record("neg", out, (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    _check_finite(out_data, "matmul")
    out = Tensor(out_data)

    def vjp(g):
        ga = _sum_to_shape(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _sum_to_shape(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _record("matmul", out, (a, b), vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid transpose axes {axes} for ndim {a.ndim}")
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _record("transpose", out, (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data.reshape(shape)))
    old = a.shape

    def vjp(g):
        return (g.reshape(old),)

    return _record("reshape", out, (a,), vjp)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    if len({t.data.dtype for t in ts}) != 1:
        raise ShapeError("concat dtype mismatch")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    out = Tensor(out_data)
    ax = axis % out_data.ndim
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return _record("concat", out, tuple(ts), vjp)


def tslice(a: Tensor, key) -> Tensor:
    """Basic slicing (slices/ints); backward scatters into zeros."""
    a = _as_tensor(a)
    out_data = a.data[key]
    if not isinstance(out_data, np.ndarray):
        out_data = np.asarray(out_data, dtype=a.data.dtype)
    out = Tensor(np.ascontiguousarray(out_data))

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g.reshape(full[key].shape)
        return (full,)

    return _record("slice", out, (a,), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.ascontiguousarray(np.broadcast_to(a.data, tuple(shape))))

    def vjp(g):
        return (_sum_to_shape(g, a.shape),)

    return _record("broadcast", out, (a,), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)
    out_data = np.asarray(out_data, dtype=a.data.dtype)
    _check_finite(out_data, "sum")
    out = Tensor(out_data)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out_data = np.asarray(a.data.mean(axis=axes, keepdims=keepdims), dtype=a.data.dtype)
    _check_finite(out_data, "mean")
    out = Tensor(out_data)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record("mean", out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is caught by the finite check
        out_data = np.exp(a.data)
    _check_finite(out_data, "exp")
    out = Tensor(out_data)

    def vjp(g):
        return (g * out_data,)

    return _record("exp", out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.size and float(a.data.min()) <= 0.0:
        raise NonFiniteError("log of non-positive input")
    out_data = np.log(a.data)
    _check_finite(out_data, "log")
    out = Tensor(out_data)

    def vjp(g):
        return (g / a.data,)

    return _record("log", out, (a,), vjp)


def sqrt(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.size and float(a.data.min()) < 0.0:
        raise NonFiniteError("sqrt of negative input")
    out_data = np.sqrt(a.data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * (0.5 / out_data),)

    return _record("sqrt", out, (a,), vjp)


def tabs(a: Tensor) -> Tensor:
    """|x| with subgradient 0 at the origin."""
    a = _as_tensor(a)
    out = Tensor(np.abs(a.data))

    def vjp(g):
        return (g * np.sign(a.data),)

    return _record("abs", out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    out = Tensor(out_data)

    def vjp(g):
        return (g * (1.0 - out_data * out_data),)

    return _record("tanh", out, (a,), vjp)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation: 0.5*x*(1 + tanh(c*(x + k*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_K * x * x * x)
    th = np.tanh(u)
    out_data = 0.5 * x * (1.0 + th)
    _check_finite(out_data, "gelu")
    out = Tensor(out_data.astype(x.dtype, copy=False))

    def vjp(g):
        sech2 = 1.0 - th * th
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * du
        return ((g * d).astype(x.dtype, copy=False),)

    return _record("gelu", out, (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data >= lo) & (a.data <= hi)

    def vjp(g):
        return (g * inside,)

    return _record("clamp", out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=ax, keepdims=True)
    _check_finite(out_data, "softmax")
    out = Tensor(out_data.astype(a.data.dtype, copy=False))

    def vjp(g):
        dot = (g * out_data).sum(axis=ax, keepdims=True)
        return ((out_data * (g - dot)).astype(a.data.dtype, copy=False),)

    return _record("softmax", out, (a,), vjp)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Pre-affine normalization: (x - mean) / sqrt(var + eps) along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    mean = a.data.mean(axis=ax, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=ax, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    y = centered * inv_std
    _check_finite(y, "layer_norm")
    out = Tensor(y.astype(a.data.dtype, copy=False))

    def vjp(g):
        gm = g.mean(axis=ax, keepdims=True)
        gym = (g * y).mean(axis=ax, keepdims=True)
        gx = inv_std * (g - gm - y * gym)
        return (gx.astype(a.data.dtype, copy=False),)

    return _record("layer_norm", out, (a,), vjp)


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / max(||x||_2, eps) along one axis."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    n = np.maximum(n, eps)
    y = a.data / n
    out = Tensor(y.astype(a.data.dtype, copy=False))

    def vjp(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        return (((g - y * dot) / n).astype(a.data.dtype, copy=False),)

    return _record("l2_normalize", out, (a,), vjp)


def vector_norm(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """||x||_2 along one axis; subgradient at the origin is zero."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = np.sqrt((a.data * a.data).sum(axis=ax, keepdims=True))
    out_data = n if keepdims else np.squeeze(n, axis=ax)
    out = Tensor(np.ascontiguousarray(out_data))
    safe = np.maximum(n, np.finfo(a.data.dtype).tiny)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return ((g * (a.data / safe)).astype(a.data.dtype, copy=False),)

    return _record("vector_norm", out, (a,), vjp)
