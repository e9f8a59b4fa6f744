"""Dense tensors with define-by-run reverse-mode autodiff.

Storage is a contiguous row-major numpy buffer. Operations record themselves
on the active :class:`Tape` (if any) when at least one input requires a
gradient; outside a tape every op is a plain numpy computation. Slicing
copies, there are no strided views.

Elementwise binary ops follow numpy broadcasting and reduce gradients back to
operand shapes. Matmul broadcasts leading (batch) dimensions.
"""

from __future__ import annotations

import contextvars
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "quad2lin_active_tape", default=None
)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        # ascontiguousarray would promote 0-d arrays to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def copy(self) -> "Tensor":
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __pow__ = lambda self, p: power(self, p)  # noqa: E731

    def __getitem__(self, idx) -> "Tensor":
        return take(self, idx)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn
    name: str


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded. ``backward`` walks the records in exact reverse order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs, output: Tensor, backward: BackwardFn, name: str) -> None:
        output.node = len(self.records)
        output.tape = self
        output.requires_grad = True
        self.records.append(_Record(tuple(inputs), output, backward, name))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self or loss.node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            rec = self.records[idx]
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.tape is self and inp.node is not None:
                    prev = pending.get(inp.node)
                    pending[inp.node] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``."""
    tape = tape if tape is not None else loss.tape
    if tape is None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    tape.backward(loss)


def _result(data: np.ndarray, inputs: Sequence[Tensor], bw: BackwardFn, name: str) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(inputs, out, bw, name)
    return out


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a, b = _t(a), float(b)
        return _result(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if _is_scalar(a):
        return add(b, a)
    a, b = _t(a), _t(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -b)
    if _is_scalar(a):
        a, b = float(a), _t(b)
        return _result(a - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    a, b = _t(a), _t(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a, b = _t(a), float(b)
        return _result(a.data * b, (a,), lambda g: (g * b,), "mul_scalar")
    if _is_scalar(a):
        return mul(b, a)
    a, b = _t(a), _t(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    if _is_scalar(b):
        return mul(a, 1.0 / b)
    if _is_scalar(a):
        return mul(power(b, -1.0), a)
    a, b = _t(a), _t(b)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def neg(a) -> Tensor:
    return mul(a, -1.0)


def power(a, p: float) -> Tensor:
    a, p = _t(a), float(p)
    out = a.data**p
    return _result(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = _t(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _t(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = _t(a)
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def sigmoid(a) -> Tensor:
    a = _t(a)
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _t(a)
    s = _sigmoid(a.data)
    return _result(a.data * s, (a,), lambda g: (g * s * (1.0 + a.data * (1.0 - s)),), "silu")


def tanh(a) -> Tensor:
    a = _t(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _t(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))  # x**3 is far slower in float32
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), bw, "gelu")


def masked_fill(a, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where the constant ``mask`` is true by ``value``."""
    a = _t(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape),), "masked_fill")


# --- linear algebra / shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _t(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape) -> Tensor:
    a = _t(a)
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, idx) -> Tensor:
    """Basic indexing (ints and slices); the result is a copy."""
    a = _t(a)
    out = np.array(a.data[idx], copy=True)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _result(out, (a,), bw, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def cumsum(a, axis: int = -1) -> Tensor:
    a = _t(a)
    out = np.cumsum(a.data, axis=axis)
    return _result(
        out,
        (a,),
        lambda g: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
        "cumsum",
    )


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is a constant integer array."""
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(out, (table,), bw, "embedding")


# --- normalizations --------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    if not np.all(np.isfinite(a.data) | np.isneginf(a.data)) or np.any(np.isnan(a.data)):
        raise NumericError("softmax input contains NaN or +inf")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _result(
        out,
        (a,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
        "softmax",
    )


def softmax_rows(a) -> Tensor:
    """Row-wise softmax of a matrix with max subtraction."""
    return softmax(a, axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _t(a)
    if np.any(np.isnan(a.data)):
        raise NumericError("log_softmax input contains NaN")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _result(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def rms_norm(x, scale=None, eps: float = 1e-6) -> Tensor:
    """RMS normalization over the last axis with optional learned scale."""
    x = _t(x)
    inv = power(add(mean(mul(x, x), axis=-1, keepdims=True), eps), -0.5)
    y = mul(x, inv)
    return mul(y, scale) if scale is not None else y


# --- sequence ops ----------------------------------------------------------


def causal_depthwise_conv(x, kernel, bias) -> Tensor:
    """Depthwise causal convolution over the time axis (second to last).

    ``out[t, c] = bias[c] + sum_j kernel[j, c] * x[t - (w-1) + j, c]`` with
    positions before the start treated as zero.
    """
    x, kernel, bias = _t(x), _t(kernel), _t(bias)
    if kernel.ndim != 2 or kernel.shape[0] < 1:
        raise DimensionError(f"conv kernel must be (w>=1, C), got {kernel.shape}")
    C = x.shape[-1]
    if kernel.shape[1] != C or bias.shape != (C,):
        raise DimensionError(
            f"conv channel mismatch: x {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    w = kernel.shape[0]
    T = x.shape[-2]
    pad_shape = x.shape[:-2] + (w - 1, C)
    xp = np.concatenate([np.zeros(pad_shape, dtype=x.dtype), x.data], axis=-2)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(w):
        out += kernel.data[j] * xp[..., j : j + T, :]

    def bw(g):
        gx = gk = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(w):
                gxp[..., j : j + T, :] += kernel.data[j] * g
            gx = gxp[..., w - 1 :, :]
        if kernel.requires_grad:
            lead = tuple(range(g.ndim - 1))
            gk = np.stack([(xp[..., j : j + T, :] * g).sum(axis=lead) for j in range(w)])
        if bias.requires_grad:
            gb = g.reshape(-1, C).sum(axis=0)
        return gx, gk, gb

    return _result(out, (x, kernel, bias), bw, "causal_conv")


# --- gradient oracle -------------------------------------------------------


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives a fresh constant Tensor per evaluation and may return a
    Tensor or a float.
    """
    base = np.array(x.data, dtype=x.dtype, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def ev(arr):
        r = f(Tensor(arr.reshape(base.shape).copy()))
        return float(r.data.reshape(-1)[0]) if isinstance(r, Tensor) else float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = ev(flat)
        flat[i] = orig - h
        fm = ev(flat)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative discrepancy between two gradient arrays."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


# --- serialization ---------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def tensor_to_bytes(t) -> bytes:
    """Rank and dims as little-endian u64, then the little-endian scalar dump."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _DTYPES[arr.dtype.name]
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=code).tobytes()


def tensor_from_bytes(buf: bytes, dtype: str = "float32") -> np.ndarray:
    from .errors import CorruptionError

    if len(buf) < 8:
        raise CorruptionError("tensor blob shorter than its header")
    (rank,) = struct.unpack_from("<Q", buf, 0)
    if rank > 32 or len(buf) < 8 + 8 * rank:
        raise CorruptionError("tensor blob header is truncated or invalid")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    code = np.dtype(_DTYPES[dtype])
    count = int(np.prod(dims)) if rank else 1
    body = buf[8 + 8 * rank :]
    if len(body) != count * code.itemsize:
        raise CorruptionError(
            f"tensor blob has {len(body)} payload bytes, expected {count * code.itemsize}"
        )
    return np.frombuffer(body, dtype=code).reshape(dims).astype(code.newbyteorder("="))
