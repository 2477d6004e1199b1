"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is built dynamically: every operation on tensors that require
gradients records its parents and a backward closure.  ``Tensor.backward()``
walks the recorded operations once in reverse topological order, accumulates
gradients into every reachable leaf, and then consumes the graph; building a
fresh graph is required before differentiating again.

Storage is float32 everywhere; reductions and matrix products accumulate in
float64 before casting back.  Any operation whose output contains NaN or Inf
raises ``NumericsError`` instead of letting the values propagate.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import conv_kernels as _ck
from .errors import FormatError, NumericsError, ShapeError, TapeError
from .rng import Rng

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _finite_or_raise(data: np.ndarray, op: str) -> np.ndarray:
    # A float64-accumulated sum of float32 values cannot overflow, so a
    # non-finite total means a NaN/Inf entry; one fused reduce, no bool temp.
    if not np.isfinite(data.sum(dtype=np.float64)):
        raise NumericsError(f"op '{op}' produced non-finite values")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float32 array, optionally participating in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[], None]] = None
        self._consumed = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph construction ---------------------------------------------------

    def _accumulate(self, contribution: np.ndarray, owned: bool = False) -> None:
        """Add a gradient contribution; ``owned=True`` promises the array is
        freshly allocated and writeable, letting it be adopted without a copy."""
        contribution = contribution.astype(np.float32, copy=False)
        if self.grad is None:
            if owned and contribution.flags.writeable:
                self.grad = np.ascontiguousarray(contribution)
            else:
                self.grad = contribution.copy()
        else:
            self.grad += contribution

    def backward(self) -> None:
        """Populate ``grad`` on every requiring leaf; consumes the graph."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeError("backward() called twice on the same graph")
        if not self.requires_grad:
            raise TapeError("backward() on a tensor detached from any graph")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()
                node._backward = None
                node._parents = ()
                node._consumed = True
        self._consumed = True

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return _binop("add", self, other, lambda a, b: a + b, _bk_add)

    __radd__ = __add__

    def __sub__(self, other):
        return _binop("sub", self, other, lambda a, b: a - b, _bk_sub)

    def __rsub__(self, other):
        return _binop("sub", as_tensor(other), self, lambda a, b: a - b, _bk_sub)

    def __mul__(self, other):
        return _binop("mul", self, other, lambda a, b: a * b, _bk_mul)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binop("div", self, other, _safe_div, _bk_div)

    def __rtruediv__(self, other):
        return _binop("div", as_tensor(other), self, _safe_div, _bk_div)

    def __neg__(self):
        return _unop("neg", self, lambda a: -a, lambda x, y, g: -g)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("tensor ** exponent supports scalar exponents only")
        s = float(exponent)

        def fwd(a):
            with np.errstate(all="ignore"):
                return a**np.float32(s)

        return _unop("pow", self, fwd, lambda x, y, g: g * s * _pow_grad_base(x, s))

    def abs(self):
        return _unop("abs", self, np.abs, lambda x, y, g: g * np.sign(x))

    def exp(self):
        def fwd(a):
            with np.errstate(all="ignore"):
                return np.exp(a)

        return _unop("exp", self, fwd, lambda x, y, g: g * y)

    def log(self):
        def fwd(a):
            with np.errstate(all="ignore"):
                return np.log(a)

        return _unop("log", self, fwd, lambda x, y, g: g / x)

    def clamp(self, low: float, high: float):
        return _unop(
            "clamp",
            self,
            lambda a: np.clip(a, np.float32(low), np.float32(high)),
            lambda x, y, g: g * ((x >= low) & (x <= high)),
        )

    def sqrt(self):
        return self**0.5

    # -- activations ------------------------------------------------------------

    def relu(self):
        return _unop("relu", self, lambda a: np.maximum(a, 0), lambda x, y, g: g * (x > 0))

    def leaky_relu(self, slope: float = 0.2):
        s = np.float32(slope)
        return _unop(
            "leaky_relu",
            self,
            lambda a: np.where(a > 0, a, a * s),
            lambda x, y, g: g * np.where(x > 0, np.float32(1.0), s),
        )

    def sigmoid(self):
        def fwd(a):
            with np.errstate(all="ignore"):
                return 1.0 / (1.0 + np.exp(-a))

        return _unop("sigmoid", self, fwd, lambda x, y, g: g * y * (1.0 - y))

    def tanh(self):
        return _unop("tanh", self, np.tanh, lambda x, y, g: g * (1.0 - y * y))

    def softplus(self):
        return _unop(
            "softplus",
            self,
            lambda a: np.logaddexp(np.float32(0.0), a),
            lambda x, y, g: g / (1.0 + np.exp(-x)),
        )

    # -- linear algebra ----------------------------------------------------------

    def matmul(self, other: "Tensor"):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        out = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)

        def backward():
            g = out_t.grad.astype(np.float64)
            if self.requires_grad:
                self._accumulate(g @ b.astype(np.float64).T, owned=True)
            if other.requires_grad:
                other._accumulate(a.astype(np.float64).T @ g, owned=True)

        out_t = _make_op("matmul", out, (self, other), backward)
        return out_t

    __matmul__ = matmul

    # -- reductions ---------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        axis_t = _norm_axes(axis, self.ndim)
        out = self.data.sum(axis=axis_t, keepdims=keepdims, dtype=np.float64)
        out = np.asarray(out, dtype=np.float32)

        def backward():
            g = out_t.grad
            if not keepdims and axis_t is not None:
                g = np.expand_dims(g, axis_t)
            self._accumulate(np.broadcast_to(g, self.shape))

        out_t = _make_op("sum", out, (self,), backward)
        return out_t

    def mean(self, axis=None, keepdims: bool = False):
        axis_t = _norm_axes(axis, self.ndim)
        out = self.data.mean(axis=axis_t, keepdims=keepdims, dtype=np.float64)
        out = np.asarray(out, dtype=np.float32)
        count = self.size if axis_t is None else int(
            np.prod([self.shape[a] for a in axis_t])
        )

        def backward():
            g = out_t.grad
            if not keepdims and axis_t is not None:
                g = np.expand_dims(g, axis_t)
            self._accumulate(
                np.broadcast_to(g, self.shape) / np.float32(count), owned=True
            )

        out_t = _make_op("mean", out, (self,), backward)
        return out_t

    def max(self, axis: Optional[int] = None, keepdims: bool = False):
        if axis is None:
            out = np.asarray(self.data.max(), dtype=np.float32)
            flat_idx = int(np.argmax(self.data))

            def backward():
                mask = np.zeros(self.size, dtype=np.float32)
                mask[flat_idx] = 1.0
                self._accumulate(out_t.grad * mask.reshape(self.shape), owned=True)

        else:
            out = np.asarray(self.data.max(axis=axis, keepdims=keepdims), np.float32)
            arg = np.argmax(self.data, axis=axis)

            def backward():
                g = out_t.grad
                if not keepdims:
                    g = np.expand_dims(g, axis)
                mask = np.zeros(self.shape, dtype=np.float32)
                np.put_along_axis(mask, np.expand_dims(arg, axis), 1.0, axis=axis)
                self._accumulate(mask * g, owned=True)

        out_t = _make_op("max", out, (self,), backward)
        return out_t

    # -- shape manipulation ----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        new = self.data.reshape(shape)

        def backward():
            self._accumulate(out_t.grad.reshape(self.shape))

        out_t = _make_op("reshape", new, (self,), backward)
        return out_t

    def flatten_batch(self):
        """[B, ...] -> [B, rest], keeping the leading batch axis."""
        return self.reshape(self.shape[0], -1)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _safe_div(a, b):
    with np.errstate(all="ignore"):
        return a / b


def _pow_grad_base(x, s):
    with np.errstate(all="ignore"):
        return x ** np.float32(s - 1.0)


def _make_op(name: str, data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Wrap raw output data as a Tensor, recording the op if the tape is live."""
    data = _finite_or_raise(np.asarray(data, dtype=np.float32), name)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def custom_op(name: str, data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Hook for other modules to register differentiable ops on the tape.

    ``backward`` is a closure of no arguments, reading the returned tensor's
    ``grad`` and calling ``_accumulate`` on the parents (see wavelet module).
    """
    return _make_op(name, data, tuple(parents), backward)


def _binop(name, a, b, fwd, bk):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"op '{name}' on shapes {a.shape} and {b.shape}") from exc

    def backward():
        bk(a, b, out.grad)

    out = _make_op(name, data, (a, b), backward)
    return out


def _bk_add(a, b, g):
    if a.requires_grad:
        ga = _unbroadcast(g, a.shape)
        a._accumulate(ga, owned=ga is not g)
    if b.requires_grad:
        gb = _unbroadcast(g, b.shape)
        b._accumulate(gb, owned=gb is not g)


def _bk_sub(a, b, g):
    if a.requires_grad:
        ga = _unbroadcast(g, a.shape)
        a._accumulate(ga, owned=ga is not g)
    if b.requires_grad:
        b._accumulate(_unbroadcast(-g, b.shape), owned=True)


def _bk_mul(a, b, g):
    if a.requires_grad:
        a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
    if b.requires_grad:
        b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)


def _bk_div(a, b, g):
    if a.requires_grad:
        a._accumulate(_unbroadcast(g / b.data, a.shape), owned=True)
    if b.requires_grad:
        b._accumulate(
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape), owned=True
        )


def _unop(name, x, fwd, bk):
    try:
        data = fwd(x.data)
    except ValueError as exc:
        raise ShapeError(f"op '{name}' on shape {x.shape}") from exc

    def backward():
        if x.requires_grad:
            x._accumulate(
                np.asarray(bk(x.data, out.data, out.grad), dtype=np.float32),
                owned=True,
            )

    out = _make_op(name, data, (x,), backward)
    return out


# -- structural ops ------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat on shapes {[t.shape for t in tensors]}") from exc
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward():
        g = out.grad
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    out = _make_op("concat", data, tuple(tensors), backward)
    return out


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] outside extent {x.shape[axis]}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    data = x.data[tuple(index)]

    def backward():
        if x.requires_grad:
            g = np.zeros(x.shape, dtype=np.float32)
            g[tuple(index)] = out.grad
            x._accumulate(g, owned=True)

    out = _make_op("narrow", data, (x,), backward)
    return out


# -- convolution ------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of [B,Cin,H,W] with weight [Cout,Cin,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    data = _ck.conv_forward(x.data, weight.data, stride, pad)
    in_hw = x.shape[2:]
    kshape = weight.shape[2:]

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(
                _ck.conv_grad_input(g, weight.data, stride, pad, in_hw), owned=True
            )
        if weight.requires_grad:
            weight._accumulate(
                _ck.conv_grad_weight(g, x.data, stride, pad, kshape), owned=True
            )

    out = _make_op("conv2d", data, (x, weight), backward)
    return out


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of ``conv2d`` with the same geometry; weight is [Cin,Cout,kh,kw]."""
    x, weight = as_tensor(x), as_tensor(weight)
    cin, cout, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ShapeError(
            f"conv_transpose channel mismatch: input {x.shape[1]}, weight expects {cin}"
        )
    h_out = (x.shape[2] - 1) * stride + kh - 2 * pad
    w_out = (x.shape[3] - 1) * stride + kw - 2 * pad
    if h_out <= 0 or w_out <= 0:
        raise ShapeError("conv_transpose output extent is not positive")
    data = _ck.conv_grad_input(x.data, weight.data, stride, pad, (h_out, w_out))

    def backward():
        g = out.grad
        if x.requires_grad:
            x._accumulate(_ck.conv_forward(g, weight.data, stride, pad), owned=True)
        if weight.requires_grad:
            weight._accumulate(
                _ck.conv_grad_weight(x.data, g, stride, pad, (kh, kw)), owned=True
            )

    out = _make_op("conv_transpose2d", data, (x, weight), backward)
    return out


# -- sampling -----------------------------------------------------------------------------


def sample_normal(rng: Rng, shape) -> Tensor:
    """Standard-normal tensor of the given shape (Box-Muller, off the tape)."""
    return Tensor(rng.normal(shape).astype(np.float32))


# -- raw tensor file format ----------------------------------------------------------------

_MAGIC = b"WGT1"


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    if rank > 32:
        raise FormatError(f"implausible tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def save_tensor(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))
