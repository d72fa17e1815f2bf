"""Dense N-dimensional tensors with a recorded computation graph.

Every operation runs eagerly on a numpy array and appends a node to the
implicit tape (the graph of parent links + backward closures carried by the
output tensor).  ``Tensor.backward`` walks that tape once, in reverse
topological order, accumulating gradients into every tensor that requires
them.  Gradients sum across fan-out and across repeated ``backward`` calls;
call ``zero_grad`` between steps.

Canonical layout for volumetric data is (N, C, D, H, W), row-major with the
last axis fastest.  64-bit floats are the default and are used by all
gradient oracles; 32-bit is available for training.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, ShapeError

_FLOAT_DTYPES = (np.dtype("float32"), np.dtype("float64"))
_DTYPE_TO_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2}
_CODE_TO_DTYPE = {1: np.dtype("float32"), 2: np.dtype("float64")}

_MAGIC = b"NLT1"


class Tensor:
    """A dense real array plus the graph node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, op="leaf", parents=()):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = op
        self._parents = tuple(parents)
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def assert_finite(self, context=""):
        from .errors import NumericError

        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in tensor {context or self.op!r}")
        return self

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad tensor.

        The root must be scalar.  A second call without zeroing doubles the
        gradients (sum semantics).  The graph is acyclic by construction
        (define-by-run), so each node is visited exactly once.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward root must be scalar, got shape {self.data.shape}"
            )
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in flowing:
                    flowing[id(parent)] = flowing[id(parent)] + pg
                else:
                    flowing[id(parent)] = pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flags = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, op={self.op!r}{flags})"


def _coerce(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a_shape, b_shape):
    try:
        np.broadcast_shapes(a_shape, b_shape)
        return True
    except ValueError:
        return False


def _binary(a, b, op_name):
    b = _coerce(b, a)
    if not _broadcastable(a.shape, b.shape):
        raise ShapeError(
            f"{op_name}: shapes {a.shape} and {b.shape} are not compatible"
        )
    return b


def add(a, b):
    b = _binary(a, b, "add")
    out = Tensor(a.data + b.data, _needs_grad(a, b), "add", (a, b))
    out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return out


def sub(a, b):
    b = _binary(a, b, "sub")
    out = Tensor(a.data - b.data, _needs_grad(a, b), "sub", (a, b))
    out._backward = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    return out


def mul(a, b):
    b = _binary(a, b, "mul")
    out = Tensor(a.data * b.data, _needs_grad(a, b), "mul", (a, b))
    out._backward = lambda g: (
        _unbroadcast(g * b.data, a.shape),
        _unbroadcast(g * a.data, b.shape),
    )
    return out


def div(a, b):
    b = _binary(a, b, "div")
    out = Tensor(a.data / b.data, _needs_grad(a, b), "div", (a, b))
    out._backward = lambda g: (
        _unbroadcast(g / b.data, a.shape),
        _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
    )
    return out


def neg(a):
    out = Tensor(-a.data, a.requires_grad, "neg", (a,))
    out._backward = lambda g: (-g,)
    return out


def _restore_axes(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(in_shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def tsum(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad, "sum", (a,))
    out._backward = lambda g: (_restore_axes(g, a.shape, axis, keepdims).copy(),)
    return out


def tmean(a, axis=None, keepdims=False):
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims), a.requires_grad, "mean", (a,))
    count = a.data.size // out.data.size
    out._backward = lambda g: (
        _restore_axes(g, a.shape, axis, keepdims) / count,
    )
    return out


def relu(a):
    out = Tensor(np.maximum(a.data, 0), a.requires_grad, "relu", (a,))
    mask = a.data > 0
    out._backward = lambda g: (g * mask,)
    return out


def _sigmoid(x):
    # stable in both tails
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    z[~pos] = e / (1.0 + e)
    return z


def sigmoid(a):
    s = _sigmoid(a.data)
    out = Tensor(s, a.requires_grad, "sigmoid", (a,))
    out._backward = lambda g: (g * s * (1.0 - s),)
    return out


def sqrt(a):
    s = np.sqrt(a.data)
    out = Tensor(s, a.requires_grad, "sqrt", (a,))

    def back(g):
        # subgradient 0 at the non-differentiable origin
        safe = np.where(s > 0, s, 1.0)
        return (np.where(s > 0, g / (2.0 * safe), 0.0),)

    out._backward = back
    return out


def texp(a):
    e = np.exp(a.data)
    out = Tensor(e, a.requires_grad, "exp", (a,))
    out._backward = lambda g: (g * e,)
    return out


def tlog(a):
    out = Tensor(np.log(a.data), a.requires_grad, "log", (a,))
    out._backward = lambda g: (g / a.data,)
    return out


def reshape(a, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape), a.requires_grad, "reshape", (a,))
    out._backward = lambda g: (g.reshape(a.shape),)
    return out


def transpose(a, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(a.data.transpose(axes), a.requires_grad, "transpose", (a,))
    out._backward = lambda g: (g.transpose(inverse),)
    return out


def matmul(a, b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents {a.shape} @ {b.shape} differ")
    out = Tensor(np.matmul(a.data, b.data), _needs_grad(a, b), "matmul", (a, b))

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out._backward = back
    return out


# -- verification oracle ------------------------------------------------


def finite_difference_check(f, x, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and is re-executed per probe, so
    it must depend on ``x`` only through its current ``data``.  The relative
    error per component is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.zero_grad()
    x.requires_grad = True
    y = f(x)
    if y.data.size != 1:
        raise ShapeError(f"finite_difference_check: f returned shape {y.shape}")
    y.backward()
    analytic = x.grad.reshape(-1).astype(np.float64).copy()

    flat = x.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# -- binary container ---------------------------------------------------


def write_array(fh, arr):
    """Write one array in the NLT1 framing to an open binary file."""
    arr = np.asarray(arr)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    if arr.ndim > 255 or any(e > 0xFFFFFFFF for e in arr.shape):
        raise FormatError("array rank/extents exceed the container limits")
    fh.write(_MAGIC)
    fh.write(struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def read_array(fh):
    """Read one NLT1-framed array from an open binary file."""
    magic = fh.read(4)
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    header = fh.read(2)
    if len(header) != 2:
        raise FormatError("truncated tensor header")
    code, rank = struct.unpack("<BB", header)
    if code not in _CODE_TO_DTYPE:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _CODE_TO_DTYPE[code]
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", raw)
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated tensor payload")
    arr = np.frombuffer(payload, dtype=dtype.newbyteorder("<")).astype(dtype)
    return arr.reshape(shape)


def save_array(path, arr):
    with open(path, "wb") as fh:
        write_array(fh, arr)


def load_array(path):
    with open(path, "rb") as fh:
        return read_array(fh)
