"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a contiguous numpy array plus an optional gradient
buffer. Differentiable operations record a backward closure and their
input tensors; ``backward()`` on a scalar walks the recorded graph once
in reverse topological order and accumulates ``grad`` additively on
every reachable tensor with ``requires_grad``.

Two precisions are supported: float64 for verification (gradient checks,
oracle comparisons) and float32 for training throughput. Ops preserve
the dtype of their inputs.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "add",
    "matmul",
    "softmax_rows",
    "reshape",
    "transpose2d",
    "permute",
    "scale",
    "relu",
    "finite_diff_grad",
    "grad_error",
    "make_rng",
]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed``, split by ``stream`` ids.

    Distinct stream tuples yield statistically independent, reproducible
    streams, so samples, augmentation and parameter init never share state.
    """
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence(entropy=seed, spawn_key=stream))
    )


class Tensor:
    """N-dimensional array of reals with an autodiff slot.

    ``data`` is always a contiguous float numpy array. ``grad`` is lazily
    allocated with the same shape. ``requires_grad`` marks trainable
    leaves; outputs of ops inherit it from their inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _op: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d to 1-d; keep scalars 0-d
        self.data = arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = _prev
        self._op = _op

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Gradients accumulate (+=) across multiple uses of a tensor, so the
        caller is responsible for zeroing grads between optimization steps.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return relu(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _make(data, inputs, op, backward) -> Tensor:
    """Wrap an op result; record graph links only when a gradient can flow."""
    track = any(t.requires_grad or t._prev for t in inputs)
    out = Tensor(data, requires_grad=track, _prev=tuple(inputs) if track else (), _op=op)
    if track:
        out._backward = backward(out)
    return out


# -- elementwise and structural ops ------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. Equal shapes per the core contract; numpy
    broadcasting is additionally accepted for internal composition."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(out):
        def run(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(g, b.shape))
        return run

    return _make(data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(out):
        def run(g):
            _accumulate(a, _unbroadcast(g, a.shape))
            _accumulate(b, _unbroadcast(-g, b.shape))
        return run

    return _make(data, (a, b), "sub", bw)


def neg(a: Tensor) -> Tensor:
    def bw(out):
        return lambda g: _accumulate(a, -g)

    return _make(-a.data, (a,), "neg", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(out):
        def run(g):
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
        return run

    return _make(data, (a, b), "mul", bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(out):
        def run(g):
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        return run

    return _make(data, (a, b), "div", bw)


def scale(t: Tensor, s: Tensor) -> Tensor:
    """Multiply ``t`` by a one-element trainable parameter ``s``."""
    s = _as_tensor(s, t.dtype)
    if s.size != 1:
        raise DimensionError(f"scale: parameter must have one element, got shape {s.shape}")
    return mul(t, s)


def relu(t: Tensor) -> Tensor:
    def bw(out):
        return lambda g: _accumulate(t, g * (t.data > 0))

    return _make(np.maximum(t.data, 0), (t,), "relu", bw)


def exp(t: Tensor) -> Tensor:
    data = np.exp(t.data)

    def bw(out):
        return lambda g: _accumulate(t, g * data)

    return _make(data, (t,), "exp", bw)


def log(t: Tensor) -> Tensor:
    def bw(out):
        return lambda g: _accumulate(t, g / t.data)

    return _make(np.log(t.data), (t,), "log", bw)


def sqrt(t: Tensor) -> Tensor:
    data = np.sqrt(t.data)

    def bw(out):
        return lambda g: _accumulate(t, g * (0.5 / data))

    return _make(data, (t,), "sqrt", bw)


def reshape(t: Tensor, new_shape) -> Tensor:
    new_shape = tuple(int(x) for x in new_shape)
    if int(np.prod(new_shape)) != t.size:
        raise DimensionError(f"reshape: {t.shape} has {t.size} elements, target {new_shape}")
    old_shape = t.shape

    def bw(out):
        return lambda g: _accumulate(t, g.reshape(old_shape))

    return _make(t.data.reshape(new_shape), (t,), "reshape", bw)


def transpose2d(m: Tensor) -> Tensor:
    if m.data.ndim != 2:
        raise DimensionError(f"transpose2d expects a matrix, got shape {m.shape}")

    def bw(out):
        return lambda g: _accumulate(m, g.T)

    return _make(m.data.T.copy(), (m,), "transpose2d", bw)


def permute(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.data.ndim)):
        raise DimensionError(f"permute: axes {axes} invalid for shape {t.shape}")
    inv = np.argsort(axes)

    def bw(out):
        return lambda g: _accumulate(t, g.transpose(inv))

    return _make(t.data.transpose(axes).copy(), (t,), "permute", bw)


def reduce_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = t.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, t.data.ndim)

    def bw(out):
        def run(g):
            if not keepdims and axes is not None:
                g = np.expand_dims(g, axes)
            _accumulate(t, np.broadcast_to(g, t.shape).astype(t.dtype, copy=True))
        return run

    return _make(data, (t,), "sum", bw)


def reduce_mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.data.ndim)
    count = t.size if axes is None else int(np.prod([t.shape[a] for a in axes]))
    data = t.data.mean(axis=axis, keepdims=keepdims)

    def bw(out):
        def run(g):
            if not keepdims and axes is not None:
                g = np.expand_dims(g, axes)
            _accumulate(t, (np.broadcast_to(g, t.shape) / count).astype(t.dtype, copy=True))
        return run

    return _make(data, (t,), "mean", bw)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# -- matrix ops ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes must match."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(out):
        def run(g):
            _accumulate(a, g @ b.data.swapaxes(-1, -2))
            _accumulate(b, a.data.swapaxes(-1, -2) @ g)
        return run

    return _make(data, (a, b), "matmul", bw)


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis, with per-row max subtraction.

    Max subtraction is exact by shift invariance and keeps exp() in range.
    """
    if not np.isfinite(m.data).all():
        raise NumericError("softmax_rows: input contains NaN or inf")
    z = m.data - m.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(out):
        def run(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            _accumulate(m, s * (g - dot))
        return run

    return _make(s, (m,), "softmax_rows", bw)


# -- verification oracle -------------------------------------------------------


def finite_diff_grad(f, t: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of scalar-valued ``f`` at ``t``.

    Perturbs one element at a time; ``f`` must be deterministic. This is
    the independent oracle gradient checks compare autodiff against.
    """
    if h <= 0:
        raise ContractError("finite_diff_grad: h must be positive")
    grad = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f(t))
        flat[i] = orig - h
        fm = _scalar(f(t))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(x) -> float:
    if isinstance(x, Tensor):
        return x.item()
    return float(x)


def grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / max(1, |a|, |n|): relative above 1, absolute below."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
