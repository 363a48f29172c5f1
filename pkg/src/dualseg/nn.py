"""Neural-network layers: dilated 2-D convolution, batch norm, bilinear
upsampling and pixel-wise cross-entropy, plus a minimal module system.

Convolution is cross-correlation (no kernel flip) and is lowered to a
single GEMM per batch via a kh*kw strided gather, which keeps the one
heavy op on the BLAS path. All backward rules are validated against
central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor, _accumulate, _make, div, reshape, sqrt

IGNORE_INDEX = 255

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


# -- functional ops -----------------------------------------------------------


def conv_out_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """Cross-correlate ``x`` [n,c,h,w] with ``weight`` [oc,ic,kh,kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: need 4-D input/weight, got {x.shape} / {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise DimensionError(f"conv2d: input has {c} channels, weight expects {ic}")
    oh = conv_out_extent(h, kh, stride, padding, dilation)
    ow = conv_out_extent(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: nonpositive output extent {oh}x{ow} for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {padding}, dilation {dilation}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for ki in range(kh):
        i0 = ki * dilation
        for kj in range(kw):
            j0 = kj * dilation
            col[:, :, ki, kj] = xp[:, :, i0:i0 + (oh - 1) * stride + 1:stride,
                                   j0:j0 + (ow - 1) * stride + 1:stride]
    colm = col.reshape(n, c * kh * kw, oh * ow)
    wm = weight.data.reshape(oc, -1)
    y = (wm @ colm).reshape(n, oc, oh, ow)
    if bias is not None:
        y = y + bias.data.reshape(1, oc, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(out):
        def run(g):
            gm = g.reshape(n, oc, oh * ow)
            _accumulate(weight, (gm @ colm.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape))
            if bias is not None:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                dcol = (wm.T @ gm).reshape(n, c, kh, kw, oh, ow)
                dxp = np.zeros_like(xp)
                for ki in range(kh):
                    i0 = ki * dilation
                    for kj in range(kw):
                        j0 = kj * dilation
                        dxp[:, :, i0:i0 + (oh - 1) * stride + 1:stride,
                            j0:j0 + (ow - 1) * stride + 1:stride] += dcol[:, :, ki, kj]
                _accumulate(x, dxp[:, :, padding:padding + h, padding:padding + w])
        return run

    return _make(y, inputs, "conv2d", bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over (n, h, w).

    Training mode normalizes with batch statistics and updates the running
    buffers in place by exponential moving average; eval mode is a fixed
    affine map from the running statistics.
    """
    if x.data.ndim != 4 or x.shape[1] != gamma.size:
        raise DimensionError(f"batch_norm: input {x.shape} vs {gamma.size} channels")
    c = x.shape[1]
    g4 = reshape(gamma, (1, c, 1, 1))
    b4 = reshape(beta, (1, c, 1, 1))
    if training:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        xhat = div(centered, sqrt(var + eps))
        ns = x.size // c
        bvar = var.data.reshape(c)
        unbiased = bvar * (ns / (ns - 1)) if ns > 1 else bvar
        running_mean *= (1.0 - momentum)
        running_mean += momentum * mean.data.reshape(c)
        running_var *= (1.0 - momentum)
        running_var += momentum * unbiased
        return g4 * xhat + b4
    rm = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype))
    rinv = Tensor((1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype))
    return g4 * ((x - rm) * rinv) + b4


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize (align_corners=False) of [n,c,h,w] to (out_h, out_w).

    Separable: out = R @ x @ C^T with dense interpolation matrices, so the
    op is exactly linear and its transpose is the gradient.
    """
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"upsample_bilinear: bad target extents {out_h}x{out_w}")
    n, c, h, w = x.shape
    rmat = interp_matrix(h, out_h, x.dtype)
    cmat = interp_matrix(w, out_w, x.dtype)
    y = np.einsum("oi,ncij,pj->ncop", rmat, x.data, cmat, optimize=True)

    def bw(out):
        def run(g):
            _accumulate(x, np.einsum("oi,ncop,pj->ncij", rmat, g, cmat, optimize=True))
        return run

    return _make(y, (x,), "upsample_bilinear", bw)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row-interpolation matrix M [n_out, n_in] for align_corners=False bilinear."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), (1.0 - frac).astype(dtype))
    np.add.at(m, (rows, hi), frac.astype(dtype))
    return m


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    """Nearest-neighbor source index per output position, same mapping as bilinear."""
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.round(src), 0, n_in - 1).astype(int)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    ``logits`` is [n,k,h,w]; ``labels`` an integer map [n,h,w] with values in
    [0, k) or equal to ``ignore_index``.
    """
    if logits.data.ndim != 4:
        raise DimensionError(f"cross_entropy: logits must be [n,k,h,w], got {logits.shape}")
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    if np.any((labels < 0) | ((labels >= k) & valid)):
        bad = labels[(labels < 0) | ((labels >= k) & valid)][0]
        raise ContractError(f"cross_entropy: label {bad} outside [0, {k}) and not ignore_index")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    count = int(valid.sum())
    loss = -(picked * valid).sum() / count if count else 0.0

    def bw(out):
        def run(g):
            if count == 0:
                return
            soft = np.exp(logp)
            onehot = np.zeros_like(soft)
            np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
            d = (soft - onehot) * (valid[:, None] / count)
            _accumulate(logits, d * g.reshape(()))
        return run

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), "cross_entropy", bw)


# -- module system -------------------------------------------------------------


class Module:
    """Base for parameterized blocks: recursive named parameters and buffers."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, np.ndarray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self):
        """Every named parameter and buffer as (name, ndarray), checkpoint order."""
        out = [(n, p.data) for n, p in self.named_parameters()]
        out += list(self.named_buffers())
        return out

    def load_state(self, state: dict):
        mine = {n: p for n, p in self.named_parameters()}
        bufs = dict(self.named_buffers())
        for name, arr in state.items():
            if name in mine:
                tgt = mine[name]
                if tuple(arr.shape) != tuple(tgt.shape):
                    raise DimensionError(f"load_state: {name} has shape {arr.shape}, expected {tgt.shape}")
                tgt.data = arr.astype(tgt.dtype)
            elif name in bufs:
                if arr.shape != bufs[name].shape:
                    raise DimensionError(f"load_state: buffer {name} shape {arr.shape}")
                bufs[name][...] = arr
            else:
                raise ContractError(f"load_state: unknown entry {name!r}")
        missing = (set(mine) | set(bufs)) - set(state)
        if missing:
            raise ContractError(f"load_state: missing entries {sorted(missing)}")


class Conv2d(Module):
    """Convolution parameters: weight [oc,ic,kh,kw], optional bias, geometry."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 padding: int = 0, dilation: int = 1, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        std = np.sqrt(2.0 / fan_in)
        if rng is None:
            w = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            w = (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std).astype(dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """3x3 conv (no bias) + batch norm + ReLU, the backbone/head building block."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, dilation: int = 1,
                 rng=None, dtype=np.float32):
        self.conv = Conv2d(in_ch, out_ch, 3, stride=stride, padding=dilation,
                           dilation=dilation, bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.bn(self.conv(x), training).relu()
