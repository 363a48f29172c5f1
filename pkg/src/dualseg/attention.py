"""Position and channel attention over convolutional feature maps.

Position attention re-expresses every spatial location as a softmax-weighted
sum of value features at all locations (weights from query/key similarity);
channel attention does the same across channel maps using the raw Gram
matrix of the input, with no embedding convolutions. Both add their result
back onto the input through a learned scalar that starts at zero, so each
module is exactly the identity at initialization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .nn import Conv2d, Module
from .tensor import Tensor, matmul, permute, reshape, scale, softmax_rows

ATTENTION_ROW_TOL = 1e-5


@dataclass
class AttentionMap:
    """Row-stochastic square attention matrix for batch element 0.

    ``kind`` is "spatial" (rows/cols index the H*W positions) or "channel"
    (rows/cols index channels). Row j holds the weights position/channel j
    uses to aggregate all others.
    """

    matrix: Tensor
    kind: str

    @property
    def extent(self) -> int:
        return self.matrix.shape[0]


class PositionAttention(Module):
    """Spatial self-attention with residual scaling.

    x: [n, C, H, W]
    query/key: [n, C/r, N]  (1x1 convs, N = H*W)
    value:     [n, C, N]    (1x1 conv)
    attention: [n, N, N], rows softmaxed
    out = alpha * value @ attention^T + x
    """

    def __init__(self, channels: int, reduction: int = 8, rng=None, dtype=np.float32):
        reduced = max(1, channels // reduction)
        self.conv_b = Conv2d(channels, reduced, 1, rng=rng, dtype=dtype)
        self.conv_c = Conv2d(channels, reduced, 1, rng=rng, dtype=dtype)
        self.conv_d = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)
        self.alpha = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> tuple[Tensor, AttentionMap]:
        n, c, h, w = x.shape
        npos = h * w
        reduced = self.conv_b.weight.shape[0]
        key = reshape(self.conv_b(x), (n, reduced, npos))
        query = reshape(self.conv_c(x), (n, reduced, npos))
        v = reshape(self.conv_d(x), (n, c, npos))
        energy = matmul(permute(query, (0, 2, 1)), key)    # [n, N, N], row j = query_j . keys
        s = softmax_rows(energy)
        agg = matmul(v, permute(s, (0, 2, 1)))             # [n, C, N]
        out = scale(reshape(agg, (n, c, h, w)), self.alpha) + x
        return out, AttentionMap(Tensor(s.data[0]), "spatial")


class ChannelAttention(Module):
    """Channel self-attention from the raw feature Gram matrix.

    No convolutions touch the input before the attention computation; the
    C x C map comes straight from flattened channel inner products.
    """

    def __init__(self, dtype=np.float32):
        self.beta = Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> tuple[Tensor, AttentionMap]:
        n, c, h, w = x.shape
        flat = reshape(x, (n, c, h * w))
        energy = matmul(flat, permute(flat, (0, 2, 1)))    # [n, C, C] Gram
        att = softmax_rows(energy)
        agg = matmul(att, flat)                            # [n, C, N]
        out = scale(reshape(agg, (n, c, h, w)), self.beta) + x
        return out, AttentionMap(Tensor(att.data[0]), "channel")


@dataclass
class FusionParams:
    """Per-branch output transforms and the final prediction conv.

    Each field is a callable block taking (x, training) or (x,); the model
    uses conv+BN+ReLU blocks for the branch transforms and a 1x1 conv for
    the prediction, but any conv-like callable satisfies the contract.
    """

    conv_pam: object
    conv_cam: object
    conv_out: object


def _apply(block, x: Tensor, training: bool) -> Tensor:
    try:
        return block(x, training)
    except TypeError:
        return block(x)


def fuse(e_pam: Tensor, e_cam: Tensor, p: FusionParams, training: bool = False) -> Tensor:
    """conv_out(conv_pam(e_pam) + conv_cam(e_cam)); the element-wise-sum fusion."""
    a = _apply(p.conv_pam, e_pam, training)
    b = _apply(p.conv_cam, e_cam, training)
    if a.shape != b.shape:
        raise DimensionError(f"fuse: branch shapes differ, {a.shape} vs {b.shape}")
    return _apply(p.conv_out, a + b, training)


def sub_attention_map(s: AttentionMap, point: tuple[int, int], h: int, w: int) -> Tensor:
    """One row of the spatial attention map, reshaped to [h, w].

    The result is what the chosen point attends to over the whole feature
    map; its entries sum to 1.
    """
    if s.kind != "spatial":
        raise ContractError(f"sub_attention_map needs a spatial map, got {s.kind!r}")
    row, col = point
    if not (0 <= row < h and 0 <= col < w):
        raise ContractError(f"point {point} outside [0,{h}) x [0,{w})")
    if h * w != s.extent:
        raise ContractError(f"h*w = {h * w} does not match attention extent {s.extent}")
    return Tensor(s.matrix.data[row * w + col].reshape(h, w))


def attended_channel_map(e_cam: Tensor, channel: int) -> Tensor:
    """Channel slice [H, W] of the channel-attention output, batch element 0."""
    c = e_cam.shape[1]
    if not 0 <= channel < c:
        raise ContractError(f"channel {channel} outside [0, {c})")
    return Tensor(e_cam.data[0, channel])
