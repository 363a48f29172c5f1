"""Segmentation model: dilated backbone at 1/8 resolution, attention
branches, sum fusion, auxiliary heads, multi-term loss, checkpoint I/O.

The backbone is four stages of (3x3 conv + BN + ReLU) pairs. The three
stride-2 convs sit in the first two stages; stages three and four keep
stride 1 and use dilations 2 and 4 instead, so features stay at 1/8 of
the input while the receptive field keeps growing. An optional dilation
ladder replaces the final stage's convs with one conv per listed rate.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionMap, ChannelAttention, FusionParams, PositionAttention, fuse
from .errors import ConfigError, ContractError, DimensionError
from .nn import Conv2d, ConvBNReLU, Module, cross_entropy, upsample_bilinear
from .tensor import Tensor, make_rng

VARIANTS = ("baseline_fcn", "pam_only", "cam_only", "dual")

CHECKPOINT_MAGIC = b"DSEGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_classes: int = 6
    backbone_channels: tuple = (32, 64, 128, 256)
    module_channels: int = 64
    reduction_ratio: int = 8
    multi_grid: tuple | None = None
    variant: str = "dual"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if len(self.backbone_channels) != 4:
            raise ConfigError("backbone_channels must list four stage widths")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.multi_grid is not None:
            if len(self.multi_grid) == 0 or any(d < 1 for d in self.multi_grid):
                raise ConfigError(f"multi_grid entries must be >= 1, got {self.multi_grid}")
        if self.module_channels < 1 or self.reduction_ratio < 1:
            raise ConfigError("module_channels and reduction_ratio must be positive")


@dataclass
class ModelOutput:
    main_logits: Tensor
    aux_logits: list = field(default_factory=list)
    attention_maps: tuple[AttentionMap | None, AttentionMap | None] | None = None


class Backbone(Module):
    """Dilated conv stack; output spatial extent is exactly input/8."""

    def __init__(self, channels, multi_grid, rng, dtype):
        c0, c1, c2, c3 = channels
        self.stage1 = [ConvBNReLU(3, c0, stride=2, rng=rng, dtype=dtype),
                       ConvBNReLU(c0, c0, stride=2, rng=rng, dtype=dtype)]
        self.stage2 = [ConvBNReLU(c0, c1, stride=2, rng=rng, dtype=dtype),
                       ConvBNReLU(c1, c1, rng=rng, dtype=dtype)]
        self.stage3 = [ConvBNReLU(c1, c2, dilation=2, rng=rng, dtype=dtype),
                       ConvBNReLU(c2, c2, dilation=2, rng=rng, dtype=dtype)]
        if multi_grid:
            dims = [c2] + [c3] * len(multi_grid)
            self.stage4 = [ConvBNReLU(dims[i], dims[i + 1], dilation=d, rng=rng, dtype=dtype)
                           for i, d in enumerate(multi_grid)]
        else:
            self.stage4 = [ConvBNReLU(c2, c3, dilation=4, rng=rng, dtype=dtype),
                           ConvBNReLU(c3, c3, dilation=4, rng=rng, dtype=dtype)]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        for stage in (self.stage1, self.stage2, self.stage3, self.stage4):
            for block in stage:
                x = block(x, training)
        return x


class SegmentationModel(Module):
    """Variant-configurable segmentation network.

    dual:         two branches (position / channel attention), sum fusion,
                  one auxiliary 1x1 head per branch.
    pam_only /
    cam_only:     the single corresponding branch, no auxiliary heads.
    baseline_fcn: the position branch's convs without the attention module.
    """

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        k = cfg.num_classes
        m = cfg.module_channels
        cb = cfg.backbone_channels[-1]
        self.backbone = Backbone(cfg.backbone_channels, cfg.multi_grid, rng, dtype)

        has_pam = cfg.variant in ("dual", "pam_only", "baseline_fcn")
        has_cam = cfg.variant in ("dual", "cam_only")
        if has_pam:
            self.stem_p = ConvBNReLU(cb, m, rng=rng, dtype=dtype)
            if cfg.variant != "baseline_fcn":
                self.pam = PositionAttention(m, cfg.reduction_ratio, rng=rng, dtype=dtype)
            self.post_p = ConvBNReLU(m, m, rng=rng, dtype=dtype)
        if has_cam:
            self.stem_c = ConvBNReLU(cb, m, rng=rng, dtype=dtype)
            self.cam = ChannelAttention(dtype=dtype)
            self.post_c = ConvBNReLU(m, m, rng=rng, dtype=dtype)
        if cfg.variant == "dual":
            self.aux_p = Conv2d(m, k, 1, rng=rng, dtype=dtype)
            self.aux_c = Conv2d(m, k, 1, rng=rng, dtype=dtype)
        self.conv_out = Conv2d(m, k, 1, rng=rng, dtype=dtype)

    def fusion_params(self) -> FusionParams:
        return FusionParams(self.post_p, self.post_c, self.conv_out)

    def forward(self, images: Tensor, training: bool = False,
                capture_attention: bool = False) -> ModelOutput:
        n, c, h, w = images.shape
        if c != 3:
            raise DimensionError(f"forward: expected 3 input channels, got {c}")
        if h % 8 or w % 8:
            raise DimensionError(f"forward: input extents {h}x{w} must be divisible by 8")
        feats = self.backbone(images, training)
        variant = self.cfg.variant
        s_map = x_map = None
        aux = []

        if variant == "baseline_fcn":
            fused = self.post_p(self.stem_p(feats, training), training)
        elif variant == "pam_only":
            e_p, s_map = self.pam(self.stem_p(feats, training))
            fused = self.post_p(e_p, training)
        elif variant == "cam_only":
            e_c, x_map = self.cam(self.stem_c(feats, training))
            fused = self.post_c(e_c, training)
        else:
            e_p, s_map = self.pam(self.stem_p(feats, training))
            e_c, x_map = self.cam(self.stem_c(feats, training))
            bp = self.post_p(e_p, training)
            bc = self.post_c(e_c, training)
            fused = bp + bc
            aux = [upsample_bilinear(self.aux_p(bp), h, w),
                   upsample_bilinear(self.aux_c(bc), h, w)]

        main = upsample_bilinear(self.conv_out(fused), h, w)
        maps = (s_map, x_map) if capture_attention else None
        return ModelOutput(main_logits=main, aux_logits=aux, attention_maps=maps)

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> SegmentationModel:
    """Deterministically initialized model: same (cfg, seed) gives identical bits."""
    return SegmentationModel(cfg, make_rng(seed, 0), dtype=dtype)


def multi_loss(out: ModelOutput, labels: np.ndarray, aux_weight: float = 0.5,
               ignore_index: int = 255) -> Tensor:
    """cross_entropy(main) + aux_weight * sum of auxiliary-head cross entropies."""
    if aux_weight < 0:
        raise ContractError(f"aux_weight must be nonnegative, got {aux_weight}")
    loss = cross_entropy(out.main_logits, labels, ignore_index)
    for aux in out.aux_logits:
        loss = loss + cross_entropy(aux, labels, ignore_index) * aux_weight
    return loss


# -- checkpoint container -------------------------------------------------------
#
# Layout: 8-byte magic, u32 LE header length, UTF-8 JSON header, then the raw
# little-endian array payloads back to back. The header lists every entry's
# name, shape, dtype and byte offset into the payload region.


def save_checkpoint(path, model: Module, meta: dict | None = None):
    entries = []
    blobs = []
    offset = 0
    for name, arr in model.state_arrays():
        a = np.ascontiguousarray(arr)
        code = {"float32": "<f4", "float64": "<f8"}[a.dtype.name]
        raw = a.astype(code).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": code,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {},
                         "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns ({name: array}, meta)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        if header["version"] != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {header['version']}")
        payload = fh.read()
    state = {}
    for e in header["entries"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return state, header["meta"]
