"""Procedural segmentation scenes with a designed long-range dependency.

Each scene is built from three ingredients on a dark background:

* easy shapes: discs and rectangles in distinct solid colors, one class
  per color, decidable from local appearance alone;
* one ambiguous region: a gray checkerboard texture whose local
  statistics are identical for two different class ids;
* a 4x4 corner marker whose color (yellow or magenta) is the only
  signal deciding which of the two ids the ambiguous texture gets.

A predictor that never looks at the marker can at best coin-flip the
ambiguous region, which gives attention-vs-baseline comparisons a real
effect to measure. Images are [3,H,W] floats in [0,1]; labels are int
maps [H,W] with background 0.

Also here: joint crop/flip and rescale augmentation, binary PPM/PGM
image I/O, and dataset dumps with a manifest.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .nn import interp_matrix, nearest_index
from .tensor import make_rng

MARKER_RULES = ("corner_fixed", "corner_random", "none")
MARKER_SIZE = 4

BG_COLOR = (0.12, 0.12, 0.14)
CHECKER_VALUES = (0.35, 0.70)
MARKER_COLORS = ((1.00, 0.90, 0.10), (0.95, 0.10, 0.90))
EASY_COLORS = (
    (0.85, 0.15, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.35, 0.90),
    (0.90, 0.55, 0.10),
    (0.10, 0.70, 0.70),
    (0.55, 0.25, 0.75),
    (0.70, 0.70, 0.25),
    (0.50, 0.50, 0.50),
)


@dataclass
class SceneConfig:
    image_size: tuple = (64, 64)
    num_classes: int = 6
    num_shapes: tuple = (3, 6)
    marker_rule: str = "corner_fixed"
    noise_std: float = 0.02
    ambiguous_extent: tuple = (14, 22)

    def validate(self):
        h, w = self.image_size
        if h % 8 or w % 8:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 8")
        if h < 16 or w < 16:
            raise ConfigError("image_size must be at least 16x16")
        if self.num_classes < 3:
            raise ConfigError("num_classes must be at least 3 (background + ambiguous pair)")
        if self.marker_rule not in MARKER_RULES:
            raise ConfigError(f"marker_rule {self.marker_rule!r} not in {MARKER_RULES}")
        lo, hi = self.num_shapes
        if lo < 0 or hi < lo:
            raise ConfigError(f"num_shapes range {self.num_shapes} invalid")
        alo, ahi = self.ambiguous_extent
        if alo < 4 or ahi < alo or ahi > min(h, w):
            raise ConfigError(f"ambiguous_extent {self.ambiguous_extent} invalid for "
                              f"image_size {self.image_size}")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")

    @property
    def ambiguous_classes(self) -> tuple:
        return (self.num_classes - 2, self.num_classes - 1)


@dataclass
class SegSample:
    image: np.ndarray
    labels: np.ndarray


def _paint(image, labels, mask, color, class_id):
    for ch in range(3):
        image[ch][mask] = color[ch]
    labels[mask] = class_id


def generate_sample(cfg: SceneConfig, seed: int) -> SegSample:
    """Pure function of (cfg, seed); see the module docstring for layout.

    The random bit choosing the ambiguous class id touches nothing but
    the marker color and the label id, so both outcomes share exactly
    the same texture distribution.
    """
    cfg.validate()
    rng = make_rng(seed, 1)
    h, w = cfg.image_size
    k = cfg.num_classes
    image = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        image[ch] = BG_COLOR[ch]
    labels = np.zeros((h, w), dtype=np.int64)
    rr, cc = np.mgrid[0:h, 0:w]

    n_shapes = int(rng.integers(cfg.num_shapes[0], cfg.num_shapes[1] + 1))
    if n_shapes > 0:
        n_easy_classes = k - 3
        for _ in range(max(0, n_shapes - 1) if n_easy_classes else 0):
            cls = 1 + int(rng.integers(0, n_easy_classes))
            color = EASY_COLORS[(cls - 1) % len(EASY_COLORS)]
            kind = int(rng.integers(0, 2))
            cy = int(rng.integers(0, h))
            cx = int(rng.integers(0, w))
            half = int(rng.integers(4, 11))
            if kind == 0:
                mask = (rr - cy) ** 2 + (cc - cx) ** 2 <= half ** 2
            else:
                half2 = int(rng.integers(4, 11))
                mask = (np.abs(rr - cy) <= half) & (np.abs(cc - cx) <= half2)
            _paint(image, labels, mask, color, cls)

        alo, ahi = cfg.ambiguous_extent
        alo, ahi = min(alo, min(h, w)), min(ahi, min(h, w))
        rh = int(rng.integers(alo, ahi + 1))
        rw = int(rng.integers(alo, ahi + 1))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        phase = int(rng.integers(0, 2))
        bit = int(rng.integers(0, 2))

        local_r = rr[r0:r0 + rh, c0:c0 + rw] - r0
        local_c = cc[r0:r0 + rh, c0:c0 + rw] - c0
        checker = ((local_r // 2 + local_c // 2 + phase) % 2).astype(np.float64)
        tex = CHECKER_VALUES[0] + checker * (CHECKER_VALUES[1] - CHECKER_VALUES[0])
        for ch in range(3):
            image[ch, r0:r0 + rh, c0:c0 + rw] = tex

        if cfg.marker_rule == "none":
            labels[r0:r0 + rh, c0:c0 + rw] = cfg.ambiguous_classes[0]
        else:
            labels[r0:r0 + rh, c0:c0 + rw] = cfg.ambiguous_classes[bit]
            corner = 0 if cfg.marker_rule == "corner_fixed" else int(rng.integers(0, 4))
            m = MARKER_SIZE
            mr = 0 if corner in (0, 1) else h - m
            mc = 0 if corner in (0, 2) else w - m
            color = MARKER_COLORS[bit]
            for ch in range(3):
                image[ch, mr:mr + m, mc:mc + m] = color[ch]
            labels[mr:mr + m, mc:mc + m] = 0

    noise = rng.normal(0.0, 1.0, size=(3, h, w))
    image = np.clip(image + cfg.noise_std * noise, 0.0, 1.0)
    return SegSample(image=image, labels=labels)


def generate_dataset(cfg: SceneConfig, count: int, base_seed: int) -> list:
    """``count`` samples with per-sample seeds base_seed, base_seed+1, ..."""
    return [generate_sample(cfg, base_seed + i) for i in range(count)]


def marker_blind_accuracy_bound(cfg: SceneConfig, samples: int = 256, seed: int = 0) -> float:
    """Expected pixel-accuracy ceiling for predictors that ignore the marker.

    Ambiguous-region pixels carry one fair bit the rest of the image does
    not determine, so such a predictor gets at most half of them right in
    expectation; everything else is assumed perfectly classified. With
    marker_rule "none" there is no hidden bit and the bound is 1.
    """
    cfg.validate()
    if cfg.marker_rule == "none":
        return 1.0
    lo = cfg.ambiguous_classes[0]
    frac = 0.0
    for i in range(samples):
        s = generate_sample(cfg, seed + i)
        frac += float(np.mean(s.labels >= lo))
    frac /= samples
    return 1.0 - 0.5 * frac


# -- augmentation ----------------------------------------------------------------


def augment(s: SegSample, crop: tuple, flip_prob: float, rng) -> SegSample:
    """One random crop window and one flip decision, applied jointly."""
    ch, cw = crop
    h, w = s.labels.shape
    if ch > h or cw > w:
        raise ContractError(f"augment: crop {crop} exceeds image extents {(h, w)}")
    r0 = int(rng.integers(0, h - ch + 1))
    c0 = int(rng.integers(0, w - cw + 1))
    image = s.image[:, r0:r0 + ch, c0:c0 + cw]
    labels = s.labels[r0:r0 + ch, c0:c0 + cw]
    if rng.random() < flip_prob:
        image = image[:, :, ::-1]
        labels = labels[:, ::-1]
    return SegSample(image=np.ascontiguousarray(image), labels=np.ascontiguousarray(labels))


def scale_augment(s: SegSample, factor: float, min_extent: int = 8) -> SegSample:
    """Bilinear image resize by ``factor``; labels resized nearest-neighbor."""
    if factor <= 0:
        raise ContractError(f"scale_augment: factor must be positive, got {factor}")
    h, w = s.labels.shape
    nh, nw = int(round(h * factor)), int(round(w * factor))
    if nh < min_extent or nw < min_extent:
        raise ContractError(
            f"scale_augment: result {nh}x{nw} below minimum extent {min_extent}")
    rmat = interp_matrix(h, nh, np.float64)
    cmat = interp_matrix(w, nw, np.float64)
    image = np.einsum("oi,nij,pj->nop", rmat, s.image, cmat, optimize=True)
    labels = s.labels[np.ix_(nearest_index(h, nh), nearest_index(w, nw))]
    return SegSample(image=np.ascontiguousarray(image),
                     labels=np.ascontiguousarray(labels))


def quantize_to_byte(arr: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 255] with round-half-up: floor((v-lo)/(hi-lo)*255 + 0.5).

    A constant map quantizes to all zeros.
    """
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.floor((arr - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


# -- binary PPM / PGM ------------------------------------------------------------


def write_ppm(path, image: np.ndarray):
    """[3,H,W] floats in [0,1] as binary PPM (P6), 8 bits per channel."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ContractError(f"write_ppm: expected [3,H,W], got {image.shape}")
    q = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(q.transpose(1, 2, 0).tobytes())


def write_pgm(path, values: np.ndarray):
    """[H,W] integer map (class ids or gray levels) as binary PGM (P5)."""
    if values.ndim != 2:
        raise ContractError(f"write_pgm: expected [H,W], got {values.shape}")
    if values.min() < 0 or values.max() > 255:
        raise ContractError("write_pgm: values must lie in [0, 255]")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(values.astype(np.uint8).tobytes())


def _read_pnm_header(fh, magic):
    if fh.read(2) != magic:
        raise ContractError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = fh.read(1)
        while ch.isspace():
            ch = fh.read(1)
        if ch == b"#":
            fh.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = fh.read(1)
        if not token.isdigit():
            raise ContractError(f"malformed {magic.decode()} header")
        fields.append(int(token))
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"unsupported maxval {maxval}, expected 255")
    return w, h


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P6")
        raw = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    if raw.size != w * h * 3:
        raise ContractError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        w, h = _read_pnm_header(fh, b"P5")
        raw = np.frombuffer(fh.read(w * h), dtype=np.uint8)
    if raw.size != w * h:
        raise ContractError(f"{path}: truncated pixel data")
    return raw.reshape(h, w).astype(np.int64)


def dump_dataset(directory, samples, prefix: str = "sample"):
    """Images as PPM, labels as PGM, plus manifest.csv listing the pairs."""
    os.makedirs(directory, exist_ok=True)
    rows = ["image,labels"]
    for i, s in enumerate(samples):
        img_name = f"{prefix}_{i:05d}.ppm"
        lab_name = f"{prefix}_{i:05d}.pgm"
        write_ppm(os.path.join(directory, img_name), s.image)
        write_pgm(os.path.join(directory, lab_name), s.labels)
        rows.append(f"{img_name},{lab_name}")
    manifest = os.path.join(directory, "manifest.csv")
    with open(manifest, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return manifest
