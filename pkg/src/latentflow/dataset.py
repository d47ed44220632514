"""Synthetic shape dataset and the LFDS binary container.

Samples are 16x16x3 renders of 8 parametric shape families; the class
label is the family, and the raw generator parameters (kind, center,
scale, hue, background) are kept alongside the pixels so the shapeparam
latent encoder can use them. Rendering is a pure function of the
parameters, and generation is a pure function of (n, seed), so files are
byte-identical across runs and platforms.

LFDS layout (all little-endian):
    magic 'LFDS', version u32, count u32, H u16, W u16, C u16, num_classes u16
    per sample: label u16, then H*W*C pixel bytes (u8, 0..255 -> [-1, 1])

Raw generator parameters go in a '<path>.shapes' sidecar:
    magic 'LFSP', version u32, count u32, fields u16 (= 6), then count*6 f32
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .rng import stream

DATASET_MAGIC = b"LFDS"
SIDECAR_MAGIC = b"LFSP"
DATASET_VERSION = 1
SHAPE_FIELDS = 6

SHAPE_KINDS = ("disk", "square", "cross", "hbar", "vbar", "ring", "triangle", "checker")

# six saturated foreground colors, RGB in [-1, 1]
HUES = np.array(
    [
        [0.9, -0.4, -0.4],
        [-0.4, 0.9, -0.4],
        [-0.4, -0.4, 0.9],
        [0.9, 0.9, -0.4],
        [0.9, -0.4, 0.9],
        [-0.4, 0.9, 0.9],
    ]
)

_EDGE = 0.04  # soft edge width, keeps the data manifold smooth


@dataclass
class Dataset:
    images: np.ndarray           # (N, H, W, C) float32 in [-1, 1]
    labels: np.ndarray           # (N,) int
    num_classes: int
    shape_params: np.ndarray | None = None  # (N, 6) float32 raw generator rows

    def __len__(self):
        return self.images.shape[0]


def _soft_inside(dist, edge=_EDGE):
    """1 inside (dist < 0), 0 outside, linear ramp across the edge."""
    return np.clip(0.5 - dist / edge, 0.0, 1.0)


def render_shape(kind: int, cx: float, cy: float, scale: float, hue: int,
                 background: float, size: int = 16) -> np.ndarray:
    """Deterministic rasterizer; returns (size, size, 3) floats in [-1, 1]."""
    coords = (np.arange(size) + 0.5) / size
    v, u = np.meshgrid(coords, coords, indexing="ij")  # v is row/y, u is col/x
    du, dv = u - cx, v - cy
    r = np.sqrt(du**2 + dv**2)

    name = SHAPE_KINDS[kind]
    if name == "disk":
        mask = _soft_inside(r - scale)
    elif name == "square":
        mask = _soft_inside(np.maximum(np.abs(du), np.abs(dv)) - 0.85 * scale)
    elif name == "cross":
        arm = 0.35 * scale
        bar_h = _soft_inside(np.maximum(np.abs(dv) - arm, np.abs(du) - scale))
        bar_v = _soft_inside(np.maximum(np.abs(du) - arm, np.abs(dv) - scale))
        mask = np.maximum(bar_h, bar_v)
    elif name == "hbar":
        mask = _soft_inside(np.maximum(np.abs(dv) - 0.35 * scale, np.abs(du) - 1.3 * scale))
    elif name == "vbar":
        mask = _soft_inside(np.maximum(np.abs(du) - 0.35 * scale, np.abs(dv) - 1.3 * scale))
    elif name == "ring":
        mask = _soft_inside(np.maximum(r - scale, 0.55 * scale - r))
    elif name == "triangle":
        # upward-pointing: |x| within a linearly narrowing band
        top, bottom = cy - 0.9 * scale, cy + 0.7 * scale
        frac = np.clip((v - top) / (bottom - top), 0.0, 1.0)
        mask = _soft_inside(np.abs(du) - frac * scale) * _soft_inside(v - bottom) \
            * _soft_inside(top - v)
    else:  # checker
        inside = _soft_inside(np.maximum(np.abs(du), np.abs(dv)) - scale)
        cells = ((np.floor(u * 8).astype(int) + np.floor(v * 8).astype(int)) % 2)
        mask = inside * cells
    img = np.full((size, size, 3), background, dtype=np.float64)
    img += mask[:, :, None] * (HUES[hue] - background)
    return np.clip(img, -1.0, 1.0)


def _quantize(images: np.ndarray) -> np.ndarray:
    return np.clip(np.round((images + 1.0) * 127.5), 0, 255).astype(np.uint8)


def _dequantize(codes: np.ndarray) -> np.ndarray:
    return (codes.astype(np.float32) / 127.5) - 1.0


def generate_shapes(n: int, seed: int, size: int = 16) -> Dataset:
    """n samples with round-robin class assignment; pure in (n, seed)."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = stream(seed, 0xD5)
    kinds = np.arange(n) % len(SHAPE_KINDS)
    cx = rng.uniform(0.35, 0.65, n)
    cy = rng.uniform(0.35, 0.65, n)
    scale = rng.uniform(0.22, 0.38, n)
    hue = rng.integers(0, len(HUES), n)
    background = rng.uniform(-0.85, -0.45, n)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    for i in range(n):
        images[i] = render_shape(int(kinds[i]), cx[i], cy[i], scale[i],
                                 int(hue[i]), background[i], size)
    # round-trip through the u8 codes so in-memory data equals what a
    # saved-and-loaded dataset would contain
    images = _dequantize(_quantize(images))
    params = np.stack(
        [kinds.astype(np.float64), cx, cy, scale, hue.astype(np.float64), background],
        axis=1,
    ).astype(np.float32)
    return Dataset(images=images, labels=kinds.astype(np.int64),
                   num_classes=len(SHAPE_KINDS), shape_params=params)


def save_dataset(path, dataset: Dataset) -> list:
    """Write LFDS (+ .shapes sidecar when generator params exist).

    Returns the list of paths written.
    """
    n, h, w, c = dataset.images.shape
    codes = _quantize(dataset.images)
    labels = np.asarray(dataset.labels, dtype=np.uint16)
    if np.any(labels >= dataset.num_classes):
        raise FormatError("labels out of range for num_classes")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIIHHHH", DATASET_MAGIC, DATASET_VERSION,
                             n, h, w, c, dataset.num_classes))
        sample = struct.Struct("<H")
        for i in range(n):
            fh.write(sample.pack(int(labels[i])))
            fh.write(codes[i].tobytes())
    written = [str(path)]
    if dataset.shape_params is not None:
        side = str(path) + ".shapes"
        with open(side, "wb") as fh:
            fh.write(struct.pack("<4sIIH", SIDECAR_MAGIC, DATASET_VERSION,
                                 n, SHAPE_FIELDS))
            fh.write(dataset.shape_params.astype("<f4").tobytes())
        written.append(side)
    return written


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20:
        raise FormatError("dataset file truncated")
    magic, version, n, h, w, c, num_classes = struct.unpack_from("<4sIIHHHH", blob, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    sample_bytes = 2 + h * w * c
    if len(blob) != 20 + n * sample_bytes:
        raise FormatError(
            f"dataset length {len(blob)} != header arithmetic {20 + n * sample_bytes}"
        )
    labels = np.empty(n, dtype=np.int64)
    codes = np.empty((n, h, w, c), dtype=np.uint8)
    off = 20
    for i in range(n):
        labels[i] = struct.unpack_from("<H", blob, off)[0]
        off += 2
        codes[i] = np.frombuffer(blob, dtype=np.uint8, count=h * w * c,
                                 offset=off).reshape(h, w, c)
        off += h * w * c
    if np.any(labels >= num_classes):
        raise FormatError("label exceeds num_classes")
    params = None
    side = str(path) + ".shapes"
    try:
        with open(side, "rb") as fh:
            sblob = fh.read()
        smagic, sversion, sn, fields = struct.unpack_from("<4sIIH", sblob, 0)
        if smagic != SIDECAR_MAGIC or sversion != DATASET_VERSION:
            raise FormatError(f"bad sidecar header in {side}")
        if sn != n or fields != SHAPE_FIELDS:
            raise FormatError(f"sidecar does not match dataset: {sn} x {fields}")
        want = 14 + n * fields * 4
        if len(sblob) != want:
            raise FormatError(f"sidecar length {len(sblob)} != {want}")
        params = np.frombuffer(sblob, dtype="<f4", offset=14).reshape(n, fields).copy()
    except FileNotFoundError:
        pass
    return Dataset(images=_dequantize(codes), labels=labels,
                   num_classes=num_classes, shape_params=params)


def write_ppm_grid(path, images: np.ndarray, cols: int = 8) -> None:
    """Tile [-1, 1] images into one P6 PPM for eyeballing samples."""
    n, h, w, c = images.shape
    if c != 3:
        raise ValueError("PPM grid needs 3-channel images")
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    codes = _quantize(images)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = codes[i]
    with open(path, "wb") as fh:
        fh.write(f"P6 {cols * w} {rows * h} 255\n".encode())
        fh.write(canvas.tobytes())
