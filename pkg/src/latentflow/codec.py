"""Deterministic encoders from images to per-modality token grids.

Every encoder maps a batch of images (N, H, W, C) in [-1, 1] to a token
grid (N, P, P, D) whose P x P patch layout is spatially aligned with the
pixel patch grid. Latents are a pure function of the pixels (or of the
synthetic generator's parameters), so the joint distribution over pixels
and latents stays exactly the pixel distribution.

Token layouts:
    pixel        D = patch*patch*C, lossless row-major patch flattening
    downsample   2x2 average pool, then patchify at patch/2 (D = 12 at patch 4)
    fixedlinear  per-patch product with a seeded orthonormal matrix
    shapeparam   per-patch broadcast of the synthetic generator's parameters
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NormalizationError

ENCODER_KINDS = ("pixel", "downsample", "fixedlinear", "shapeparam")

SHAPE_PARAM_DIM = 8
FIXED_LINEAR_SEED = 2317
# the paper-style preset for the global std all modalities are rescaled to
PIXEL_STD_PRESET = 0.485


@dataclass(frozen=True)
class ModalitySpec:
    """One diffused token space: its encoder, shape, and loss weight."""

    name: str
    encoder_kind: str
    token_dim: int
    std_after_norm: float
    loss_weight: float

    def __post_init__(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.encoder_kind!r}")
        if self.loss_weight <= 0:
            raise ConfigError(f"loss weight must be > 0, got {self.loss_weight}")
        if self.std_after_norm <= 0:
            raise ConfigError(f"std_after_norm must be > 0, got {self.std_after_norm}")


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(N, H, W, C) -> (N, H/patch, W/patch, patch*patch*C), losslessly."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigError(f"image {h}x{w} not divisible by patch {patch}")
    p, q = h // patch, w // patch
    out = images.reshape(n, p, patch, q, patch, c)
    out = out.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out.reshape(n, p, q, patch * patch * c))


def unpatchify(tokens: np.ndarray, patch: int, channels: int) -> np.ndarray:
    """Inverse of patchify; bit-exact."""
    n, p, q, d = tokens.shape
    if d != patch * patch * channels:
        raise ConfigError(f"token dim {d} != patch^2*C = {patch * patch * channels}")
    out = tokens.reshape(n, p, q, patch, patch, channels)
    out = out.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(out.reshape(n, p * patch, q * patch, channels))


def orthonormal_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Seeded matrix with orthonormal columns (rows >= cols), via QR."""
    if rows < cols:
        raise ConfigError(f"need rows >= cols for orthonormal columns, got {rows}x{cols}")
    rng = np.random.default_rng(seed)
    gauss = rng.standard_normal((rows, cols))
    q, r = np.linalg.qr(gauss)
    # fix the sign ambiguity so the construction is reproducible
    return q * np.sign(np.diag(r))


class PixelEncoder:
    """Lossless patchify/unpatchify of the pixel modality."""

    kind = "pixel"

    def __init__(self, patch: int, channels: int = 3):
        self.patch = patch
        self.channels = channels
        self.token_dim = patch * patch * channels

    def encode(self, images: np.ndarray, shape_params=None) -> np.ndarray:
        return patchify(images, self.patch)

    def decode(self, tokens: np.ndarray) -> np.ndarray:
        return unpatchify(tokens, self.patch, self.channels)


class DownsampleEncoder:
    """2x2 average pool, then patchify at half the patch size.

    Keeps the patch grid aligned with the pixel grid while dropping high
    frequencies: each token summarizes the same spatial cell with 4x fewer
    values.
    """

    kind = "downsample"

    def __init__(self, patch: int, channels: int = 3):
        if patch % 2:
            raise ConfigError(f"downsample encoder needs an even patch, got {patch}")
        self.patch = patch
        self.channels = channels
        self.token_dim = (patch // 2) ** 2 * channels

    def encode(self, images: np.ndarray, shape_params=None) -> np.ndarray:
        images = np.asarray(images)
        n, h, w, c = images.shape
        if h % 2 or w % 2:
            raise ConfigError(f"image {h}x{w} not divisible by 2x2 pooling")
        pooled = images.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
        return patchify(pooled, self.patch // 2)


class FixedLinearEncoder:
    """Per-patch projection through a fixed seeded orthonormal matrix."""

    kind = "fixedlinear"

    def __init__(self, patch: int, channels: int = 3, token_dim: int = 16,
                 seed: int = FIXED_LINEAR_SEED):
        self.patch = patch
        self.channels = channels
        self.token_dim = token_dim
        in_dim = patch * patch * channels
        self.matrix = orthonormal_matrix(in_dim, token_dim, seed)

    def encode(self, images: np.ndarray, shape_params=None) -> np.ndarray:
        return patchify(images, self.patch) @ self.matrix


class ShapeParamEncoder:
    """Broadcast the synthetic generator's parameters to every patch.

    The 8-dim per-patch vector embeds the categorical fields on the unit
    circle so that nearby codes stay nearby:
        [cos(kind), sin(kind), cx, cy, scale, cos(hue), sin(hue), background]
    Only available for synthetic data that carries its generator params.
    """

    kind = "shapeparam"
    token_dim = SHAPE_PARAM_DIM

    def __init__(self, patch: int, grid: int):
        self.patch = patch
        self.grid = grid

    def encode(self, images: np.ndarray, shape_params=None) -> np.ndarray:
        if shape_params is None:
            raise ConfigError(
                "shapeparam encoder needs generator parameters; "
                "ingested data does not carry them"
            )
        feats = shape_param_features(shape_params)
        n = feats.shape[0]
        if images is not None and images.shape[0] != n:
            raise ConfigError("shape_params count does not match image count")
        return np.broadcast_to(
            feats[:, None, None, :], (n, self.grid, self.grid, SHAPE_PARAM_DIM)
        ).copy()


def shape_param_features(shape_params: np.ndarray) -> np.ndarray:
    """Raw generator rows (kind, cx, cy, scale, hue, background) -> 8-dim codes."""
    sp = np.asarray(shape_params, dtype=np.float64)
    if sp.ndim != 2 or sp.shape[1] != 6:
        raise ConfigError(f"expected (N, 6) raw shape params, got {sp.shape}")
    kind_angle = 2.0 * np.pi * sp[:, 0] / 8.0
    hue_angle = 2.0 * np.pi * sp[:, 4] / 6.0
    return np.stack(
        [
            np.cos(kind_angle),
            np.sin(kind_angle),
            sp[:, 1],
            sp[:, 2],
            sp[:, 3],
            np.cos(hue_angle),
            np.sin(hue_angle),
            sp[:, 5],
        ],
        axis=1,
    )


def make_encoder(kind: str, patch: int, grid: int, channels: int = 3,
                 token_dim: int = 16, seed: int = FIXED_LINEAR_SEED):
    if kind == "pixel":
        return PixelEncoder(patch, channels)
    if kind == "downsample":
        return DownsampleEncoder(patch, channels)
    if kind == "fixedlinear":
        return FixedLinearEncoder(patch, channels, token_dim, seed)
    if kind == "shapeparam":
        return ShapeParamEncoder(patch, grid)
    raise ConfigError(f"unknown encoder kind {kind!r}")


@dataclass(frozen=True)
class Normalizer:
    """Affine map y = (x - offset) * scale, recorded for exact inversion.

    scale/offset are scalars for global standardization or length-D vectors
    for per-channel standardization.
    """

    scale: np.ndarray
    offset: np.ndarray

    def apply(self, tokens: np.ndarray) -> np.ndarray:
        return (tokens - self.offset) * self.scale

    def invert(self, tokens: np.ndarray) -> np.ndarray:
        return tokens / self.scale + self.offset

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls(scale=np.float64(1.0), offset=np.float64(0.0))


def fit_normalizer(grids: np.ndarray, target_std: float,
                   per_channel: bool = False) -> Normalizer:
    """Standardize a dataset of token grids to mean 0 and std target_std.

    Global mode reduces over every element; per-channel mode reduces over
    everything but the trailing token dimension.
    """
    grids = np.asarray(grids)
    if grids.size == 0:
        raise NormalizationError("cannot normalize an empty dataset")
    if target_std <= 0:
        raise NormalizationError(f"target std must be > 0, got {target_std}")
    if per_channel:
        axes = tuple(range(grids.ndim - 1))
        mean = grids.mean(axis=axes, dtype=np.float64)
        std = grids.std(axis=axes, dtype=np.float64)
        if np.any(std <= 0):
            raise NormalizationError("zero-variance channel in dataset")
    else:
        mean = np.float64(grids.mean(dtype=np.float64))
        std = np.float64(grids.std(dtype=np.float64))
        if std <= 0:
            raise NormalizationError("zero-variance dataset")
    return Normalizer(scale=target_std / std, offset=mean)


def normalize_modality(grids: np.ndarray, target_std: float,
                       per_channel: bool = False):
    """Fit and apply; returns (normalized grids, normalizer)."""
    norm = fit_normalizer(grids, target_std, per_channel)
    return norm.apply(grids), norm
