"""Quantitative evaluation: PSNR, a Frechet-Gaussian proxy, and traces.

The Frechet distance here is the Gaussian closed form on fixed seeded
random-projection features of the pixels. It tracks distribution drift at
desk scale; the absolute values are not comparable to Inception-feature
scores.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .codec import orthonormal_matrix
from .flow import noise

PSNR_CAP_DB = 99.0
PSNR_PEAK = 2.0  # all modalities live in the [-1, 1] pixel frame
FEATURE_DIM = 32
FEATURE_SEED = 911


def psnr(a: np.ndarray, b: np.ndarray, peak: float = PSNR_PEAK) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 99 when the error is zero."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / mse))


@dataclass(frozen=True)
class FrechetStats:
    """Gaussian fit (mean, covariance) of a feature sample."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def fit(cls, features: np.ndarray) -> "FrechetStats":
        features = np.asarray(features, dtype=np.float64)
        n, d = features.shape
        if n < d + 1:
            raise ValueError(f"need at least d+1={d + 1} samples for a full-rank fit, got {n}")
        mean = features.mean(axis=0)
        centered = features - mean
        cov = centered.T @ centered / (n - 1)
        return cls(mean=mean, cov=cov, count=n)


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if np.min(vals) < -tol:
        raise ValueError(f"matrix is not PSD within tolerance: min eigenvalue {np.min(vals)}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(p: FrechetStats, q: FrechetStats) -> float:
    """||mu_p - mu_q||^2 + Tr(S_p + S_q - 2 (S_p^1/2 S_q S_p^1/2)^1/2).

    Uses symmetric eigendecompositions only; eigenvalues of the inner
    product below -1e-8 raise, anything in (-1e-8, 0) is clamped to 0.
    """
    diff = p.mean - q.mean
    root_p = _psd_sqrt(p.cov)
    inner = root_p @ q.cov @ root_p
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if np.min(vals) < -1e-8:
        raise ValueError(f"cross term not PSD: min eigenvalue {np.min(vals)}")
    vals = np.clip(vals, 0.0, None)
    tr_cross = float(np.sum(np.sqrt(vals)))
    return float(diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * tr_cross)


class PixelFeatureProjector:
    """Flattens pixels and projects through a fixed seeded orthonormal map."""

    def __init__(self, pixel_dim: int = 768, feature_dim: int = FEATURE_DIM,
                 seed: int = FEATURE_SEED):
        self.matrix = orthonormal_matrix(pixel_dim, feature_dim, seed)

    def __call__(self, images: np.ndarray) -> np.ndarray:
        flat = np.asarray(images, dtype=np.float64).reshape(images.shape[0], -1)
        if flat.shape[1] != self.matrix.shape[0]:
            raise ValueError(
                f"expected flattened dim {self.matrix.shape[0]}, got {flat.shape[1]}"
            )
        return flat @ self.matrix


def frechet_pixel_distance(images_a: np.ndarray, images_b: np.ndarray,
                           projector: PixelFeatureProjector | None = None) -> float:
    projector = projector or PixelFeatureProjector(
        pixel_dim=int(np.prod(images_a.shape[1:]))
    )
    return frechet_distance(
        FrechetStats.fit(projector(images_a)), FrechetStats.fit(projector(images_b))
    )


SNR_TRACE_HEADER = ("t_global", "f_latent", "f_pixel", "snr_latent", "snr_pixel")


def snr_trace(plan, variances: dict) -> list[tuple]:
    """One row per knot: (t_global, f_latent, f_pixel, SNR_latent, SNR_pixel).

    SNR entries are floats with +inf at fully denoised knots; the CSV
    writer renders the sentinel as the string 'inf'.
    """
    rows = []
    v_lat, v_pix = variances["latent"], variances["pixel"]
    for k, t in enumerate(plan.knots):
        f_lat = plan.times["latent"][k]
        f_pix = plan.times["pixel"][k]
        snr_lat = np.inf if f_lat >= 1.0 else f_lat**2 * v_lat / (1.0 - f_lat) ** 2
        snr_pix = np.inf if f_pix >= 1.0 else f_pix**2 * v_pix / (1.0 - f_pix) ** 2
        rows.append((t, f_lat, f_pix, snr_lat, snr_pix))
    return rows


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        if np.isinf(value):
            return "inf"
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return value


@dataclass(frozen=True)
class PsnrGrid:
    """PSNR per (t_latent, t_pixel) cell for each modality."""

    t_values: np.ndarray
    db: dict  # modality -> (G, G) array indexed [i_latent, j_pixel]


def psnr_grid(predict_fn, samples: dict, grid_points: int = 9,
              seed: int = 0, peak: float = PSNR_PEAK) -> PsnrGrid:
    """Reconstruction PSNR across the (t_latent, t_pixel) square.

    For each cell, the held-out samples are noised to those times with a
    noise draw shared across cells (common random numbers), run through
    one forward pass, and scored against the clean data; the per-cell MSE
    is averaged over samples before converting to dB.
    """
    names = list(samples)
    n = samples[names[0]].shape[0]
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    eps = {m: rng.standard_normal(samples[m].shape) for m in names}
    t_values = np.linspace(0.0, 1.0, grid_points)
    db = {m: np.zeros((grid_points, grid_points)) for m in names}
    for i, t_lat in enumerate(t_values):
        for j, t_pix in enumerate(t_values):
            times = {"latent": t_lat, "pixel": t_pix}
            states = {m: noise(samples[m], times[m], eps[m]) for m in names}
            preds = predict_fn(states, times)
            for m in names:
                db[m][i, j] = psnr(preds[m], samples[m], peak)
    return PsnrGrid(t_values=t_values, db=db)
