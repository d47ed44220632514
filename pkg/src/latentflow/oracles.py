"""Closed-form denoisers for testing samplers independently of learning.

GroundTruthOracle knows the clean sample behind each state and returns it
as the x-prediction, so any monotone plan must reconstruct exactly.

GMMOracle computes the exact posterior mean E[x | z_pixel, z_latent] when
the pixel data is a Gaussian mixture and the latent is a fixed linear map
of the pixels: per component the joint (z_pixel, z_latent) is Gaussian, so
conditioning is linear algebra, and components are mixed with their
posterior responsibilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

COV_JITTER = 1e-9


class GroundTruthOracle:
    """x-prediction oracle that simply returns the paired clean sample."""

    def __init__(self, clean: dict):
        self.clean = {m: np.asarray(v) for m, v in clean.items()}
        self.modality_shapes = {m: v.shape[1:] for m, v in self.clean.items()}

    def predict(self, states: dict, times: dict, labels=None) -> dict:
        for m, z in states.items():
            if z.shape != self.clean[m].shape:
                raise ValueError(f"state shape {z.shape} != clean {self.clean[m].shape}")
        return {m: self.clean[m] for m in states}


@dataclass(frozen=True)
class GMMOracleSpec:
    """Isotropic Gaussian mixture over pixels with a linear latent y = x @ L."""

    weights: np.ndarray   # (K,)
    means: np.ndarray     # (K, d)
    stds: np.ndarray      # (K,)
    latent_map: np.ndarray  # (d, m)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be >= 0 and sum to 1, got {w}")
        if np.any(np.asarray(self.stds) <= 0):
            raise ValueError("component stds must be > 0")

    def sample(self, rng: np.random.Generator, n: int) -> dict:
        comps = rng.choice(len(self.weights), size=n, p=np.asarray(self.weights, float))
        x = self.means[comps] + self.stds[comps, None] * rng.standard_normal(
            (n, self.means.shape[1])
        )
        return {"pixel": x, "latent": x @ self.latent_map}


class GMMOracle:
    """Exact posterior-mean denoiser for a GMMOracleSpec."""

    def __init__(self, spec: GMMOracleSpec):
        self.spec = spec
        d, m = spec.latent_map.shape
        self.d, self.m = d, m
        self.modality_shapes = {"pixel": (d,), "latent": (m,)}

    def predict(self, states: dict, times: dict, labels=None) -> dict:
        z_x = np.atleast_2d(np.asarray(states["pixel"], dtype=np.float64))
        z_y = np.atleast_2d(np.asarray(states["latent"], dtype=np.float64))
        n = z_x.shape[0]
        t_x = np.broadcast_to(np.asarray(times["pixel"], dtype=np.float64), (n,))
        t_y = np.broadcast_to(np.asarray(times["latent"], dtype=np.float64), (n,))
        x_hat = np.zeros((n, self.d))
        # covariances depend only on the time pair, so group identical times
        for tx, ty in sorted({(a, b) for a, b in zip(t_x, t_y)}):
            sel = (t_x == tx) & (t_y == ty)
            x_hat[sel] = self._posterior_mean(z_x[sel], z_y[sel], float(tx), float(ty))
        return {"pixel": x_hat, "latent": x_hat @ self.spec.latent_map}

    def _component_moments(self, t_x, t_y):
        """Joint observation mean/covariance and cross-covariance per component."""
        spec = self.spec
        d, m = self.d, self.m
        A = spec.latent_map.T  # (m, d), so y = A x for column vectors
        out = []
        for k in range(len(spec.weights)):
            var = float(spec.stds[k]) ** 2
            mu = spec.means[k]
            mean_z = np.concatenate([t_x * mu, t_y * (A @ mu)])
            c_xx = (t_x**2 * var + (1.0 - t_x) ** 2) * np.eye(d)
            c_yy = t_y**2 * var * (A @ A.T) + (1.0 - t_y) ** 2 * np.eye(m)
            c_xy = t_x * t_y * var * A.T
            cov = np.block([[c_xx, c_xy], [c_xy.T, c_yy]])
            cov[np.diag_indices_from(cov)] += COV_JITTER
            cross = np.concatenate([t_x * var * np.eye(d), t_y * var * A.T], axis=1)
            out.append((mu, mean_z, cov, cross))
        return out

    def log_responsibilities(self, z_x, z_y, t_x, t_y) -> np.ndarray:
        """(B, K) log posterior component probabilities given both states."""
        z = np.concatenate([np.atleast_2d(z_x), np.atleast_2d(z_y)], axis=1)
        logs = []
        for k, (_, mean_z, cov, _) in enumerate(self._component_moments(t_x, t_y)):
            chol = linalg.cho_factor(cov, lower=True)
            diff = z - mean_z
            sol = linalg.cho_solve(chol, diff.T).T
            logdet = 2.0 * np.sum(np.log(np.diag(chol[0])))
            quad = np.sum(diff * sol, axis=1)
            logs.append(
                np.log(self.spec.weights[k])
                - 0.5 * (quad + logdet + z.shape[1] * np.log(2.0 * np.pi))
            )
        logs = np.stack(logs, axis=1)
        logs -= logs.max(axis=1, keepdims=True)
        logs -= np.log(np.exp(logs).sum(axis=1, keepdims=True))
        return logs

    def _posterior_mean(self, z_x, z_y, t_x, t_y) -> np.ndarray:
        z = np.concatenate([z_x, z_y], axis=1)
        resp = np.exp(self.log_responsibilities(z_x, z_y, t_x, t_y))
        x_hat = np.zeros((z.shape[0], self.d))
        for k, (mu, mean_z, cov, cross) in enumerate(self._component_moments(t_x, t_y)):
            chol = linalg.cho_factor(cov, lower=True)
            sol = linalg.cho_solve(chol, (z - mean_z).T).T
            e_k = mu + sol @ cross.T
            x_hat += resp[:, k : k + 1] * e_k
        return x_hat
