"""Noising, losses, and training-time timestep samplers.

Conventions: t = 1 is clean data, t = 0 is pure noise, and the noised
state is the straight-line interpolation z_t = t*x + (1-t)*eps. The
velocity target is x - eps, recovered from any noised state as
(x - z_t)/(1 - t).

Losses are x-prediction with velocity weighting: the squared error on x
is divided by max(1-t, t_clip)^2, which equals the velocity-space error
because the z_t terms cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .schedules import convert_time, shift_time


def _align_time(t, target_ndim):
    """Broadcast scalar or per-sample times against (B, ...) token arrays."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"time must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (target_ndim - 1))


def noise(x: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """z_t = t*x + (1-t)*eps. t may be scalar or per-sample (B,)."""
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs eps {eps.shape}")
    tb = _align_time(t, x.ndim)
    return tb * x + (1.0 - tb) * eps


def xpred_vloss(x_pred: np.ndarray, x: np.ndarray, t, t_clip: float) -> float:
    """Mean over elements of ((x_pred - x) / max(1-t, t_clip))^2."""
    x_pred = np.asarray(x_pred)
    x = np.asarray(x)
    if x_pred.shape != x.shape:
        raise ValueError(f"shape mismatch: x_pred {x_pred.shape} vs x {x.shape}")
    tb = _align_time(t, x.ndim)
    # compute in the data dtype: float32 batches stay float32
    div = np.maximum(1.0 - tb, t_clip).astype(x.dtype, copy=False)
    err = (x_pred - x) / div
    return float(np.mean(err * err))


@dataclass(frozen=True)
class LossSpec:
    """Per-modality weights plus the velocity-weighting clip."""

    weights: dict
    t_clip: float

    def __post_init__(self):
        if not 0.0 < self.t_clip <= 1.0:
            raise ConfigError(f"t_clip must lie in (0, 1], got {self.t_clip}")
        for name, lam in self.weights.items():
            if lam <= 0:
                raise ConfigError(f"loss weight for {name!r} must be > 0, got {lam}")


# defaults per training regime
T_CLIP_SINGLE = 0.05
T_CLIP_MULTI = 1.0 / 3.0


def joint_loss(preds: dict, targets: dict, spec: LossSpec, active=None):
    """Weighted sum of per-modality losses over the active set.

    targets maps modality -> (x, t); active maps modality -> per-sample
    bool mask (missing or None means all samples active). A modality with
    no active samples contributes zero and is excluded from the total.
    Returns (total, components) where components hold the unweighted
    per-modality means for logging and balancing.
    """
    total = 0.0
    components = {}
    any_active = False
    for name, x_pred in preds.items():
        x, t = targets[name]
        mask = None if active is None else active.get(name)
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                components[name] = 0.0
                continue
            x_pred, x = x_pred[mask], x[mask]
            t = np.asarray(t)[mask] if np.ndim(t) else t
        comp = xpred_vloss(x_pred, x, t, spec.t_clip)
        components[name] = comp
        total += spec.weights[name] * comp
        any_active = True
    if not any_active:
        raise ConfigError("no active modality in joint loss")
    return total, components


class LossBalancer:
    """Tracks per-modality loss EMAs and derives equalizing weights.

    Weights are the inverse loss EMAs normalized so the anchor modality
    keeps weight 1; after warm-up every modality contributes the same
    weighted magnitude. Steps where a modality is inactive leave its EMA
    untouched.
    """

    def __init__(self, modalities, anchor: str = "pixel", decay: float = 0.99,
                 warmup_steps: int = 50, initial: dict | None = None):
        if anchor not in modalities:
            raise ConfigError(f"anchor {anchor!r} not among modalities {modalities}")
        self.anchor = anchor
        self.decay = decay
        self.warmup_steps = warmup_steps
        self.initial = dict(initial or {m: 1.0 for m in modalities})
        self._ema = {m: None for m in modalities}
        self._steps = 0

    def update(self, components: dict):
        for name, value in components.items():
            if value <= 0.0:
                continue
            prev = self._ema[name]
            self._ema[name] = value if prev is None else self.decay * prev + (1 - self.decay) * value
        self._steps += 1

    def weights(self) -> dict:
        warm = self._steps >= self.warmup_steps and all(
            v is not None for v in self._ema.values()
        )
        if not warm:
            return dict(self.initial)
        ref = self._ema[self.anchor]
        return {name: ref / ema for name, ema in self._ema.items()}


def logit_normal(rng: np.random.Generator, mu: float, sigma: float, size=None):
    """t = sigmoid(n), n ~ Normal(mu, sigma). With t=1 as clean data,
    mu > 0 skews toward low noise."""
    n = rng.normal(mu, sigma, size=size)
    return 1.0 / (1.0 + np.exp(-n))


def sample_times_multischedule(rng: np.random.Generator, modality_stds: dict,
                               size=None) -> dict:
    """Independent uniform draws per modality, warped by each modality's std.

    t_i = shift(u_i, std_i), so the draw is uniform in the frame where the
    modality has unit variance. Independence keeps every inference
    trajectory through the time square inside the training distribution.
    """
    times = {}
    for name, std in modality_stds.items():
        if std <= 0:
            raise ValueError(f"modality std for {name!r} must be > 0, got {std}")
        u = rng.uniform(0.0, 1.0, size=size)
        times[name] = shift_time(u, std)
    return times


@dataclass(frozen=True)
class CascadedTimeSampler:
    """Training-time sampler for the latent-first cascaded regime.

    Each draw first picks which modality to optimize: with probability
    p_latent it is a latent step (t_pixel = 0, pixel loss off); otherwise a
    pixel step (t_latent drawn from U[1-beta_max, 1], latent loss off).
    Noise levels come from per-modality logit-normals, except that an
    early_frac share of pixel steps samples t_pixel from U[0, 0.5], which
    the logit-normal never covers but cascaded inference starts from.
    """

    p_latent: float = 0.4
    mu_latent: float = -1.2
    sigma_latent: float = 1.0
    mu_pixel: float = -0.8
    sigma_pixel: float = 0.8
    early_frac: float = 0.1
    early_range: tuple = (0.0, 0.5)
    beta_max: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.p_latent < 1.0:
            raise ConfigError(f"p_latent must lie in (0, 1), got {self.p_latent}")
        if self.sigma_latent <= 0 or self.sigma_pixel <= 0:
            raise ConfigError("logit-normal sigmas must be > 0")
        if not 0.0 <= self.early_frac <= 1.0:
            raise ConfigError(f"early_frac must lie in [0, 1], got {self.early_frac}")
        if not 0.0 <= self.beta_max < 1.0:
            raise ConfigError(f"beta_max must lie in [0, 1), got {self.beta_max}")


def sample_times_cascaded(rng: np.random.Generator, sampler: CascadedTimeSampler,
                          size: int):
    """Draw (times, active-loss masks) for a batch of cascaded steps.

    Returns ({"latent": (B,), "pixel": (B,)}, same-shaped bool masks).
    Latent steps: t_latent ~ logitnormal, t_pixel = 0, only latent loss on.
    Pixel steps: t_pixel ~ logitnormal (or U[0, 0.5] for an early_frac
    share), t_latent ~ U[1-beta_max, 1], only pixel loss on.
    """
    is_latent = rng.uniform(size=size) < sampler.p_latent

    t_latent = logit_normal(rng, sampler.mu_latent, sampler.sigma_latent, size)
    t_pixel = logit_normal(rng, sampler.mu_pixel, sampler.sigma_pixel, size)
    early = rng.uniform(size=size) < sampler.early_frac
    t_early = rng.uniform(sampler.early_range[0], sampler.early_range[1], size)
    t_pixel = np.where(early, t_early, t_pixel)
    t_latent_aug = rng.uniform(1.0 - sampler.beta_max, 1.0, size)

    times = {
        "latent": np.where(is_latent, t_latent, t_latent_aug),
        "pixel": np.where(is_latent, 0.0, t_pixel),
    }
    masks = {"latent": is_latent, "pixel": ~is_latent}
    return times, masks


_CONVERT_CLIP = 1e-7


def sample_times_single_schedule(rng: np.random.Generator,
                                 sampler: CascadedTimeSampler, schedules: dict,
                                 size: int):
    """Cascaded-style sampling generalized to any fixed schedule pair.

    One modality is picked per draw (latent with probability p_latent) and
    its noise level sampled; the partner's time is derived through the
    schedule pair as t_j = f_j(f_i^{-1}(t_i)), so training stays exactly on
    the inference trajectory. The latent beta-noise augmentation replaces a
    derived time of exactly 1 with U[1-beta_max, 1]; schedules that keep
    the latent advancing during pixel steps already provide partial noise.
    For the cascaded pair this reproduces sample_times_cascaded.
    """
    if set(schedules) != {"latent", "pixel"}:
        raise ConfigError("single-schedule sampling needs latent and pixel schedules")
    f_lat, f_pix = schedules["latent"], schedules["pixel"]
    is_latent = rng.uniform(size=size) < sampler.p_latent

    t_lat = logit_normal(rng, sampler.mu_latent, sampler.sigma_latent, size)
    t_pix = logit_normal(rng, sampler.mu_pixel, sampler.sigma_pixel, size)
    early = rng.uniform(size=size) < sampler.early_frac
    t_early = rng.uniform(sampler.early_range[0], sampler.early_range[1], size)
    t_pix = np.where(early, t_early, t_pix)
    # keep sampled times off flat segment boundaries so conversion stays
    # well defined
    t_lat = np.clip(t_lat, _CONVERT_CLIP, 1.0 - _CONVERT_CLIP)
    t_pix = np.clip(t_pix, _CONVERT_CLIP, 1.0 - _CONVERT_CLIP)

    pix_from_lat = convert_time(t_lat, f_lat, f_pix)
    lat_from_pix = convert_time(t_pix, f_pix, f_lat)
    aug = rng.uniform(1.0 - sampler.beta_max, 1.0, size)
    lat_from_pix = np.where(lat_from_pix >= 1.0 - 1e-9, aug, lat_from_pix)

    times = {
        "latent": np.where(is_latent, t_lat, lat_from_pix),
        "pixel": np.where(is_latent, pix_from_lat, t_pix),
    }
    masks = {"latent": is_latent, "pixel": ~is_latent}
    return times, masks


@dataclass
class NoisedBatch:
    """Per-modality noised tokens with their times and retained noise draws."""

    z: dict
    t: dict
    eps: dict = field(default_factory=dict)

    @classmethod
    def create(cls, rng: np.random.Generator, tokens: dict, times: dict,
               dtype=np.float32) -> "NoisedBatch":
        z, eps = {}, {}
        for name, x in tokens.items():
            e = rng.standard_normal(x.shape).astype(dtype)
            z[name] = noise(x, times[name], e).astype(dtype)
            eps[name] = e
        return cls(z=z, t=dict(times), eps=eps)
