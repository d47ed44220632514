"""Experiment sweeps: ordering across shift alphas and the ablation axes."""

from __future__ import annotations

import numpy as np

from .config import RunConfig
from .dataset import generate_shapes
from .errors import ConfigError
from .metrics import FrechetStats, PixelFeatureProjector, frechet_distance
from .sampling import (
    GuidanceSpec,
    named_plan_schedules,
    plan_trajectory,
    sample_batch,
)
from .schedules import Schedule
from .training import LoadedRun

ORDER_ALPHAS = (1 / 64, 1 / 16, 1 / 4, 1.0, 4.0, 16.0, 64.0)

ABLATION_GRIDS = {
    "p_latent": (0.3, 0.4, 0.5, 0.6, 0.7, 0.8),
    "beta": (0.0, 0.25, 0.5),
    "schedule": ("cascaded", "linoffset:0.1", "shift:9"),
}

# config key each ablation axis varies when training its runs
ABLATION_KEYS = {
    "p_latent": "sampler.p_latent",
    "beta": "sampler.beta_max",
    "schedule": "sample.plan",
}

ORDER_SWEEP_HEADER = ("alpha", "frechet_distance")
ABLATION_HEADER = ("value", "frechet_distance")


def held_out_images(config: RunConfig, n: int) -> np.ndarray:
    """Fresh draws from the generator, disjoint seed from the training set."""
    return generate_shapes(n, config["data.seed"] + 1,
                           config["data.image_size"]).images


def eval_labels(run: LoadedRun, n: int):
    """Balanced class labels for conditional runs, None for unconditional."""
    if run.config["train.unconditional"]:
        return None
    return np.arange(n) % run.config["data.classes"]


def sample_run(run: LoadedRun, plan, n: int, seed: int, class_labels=None,
               guidance: GuidanceSpec | None = None, weak_run: LoadedRun | None = None,
               solver: str | None = None, use_ema: bool | None = None,
               latent_noise: float = 0.0) -> np.ndarray:
    """Sample images from a loaded checkpoint under a trajectory plan."""
    use_ema = run.config["sample.use_ema"] if use_ema is None else use_ema
    denoiser = run.denoiser(use_ema)
    weak = weak_run.denoiser(use_ema) if weak_run is not None else None
    return sample_batch(
        denoiser, plan, n=n, seed=seed, class_labels=class_labels,
        guidance=guidance, weak=weak,
        solver=solver or run.config["sample.solver"],
        pixel_decoder=run.pixel_decoder(),
        pixel_normalizer=run.normalizers["pixel"],
        latent_noise=latent_noise,
    )


def proxy_distance(images: np.ndarray, reference: np.ndarray,
                   projector: PixelFeatureProjector | None = None) -> float:
    projector = projector or PixelFeatureProjector(
        pixel_dim=int(np.prod(images.shape[1:]))
    )
    return frechet_distance(FrechetStats.fit(projector(images)),
                            FrechetStats.fit(projector(reference)))


def sweep_order(run: LoadedRun, reference: np.ndarray,
                alphas=ORDER_ALPHAS, n: int = 1024, seed: int = 0,
                steps: int | None = None) -> list[tuple]:
    """Proxy distance per latent shift alpha, pixels on the linear schedule.

    alpha > 1 denoises the latent earlier; alpha = 1 is the equal-SNR
    trajectory; alpha < 1 is pixel-earlier.
    """
    projector = PixelFeatureProjector(pixel_dim=int(np.prod(reference.shape[1:])))
    ref_stats = FrechetStats.fit(projector(reference))
    labels = eval_labels(run, n)
    steps = steps or run.config["sample.steps"]
    rows = []
    for alpha in alphas:
        schedules = {"latent": Schedule.shift(alpha), "pixel": Schedule.identity()}
        plan = plan_trajectory(schedules, steps)
        images = sample_run(run, plan, n, seed, class_labels=labels)
        stats = FrechetStats.fit(projector(images))
        rows.append((alpha, frechet_distance(stats, ref_stats)))
    return rows


def ablation_config(base: RunConfig, axis: str, value) -> RunConfig:
    """Training config for one ablation run; always the cascaded regime."""
    if axis not in ABLATION_KEYS:
        raise ConfigError(f"unknown ablation axis {axis!r}; "
                          f"choose from {sorted(ABLATION_KEYS)}")
    return base.override({
        "train.regime": "cascaded",
        ABLATION_KEYS[axis]: value if isinstance(value, str) else float(value),
    })


def sweep_ablate(axis: str, entries: list, reference: np.ndarray,
                 n: int = 1024, seed: int = 0) -> list[tuple]:
    """Proxy distance per (value, run); each run sampled on its own plan."""
    if axis not in ABLATION_KEYS:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    projector = PixelFeatureProjector(pixel_dim=int(np.prod(reference.shape[1:])))
    ref_stats = FrechetStats.fit(projector(reference))
    rows = []
    for value, run in entries:
        plan = plan_trajectory(named_plan_schedules(run.config["sample.plan"]),
                               run.config["sample.steps"],
                               run.config["sample.alpha_inf"])
        images = sample_run(run, plan, n, seed, class_labels=eval_labels(run, n))
        stats = FrechetStats.fit(projector(images))
        rows.append((value, frechet_distance(stats, ref_stats)))
    return rows
