"""Training loop, modality wiring, and checkpoint round-trips.

The trainer owns the parameters; batch construction is keyed by
(seed, worker_id, step) streams so any number of prefetch workers
produce identical batches. Both training regimes are driven here:

    multischedule  independent per-modality times, both losses on
    cascaded       latent-first: each step optimizes one modality

Checkpoints carry the model tensors, the EMA shadow, the full config
echo, and per-modality normalization constants, so a checkpoint alone is
enough to sample from.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import codec
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .dataset import Dataset, load_dataset
from .errors import ConfigError, TrainingDivergedError
from .flow import (
    CascadedTimeSampler,
    LossBalancer,
    LossSpec,
    NoisedBatch,
    logit_normal,
    sample_times_cascaded,
    sample_times_multischedule,
    sample_times_single_schedule,
)
from .metrics import write_csv
from .model import (
    NULL_CLASS,
    DenoiserConfig,
    ModelDenoiser,
    ema_update,
    init_params,
    loss_and_grad,
)
from .optim import Adam
from .rng import stream
from .sampling import named_plan_schedules

TRAIN_LOG_HEADER = ("step", "loss_total", "loss_pixel", "loss_latent",
                    "lambda_pixel", "lambda_latent", "lr")


def effective_workers(requested: int) -> int:
    """Worker count capped by the LF_THREADS environment variable."""
    cap = os.environ.get("LF_THREADS")
    if cap:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"LF_THREADS must be an integer, got {cap!r}") from None
    return max(1, requested)


@dataclass
class ModalityBundle:
    """Dataset-wide token grids plus the codecs that produced them."""

    tokens: dict          # modality -> (N, P, P, D) float32
    specs: dict           # modality -> ModalitySpec
    normalizers: dict     # modality -> Normalizer
    encoders: dict        # modality -> encoder object
    pixel_std: float

    @property
    def stds(self) -> dict:
        return {m: spec.std_after_norm for m, spec in self.specs.items()}


def latent_token_dim(config: RunConfig) -> int | None:
    kind = config["modality.latent.encoder"]
    patch = config["model.patch"]
    if kind == "none":
        return None
    if kind == "shapeparam":
        return codec.SHAPE_PARAM_DIM
    if kind == "downsample":
        return (patch // 2) ** 2 * 3
    if kind == "fixedlinear":
        return config["modality.latent.dim"]
    raise ConfigError(f"unknown latent encoder {kind!r}")


def build_modalities(config: RunConfig, dataset: Dataset) -> ModalityBundle:
    patch = config["model.patch"]
    grid = config["data.image_size"] // patch
    pixel_enc = codec.PixelEncoder(patch)
    pixel_tokens = pixel_enc.encode(dataset.images).astype(np.float32)
    pixel_std = float(pixel_tokens.std(dtype=np.float64))
    if pixel_std <= 0:
        raise ConfigError("dataset pixels have zero variance")
    target_std = config.target_std()
    if target_std is None:
        target_std = pixel_std

    tokens = {"pixel": pixel_tokens}
    normalizers = {"pixel": codec.Normalizer.identity()}
    encoders = {"pixel": pixel_enc}
    specs = {
        "pixel": codec.ModalitySpec(
            name="pixel", encoder_kind="pixel", token_dim=pixel_enc.token_dim,
            std_after_norm=pixel_std,
            loss_weight=config["modality.pixel.loss_weight"],
        )
    }

    kind = config["modality.latent.encoder"]
    if kind != "none":
        encoder = codec.make_encoder(kind, patch, grid,
                                     token_dim=config["modality.latent.dim"])
        if kind == "shapeparam":
            if dataset.shape_params is None:
                raise ConfigError(
                    "shapeparam latent needs a dataset with generator params"
                )
            raw = encoder.encode(dataset.images, dataset.shape_params)
        else:
            raw = encoder.encode(dataset.images)
        # shape params standardize per channel (mixed units); image-derived
        # latents standardize globally, like the pixel frame they came from
        per_channel = kind == "shapeparam"
        normalized, norm = codec.normalize_modality(raw, target_std, per_channel)
        tokens["latent"] = normalized.astype(np.float32)
        normalizers["latent"] = norm
        encoders["latent"] = encoder
        lam = config.latent_loss_weight()
        specs["latent"] = codec.ModalitySpec(
            name="latent", encoder_kind=kind, token_dim=encoder.token_dim,
            std_after_norm=target_std,
            loss_weight=1.0 / 3.0 if lam is None else lam,
        )
    return ModalityBundle(tokens=tokens, specs=specs, normalizers=normalizers,
                          encoders=encoders, pixel_std=pixel_std)


def build_denoiser_config(config: RunConfig, modality_dims: dict) -> DenoiserConfig:
    expert_layers = config["model.expert_layers"]
    if len(modality_dims) == 1 and expert_layers:
        raise ConfigError("single-modality runs need model.expert_layers = 0")
    return DenoiserConfig(
        depth=config["model.depth"],
        hidden_dim=config["model.hidden_dim"],
        heads=config["model.heads"],
        patch=config["model.patch"],
        bottleneck_dim=config["model.bottleneck"],
        expert_layers=expert_layers,
        num_classes=config["data.classes"],
        class_drop_prob=config["model.class_drop"],
        tokens_per_side=config["data.image_size"] // config["model.patch"],
        modality_dims=dict(modality_dims),
        fourier_freqs=config["model.fourier_freqs"],
    )


def cascade_sampler_from(config: RunConfig) -> CascadedTimeSampler:
    return CascadedTimeSampler(
        p_latent=config["sampler.p_latent"],
        mu_latent=config["sampler.mu_latent"],
        sigma_latent=config["sampler.sigma_latent"],
        mu_pixel=config["sampler.mu_pixel"],
        sigma_pixel=config["sampler.sigma_pixel"],
        early_frac=config["sampler.early_frac"],
        beta_max=config["sampler.beta_max"],
    )


def _step_times(config, rng, batch, bundle, cascade_sampler):
    names = sorted(bundle.tokens)
    regime = config["train.regime"]
    if regime == "multischedule":
        times = sample_times_multischedule(rng, bundle.stds, size=batch)
        active = {m: np.ones(batch, bool) for m in names}
    elif "latent" not in names:
        t = logit_normal(rng, cascade_sampler.mu_pixel, cascade_sampler.sigma_pixel,
                         batch)
        times = {"pixel": t}
        active = {"pixel": np.ones(batch, bool)}
    elif config["sample.plan"] == "cascaded":
        times, active = sample_times_cascaded(rng, cascade_sampler, batch)
    else:
        schedules = named_plan_schedules(config["sample.plan"])
        times, active = sample_times_single_schedule(rng, cascade_sampler,
                                                     schedules, batch)
    return times, active


def make_batch(config: RunConfig, bundle: ModalityBundle,
               cascade_sampler: CascadedTimeSampler, labels_all: np.ndarray,
               step: int, worker: int) -> dict:
    """Pure function of (config seed, worker, step)."""
    rng = stream(config["train.seed"], worker, step)
    n = len(labels_all)
    batch = config["train.batch"]
    idx = rng.choice(n, size=min(batch, n), replace=False)
    times, active = _step_times(config, rng, len(idx), bundle, cascade_sampler)
    tokens = {m: bundle.tokens[m][idx] for m in bundle.tokens}
    noised = NoisedBatch.create(rng, tokens, times, dtype=np.float32)
    if config["train.unconditional"]:
        labels = np.full(len(idx), NULL_CLASS, dtype=np.int64)
    else:
        labels = labels_all[idx].copy()
        drop = rng.uniform(size=len(idx)) < config["model.class_drop"]
        labels[drop] = NULL_CLASS
    return dict(z=noised.z, x=tokens, times=times, labels=labels, active=active,
                batch_seed=(config["train.seed"], worker, step))


@dataclass
class TrainResult:
    params: dict
    shadow: dict
    denoiser_config: DenoiserConfig
    bundle: ModalityBundle
    log_rows: list
    final_path: str | None = None
    weak_path: str | None = None


def train(config: RunConfig, dataset: Dataset | None = None, out_dir=None,
          writer=None, progress=None) -> TrainResult:
    """Run the configured regime end to end.

    When out_dir/writer is given, emits ckpt_final.lfck, ckpt_weak.lfck
    (the 30%-of-training reference for AutoGuidance), train_log.csv, and a
    config echo. Raises TrainingDivergedError with the offending batch
    seed if the loss goes non-finite.
    """
    if dataset is None:
        path = config["data.path"]
        if not os.path.exists(path):
            raise ConfigError(f"dataset {path!r} does not exist; run gen-data first")
        dataset = load_dataset(path)
    if dataset.num_classes != config["data.classes"]:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, config says "
            f"{config['data.classes']}"
        )

    bundle = build_modalities(config, dataset)
    names = sorted(bundle.tokens)
    dn_cfg = build_denoiser_config(
        config, {m: bundle.specs[m].token_dim for m in names}
    )
    params = init_params(dn_cfg, seed=config["train.seed"], dtype=np.float32)
    shadow = {k: v.copy() for k, v in params.items()}
    opt = Adam(params, lr=config["train.lr"], beta1=config["train.beta1"],
               beta2=config["train.beta2"], warmup_steps=config["train.warmup_steps"])
    cascade_sampler = cascade_sampler_from(config)

    balancer = None
    if "latent" in names and config.latent_loss_weight() is None:
        balancer = LossBalancer(names, anchor="pixel",
                                initial={m: bundle.specs[m].loss_weight for m in names})
    fixed_weights = {m: bundle.specs[m].loss_weight for m in names}
    t_clip = config.t_clip()

    steps_per_epoch = max(1, len(dataset) // config["train.batch"])
    total_steps = config["train.epochs"] * steps_per_epoch
    weak_step = min(total_steps,
                    math.ceil(0.3 * config["train.epochs"]) * steps_per_epoch)
    workers = effective_workers(config["train.workers"])

    def batch_for(step):
        return make_batch(config, bundle, cascade_sampler, dataset.labels,
                          step, step % workers)

    log_rows = []
    result = TrainResult(params=params, shadow=shadow, denoiser_config=dn_cfg,
                         bundle=bundle, log_rows=log_rows)

    def handle_step(step, batch):
        weights = balancer.weights() if balancer else fixed_weights
        spec = LossSpec(weights=weights, t_clip=t_clip)
        try:
            total, comps, grads = loss_and_grad(params, dn_cfg, batch, spec)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(
                f"non-finite loss at step {step}", step=step,
                batch_seed=batch["batch_seed"],
            ) from exc
        if balancer:
            balancer.update(comps)
        opt.step(params, grads)
        ema_update(shadow, params, config["train.ema"])
        if step % config["train.log_every"] == 0 or step == total_steps - 1:
            log_rows.append((
                step, total, comps.get("pixel", 0.0), comps.get("latent", 0.0),
                weights.get("pixel", 0.0), weights.get("latent", 0.0),
                opt.lr * min(1.0, opt.t / opt.warmup_steps) if opt.warmup_steps else opt.lr,
            ))
            if progress:
                progress(step, total_steps, total)
        if step + 1 == weak_step and writer is not None:
            save_run_checkpoint(writer.path("ckpt_weak.lfck"), result, config,
                                step + 1)
            writer.add(writer.path("ckpt_weak.lfck"))

    if workers == 1:
        for step in range(total_steps):
            handle_step(step, batch_for(step))
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = {}
            horizon = min(workers + 1, total_steps)
            for step in range(horizon):
                pending[step] = pool.submit(batch_for, step)
            for step in range(total_steps):
                batch = pending.pop(step).result()
                nxt = step + horizon
                if nxt < total_steps:
                    pending[nxt] = pool.submit(batch_for, nxt)
                handle_step(step, batch)

    if writer is not None:
        final = save_run_checkpoint(writer.path("ckpt_final.lfck"), result, config,
                                    total_steps)
        writer.add(final)
        result.final_path = final
        weak = writer.path("ckpt_weak.lfck")
        if os.path.exists(weak):
            result.weak_path = weak
        log_path = writer.path("train_log.csv")
        write_csv(log_path, TRAIN_LOG_HEADER, log_rows)
        writer.add(log_path)
    return result


# checkpoint round-trip ----------------------------------------------------


def _encode_array(arr) -> str:
    flat = np.atleast_1d(np.asarray(arr, dtype=np.float64)).ravel()
    return ",".join(repr(float(v)) for v in flat)


def _decode_array(text: str) -> np.ndarray:
    vals = np.array([float(v) for v in text.split(",")], dtype=np.float64)
    return vals[0] * np.ones(()) if vals.size == 1 else vals


def save_run_checkpoint(path, result: TrainResult, config: RunConfig,
                        step: int) -> str:
    meta = {f"config.{k}": v for k, v in config.items()}
    meta["seed"] = config["train.seed"]
    meta["step"] = step
    meta["pixel_std"] = repr(result.bundle.pixel_std)
    for m, norm in result.bundle.normalizers.items():
        meta[f"norm.{m}.scale"] = _encode_array(norm.scale)
        meta[f"norm.{m}.offset"] = _encode_array(norm.offset)
        meta[f"std.{m}"] = repr(result.bundle.specs[m].std_after_norm)
    tensors = {f"model.{k}": v for k, v in result.params.items()}
    tensors.update({f"ema.{k}": v for k, v in result.shadow.items()})
    return save_checkpoint(path, tensors, meta)


@dataclass
class LoadedRun:
    params: dict
    shadow: dict
    denoiser_config: DenoiserConfig
    config: RunConfig
    normalizers: dict
    stds: dict
    step: int

    def denoiser(self, use_ema: bool = True) -> ModelDenoiser:
        return ModelDenoiser(self.shadow if use_ema else self.params,
                             self.denoiser_config)

    def pixel_decoder(self):
        return codec.PixelEncoder(self.config["model.patch"])


def load_run(path) -> LoadedRun:
    tensors, meta = load_checkpoint(path)
    overrides = {k[len("config."):]: v for k, v in meta.items()
                 if k.startswith("config.")}
    config = RunConfig(overrides)
    params = {k[len("model."):]: v for k, v in tensors.items()
              if k.startswith("model.")}
    shadow = {k[len("ema."):]: v for k, v in tensors.items() if k.startswith("ema.")}
    names = ["pixel"] + (["latent"] if any(k.startswith("embed.latent") for k in params) else [])
    dims = {"pixel": params["embed.pixel.in.w"].shape[0]}
    if "latent" in names:
        dims["latent"] = params["embed.latent.in.w"].shape[0]
    dn_cfg = build_denoiser_config(config, dims)
    normalizers = {}
    stds = {}
    for m in names:
        normalizers[m] = codec.Normalizer(
            scale=_decode_array(meta[f"norm.{m}.scale"]),
            offset=_decode_array(meta[f"norm.{m}.offset"]),
        )
        stds[m] = float(meta[f"std.{m}"])
    return LoadedRun(params=params, shadow=shadow, denoiser_config=dn_cfg,
                     config=config, normalizers=normalizers, stds=stds,
                     step=int(meta["step"]))
