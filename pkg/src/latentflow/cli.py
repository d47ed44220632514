"""Command-line entry points.

Every command writes its artifacts under --out and finishes by writing
manifest.txt with the SHA-256 of each file, so identical seeds reproduce
identical manifests.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, load_config, save_config
from .dataset import generate_shapes, load_dataset, save_dataset, write_ppm_grid
from .errors import ConfigError
from .manifest import ArtifactWriter
from .metrics import SNR_TRACE_HEADER, psnr_grid, snr_trace, write_csv
from .sampling import GuidanceSpec, named_plan_schedules, plan_trajectory
from .sweeps import (
    ABLATION_GRIDS,
    ABLATION_HEADER,
    ORDER_ALPHAS,
    ORDER_SWEEP_HEADER,
    eval_labels,
    held_out_images,
    proxy_distance,
    sample_run,
    sweep_ablate,
    sweep_order,
)
from .training import build_modalities, load_run, train


def _load_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    return config.override(overrides) if overrides else config


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")


def _guidance_from(args, config: RunConfig) -> GuidanceSpec:
    mode = args.guidance if args.guidance is not None else config["guide.mode"]
    omega = args.omega if args.omega is not None else config["guide.omega"]
    intervals = {
        "latent": config.guidance_interval("latent"),
        "pixel": config.guidance_interval("pixel"),
    }
    if args.interval:
        lo, _, hi = args.interval.partition(":")
        intervals = {m: (float(lo), float(hi)) for m in intervals}
    weak = args.weak_ckpt or (config["guide.weak_ckpt"] or None)
    return GuidanceSpec(mode=mode, omega=float(omega), intervals=intervals,
                        weak_ckpt=weak)


def cmd_gen_data(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    dataset = generate_shapes(config["data.size"], config["data.seed"],
                              config["data.image_size"])
    path = writer.path(config["data.path"])
    for written in save_dataset(path, dataset):
        writer.add(written)
    manifest = writer.finalize()
    print(f"wrote {len(dataset)} samples to {path}")
    print(f"manifest: {manifest}")


def cmd_train(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    data_path = config["data.path"]
    if not os.path.isabs(data_path) and not os.path.exists(data_path):
        candidate = os.path.join(args.out, data_path)
        if os.path.exists(candidate):
            config = config.override({"data.path": candidate})

    def progress(step, total, loss):
        print(f"step {step}/{total} loss {loss:.4f}", flush=True)

    cfg_path = writer.path("config.cfg")
    save_config(cfg_path, config)
    writer.add(cfg_path)
    result = train(config, out_dir=args.out, writer=writer,
                   progress=progress if args.verbose else None)
    manifest = writer.finalize()
    print(f"final checkpoint: {result.final_path}")
    print(f"manifest: {manifest}")


def cmd_sample(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    run = load_run(args.ckpt)
    plan_name = args.schedule or run.config["sample.plan"]
    steps = args.steps or run.config["sample.steps"]
    solver = args.solver or run.config["sample.solver"]
    alpha_inf = args.alpha_inf if args.alpha_inf is not None \
        else run.config["sample.alpha_inf"]
    plan = plan_trajectory(named_plan_schedules(plan_name), steps, alpha_inf)
    guidance = _guidance_from(args, config)
    weak_run = load_run(guidance.weak_ckpt) if (
        guidance.mode == "autoguidance" and guidance.weak_ckpt) else None
    seed = args.seed if args.seed is not None else run.config["sample.seed"]
    labels = eval_labels(run, args.n)
    images = sample_run(run, plan, args.n, seed, class_labels=labels,
                        guidance=guidance, weak_run=weak_run, solver=solver,
                        latent_noise=args.latent_noise)
    grid_path = writer.write("samples.ppm",
                             lambda p: write_ppm_grid(p, images))
    npy_path = writer.write("samples.npy", lambda p: np.save(p, images))
    manifest = writer.finalize()
    print(f"sampled {args.n} images -> {grid_path}, {npy_path}")
    print(f"manifest: {manifest}")


def cmd_eval_fd(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    run = load_run(args.ckpt)
    reference = held_out_images(run.config, args.n)
    plan = plan_trajectory(named_plan_schedules(args.schedule or
                                                run.config["sample.plan"]),
                           args.steps or run.config["sample.steps"],
                           run.config["sample.alpha_inf"])
    images = sample_run(run, plan, args.n, args.seed or 0,
                        class_labels=eval_labels(run, args.n))
    fd = proxy_distance(images, reference)
    path = writer.write("eval_fd.csv",
                        lambda p: write_csv(p, ("n", "frechet_distance"),
                                            [(args.n, fd)]))
    writer.finalize()
    print(f"frechet proxy distance: {fd:.6f} ({path})")


def cmd_snr_trace(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    plan = plan_trajectory(named_plan_schedules(args.schedule), args.steps,
                           config["sample.alpha_inf"])
    rows = snr_trace(plan, {"latent": args.var_latent, "pixel": args.var_pixel})
    path = writer.write("snr_trace.csv",
                        lambda p: write_csv(p, SNR_TRACE_HEADER, rows))
    writer.finalize()
    print(f"wrote {len(rows)} knots to {path}")


def cmd_psnr_grid(args):
    config = _load_config(args)
    writer = ArtifactWriter(args.out)
    run = load_run(args.ckpt)
    dataset = load_dataset(args.data)
    bundle = build_modalities(run.config, dataset)
    take = min(args.n, len(dataset))
    samples = {m: bundle.tokens[m][:take].astype(np.float64)
               for m in bundle.tokens}
    denoiser = run.denoiser(use_ema=run.config["sample.use_ema"])

    def predict(states, times):
        return denoiser.predict(states, times)

    grid = psnr_grid(predict, samples, grid_points=args.grid_points,
                     seed=args.seed or 0)
    rows = []
    for i, t_lat in enumerate(grid.t_values):
        for j, t_pix in enumerate(grid.t_values):
            rows.append((t_lat, t_pix,
                         *(grid.db[m][i, j] for m in sorted(grid.db))))
    header = ("t_latent", "t_pixel") + tuple(f"psnr_{m}" for m in sorted(grid.db))
    path = writer.write("psnr_grid.csv", lambda p: write_csv(p, header, rows))
    writer.finalize()
    print(f"wrote {len(rows)} cells to {path}")


def cmd_sweep_order(args):
    from .schedules import parse_ratio

    writer = ArtifactWriter(args.out)
    run = load_run(args.ckpt)
    alphas = [parse_ratio(a) for a in args.alphas.split(",")] \
        if args.alphas else list(ORDER_ALPHAS)
    reference = held_out_images(run.config, args.n)
    rows = sweep_order(run, reference, alphas=alphas, n=args.n,
                       seed=args.seed or 0, steps=args.steps)
    path = writer.write("sweep_order.csv",
                        lambda p: write_csv(p, ORDER_SWEEP_HEADER, rows))
    writer.finalize()
    for alpha, fd in rows:
        print(f"alpha {alpha:g}: fd {fd:.6f}")
    print(f"wrote {path}")


def cmd_sweep_ablate(args):
    writer = ArtifactWriter(args.out)
    entries = []
    for item in args.runs:
        value, sep, path = item.partition("=")
        if not sep:
            raise ConfigError(f"--runs expects value=ckpt_path, got {item!r}")
        entries.append((value, load_run(path)))
    if not entries:
        raise ConfigError(
            f"no runs given; train one per value in the {args.axis} grid "
            f"{ABLATION_GRIDS[args.axis]} first"
        )
    reference = held_out_images(entries[0][1].config, args.n)
    rows = sweep_ablate(args.axis, entries, reference, n=args.n,
                        seed=args.seed or 0)
    path = writer.write(f"sweep_{args.axis}.csv",
                        lambda p: write_csv(p, ABLATION_HEADER, rows))
    writer.finalize()
    for value, fd in rows:
        print(f"{args.axis} {value}: fd {fd:.6f}")
    print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latentflow",
        description="joint flow matching over pixels and a deterministic latent",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model per the config")
    _add_common(p)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="sample images from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--steps", type=int)
    p.add_argument("--solver", choices=["euler", "heun"])
    p.add_argument("--schedule", help="plan family: cascaded|identity|shift:A|linoffset:O")
    p.add_argument("--guidance", choices=["none", "cfg", "autoguidance"])
    p.add_argument("--omega", type=float)
    p.add_argument("--interval", metavar="LO:HI")
    p.add_argument("--weak-ckpt", dest="weak_ckpt")
    p.add_argument("--alpha-inf", dest="alpha_inf", type=float)
    p.add_argument("--latent-noise", dest="latent_noise", type=float, default=0.0,
                   help="re-noise the latent at pixel-phase start (cascaded only)")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval-fd", help="Frechet proxy distance vs held-out data")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--steps", type=int)
    p.add_argument("--schedule")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_eval_fd)

    p = sub.add_parser("snr-trace", help="SNR trajectory CSV for a plan")
    _add_common(p)
    p.add_argument("--schedule", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--var-latent", type=float, default=1.0)
    p.add_argument("--var-pixel", type=float, default=1.0)
    p.set_defaults(fn=cmd_snr_trace)

    p = sub.add_parser("psnr-grid", help="reconstruction PSNR over the time square")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset file for held-out samples")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--grid-points", type=int, default=9)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_psnr_grid)

    p = sub.add_parser("sweep-order", help="proxy distance across latent shifts")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--alphas", help="comma list, fractions allowed (1/16)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sweep_order)

    p = sub.add_parser("sweep-ablate", help="proxy distance across an ablation axis")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    p.add_argument("--runs", nargs="*", default=[], metavar="VALUE=CKPT",
                   help="one trained checkpoint per grid value")
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_sweep_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
