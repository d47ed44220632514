"""Joint ODE integration along a (f_pixel, f_latent) trajectory.

The integrator advances all modalities together with Euler or Heun steps.
Knots are spaced at equal L1 arc length along the schedule curve, which
reduces to uniform global spacing for linear schedules and to the 25+25
split for the cascaded pair at 50 steps. Velocities come from x-predictions
via v = (x_pred - z) / max(1 - t, eps_min); a modality whose schedule does
not advance over a step is carried through bit-identically (but still fed
to the denoiser as context).

Guidance combines velocities: inside the modality's configured time
interval, v = v_ref + omega * (v_primary - v_ref), where the reference is
the null-class pass (CFG) or a deliberately weaker model (AutoGuidance).
omega = 1 short-circuits to the primary velocity so guided and unguided
sampling are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ConfigError
from .rng import stream
from .schedules import Schedule, shift_time

EPS_MIN_DEFAULT = 1e-5

GUIDANCE_MODES = ("none", "cfg", "autoguidance")


@dataclass(frozen=True)
class GuidanceSpec:
    """Guidance mode, weight, and per-modality active time intervals."""

    mode: str = "none"
    omega: float = 1.0
    intervals: dict = field(default_factory=dict)  # modality -> (lo, hi)
    weak_ckpt: str | None = None

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise ConfigError(f"unknown guidance mode {self.mode!r}")
        if self.omega < 0:
            raise ConfigError(f"guidance weight must be >= 0, got {self.omega}")
        for name, (lo, hi) in self.intervals.items():
            if not (0.0 <= lo <= hi <= 1.0):
                raise ConfigError(f"bad guidance interval for {name!r}: [{lo}, {hi}]")

    def interval(self, modality: str) -> tuple[float, float]:
        return self.intervals.get(modality, (0.0, 1.0))


def guide(v_primary, v_reference, spec: GuidanceSpec, t_modality: float,
          modality: str = "pixel"):
    """Interval-gated guidance combination in velocity space.

    Outside [lo, hi], and whenever omega = 1 or mode is none, the primary
    velocity is returned untouched (the same array object, bit-exact).
    """
    if spec.mode == "none" or spec.omega == 1.0:
        return v_primary
    lo, hi = spec.interval(modality)
    if not lo <= t_modality <= hi:
        return v_primary
    return v_reference + spec.omega * (v_primary - v_reference)


def xpred_to_velocity(x_pred, z, t, eps_min: float = EPS_MIN_DEFAULT):
    """v = (x_pred - z) / max(1 - t, eps_min)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    div = np.maximum(1.0 - t, eps_min)
    if np.ndim(div):
        div = div.reshape(div.shape + (1,) * (np.ndim(x_pred) - 1))
    return (x_pred - z) / div


@dataclass(frozen=True)
class TrajectoryPlan:
    """Schedules plus precomputed per-modality times at every knot."""

    schedules: dict            # modality -> Schedule
    total_steps: int
    knots: np.ndarray          # (N+1,) strictly increasing global times
    times: dict                # modality -> (N+1,) schedule values at knots
    alpha_inf: float = 1.0

    def step_sizes(self, modality: str) -> np.ndarray:
        return np.diff(self.times[modality])


def plan_trajectory(schedules: dict, total_steps: int,
                    alpha_inf: float = 1.0) -> TrajectoryPlan:
    """Knots at equal L1 arc length along the joint schedule curve.

    Because every schedule is non-decreasing from 0 to 1, the arc length
    from 0 to t is just the sum of schedule values, so knot k solves
    sum_i f_i(t_k) = k * n_modalities / N. An optional inference-time shift
    warps the latent schedule: f_latent' = shift(f_latent(t), alpha_inf).
    """
    if total_steps < 1:
        raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
    if alpha_inf <= 0:
        raise ConfigError(f"alpha_inf must be > 0, got {alpha_inf}")

    def evaluate(name: str, t):
        value = schedules[name](t)
        if name == "latent" and alpha_inf != 1.0:
            value = shift_time(value, alpha_inf)
        return value

    names = sorted(schedules)

    def arc(t):
        return sum(float(evaluate(name, t)) for name in names)

    total = float(len(names))
    knots = np.empty(total_steps + 1)
    knots[0], knots[-1] = 0.0, 1.0
    for k in range(1, total_steps):
        target = total * k / total_steps
        knots[k] = optimize.brentq(lambda t: arc(t) - target, 0.0, 1.0, xtol=1e-14)
    if np.any(np.diff(knots) <= 0):
        raise ConfigError("knots not strictly increasing; schedules must advance jointly")
    times = {name: np.array([evaluate(name, t) for t in knots]) for name in names}
    return TrajectoryPlan(schedules=dict(schedules), total_steps=total_steps,
                          knots=knots, times=times, alpha_inf=alpha_inf)


PLAN_FAMILIES = ("cascaded", "identity", "shift", "linoffset")


def named_plan_schedules(name: str) -> dict:
    """Map a plan family name to its (latent, pixel) schedule pair.

    cascaded          latent on [0, 0.5], pixel on [0.5, 1]
    shift:<alpha>     latent shifted, pixel linear
    linoffset:<o>     latent linear, pixel delayed by the offset
    identity          both linear
    """
    kind = name.split(":")[0]
    if kind == "cascaded" and ":" not in name:
        return {"latent": Schedule.cascaded(0.0, 0.5), "pixel": Schedule.cascaded(0.5, 1.0)}
    if kind == "identity":
        return {"latent": Schedule.identity(), "pixel": Schedule.identity()}
    if kind == "shift":
        return {"latent": Schedule.parse(name), "pixel": Schedule.identity()}
    if kind == "linoffset":
        return {"latent": Schedule.identity(), "pixel": Schedule.parse(name)}
    if kind == "cascaded":
        return {"latent": Schedule.parse(name),
                "pixel": Schedule.cascaded(Schedule.parse(name).end, 1.0)}
    raise ConfigError(f"unknown plan family {name!r}")


class EvalCounter:
    """Counts denoiser evaluations per pass for NFE assertions."""

    def __init__(self):
        self.primary = 0
        self.reference = 0


def _velocities(states, times_k, denoiser, guidance, weak, labels, eps_min,
                counter=None, exact_divisor=False):
    preds = denoiser.predict(states, times_k, labels)
    if counter is not None:
        counter.primary += 1
    def to_velocity(pred, z, t):
        if not exact_divisor:
            return xpred_to_velocity(pred, z, t, eps_min)
        # exact 1 - t divisor; a modality already at t = 1 cannot advance,
        # so its (unused) velocity is defined as zero
        div = 1.0 - t
        return (pred - z) / div if div > 0.0 else np.zeros_like(pred)

    vel = {m: to_velocity(pred, states[m], times_k[m]) for m, pred in preds.items()}

    spec = guidance or GuidanceSpec()
    if spec.mode == "none" or spec.omega == 1.0:
        return vel
    gates = {m: spec.interval(m)[0] <= times_k[m] <= spec.interval(m)[1] for m in vel}
    if not any(gates.values()):
        return vel
    if spec.mode == "cfg":
        ref_preds = denoiser.predict(states, times_k, None)
    else:
        if weak is None:
            raise ConfigError("autoguidance requires a weak reference model")
        ref_preds = weak.predict(states, times_k, labels)
    if counter is not None:
        counter.reference += 1
    for m in vel:
        v_ref = to_velocity(ref_preds[m], states[m], times_k[m])
        vel[m] = guide(vel[m], v_ref, spec, times_k[m], m)
    return vel


def _apply_step(states, vel, deltas):
    out = {}
    for m, z in states.items():
        if deltas[m] == 0.0:
            out[m] = z  # zero-step modalities are never mutated
        else:
            out[m] = z + deltas[m] * vel[m]
    return out


def joint_step_euler(states: dict, plan: TrajectoryPlan, k: int, denoiser,
                     guidance=None, weak=None, labels=None,
                     eps_min: float = EPS_MIN_DEFAULT, counter=None) -> dict:
    """z_i <- z_i + (f_i(t_{k+1}) - f_i(t_k)) * v_i."""
    if not 0 <= k < plan.total_steps:
        raise ValueError(f"step index {k} out of range [0, {plan.total_steps})")
    times_k = {m: plan.times[m][k] for m in states}
    deltas = {m: plan.times[m][k + 1] - plan.times[m][k] for m in states}
    vel = _velocities(states, times_k, denoiser, guidance, weak, labels, eps_min,
                      counter)
    return _apply_step(states, vel, deltas)


def joint_step_heun(states: dict, plan: TrajectoryPlan, k: int, denoiser,
                    guidance=None, weak=None, labels=None,
                    eps_min: float = EPS_MIN_DEFAULT,
                    substitute_final: bool = True, counter=None) -> dict:
    """Predictor-corrector step: average the velocities at both knot ends.

    On the final step (k = N-1) the default is to substitute the raw
    x-prediction for the endpoint state of every advancing modality, which
    is the same single evaluation as an Euler step with the exact 1 - t
    divisor and avoids the clamp bias at t = 1. Pass substitute_final=False
    to run the plain two-evaluation corrector all the way to the end.
    """
    if not 0 <= k < plan.total_steps:
        raise ValueError(f"step index {k} out of range [0, {plan.total_steps})")
    times_k = {m: plan.times[m][k] for m in states}
    times_k1 = {m: plan.times[m][k + 1] for m in states}
    deltas = {m: times_k1[m] - times_k[m] for m in states}

    if substitute_final and k == plan.total_steps - 1:
        vel = _velocities(states, times_k, denoiser, guidance, weak, labels,
                          eps_min, counter, exact_divisor=True)
        return _apply_step(states, vel, deltas)

    v1 = _velocities(states, times_k, denoiser, guidance, weak, labels, eps_min,
                     counter)
    predicted = _apply_step(states, v1, deltas)
    v2 = _velocities(predicted, times_k1, denoiser, guidance, weak, labels,
                     eps_min, counter)
    avg = {m: 0.5 * (v1[m] + v2[m]) for m in states}
    return _apply_step(states, avg, deltas)


def integrate(denoiser, plan: TrajectoryPlan, z0: dict, labels=None,
              guidance=None, weak=None, solver: str = "heun",
              eps_min: float = EPS_MIN_DEFAULT, substitute_final: bool = True,
              latent_noise: float = 0.0, latent_noise_eps=None,
              counter=None) -> dict:
    """Run all N steps from pure-noise states to t_global = 1.

    latent_noise > 0 re-noises the finished latent once at the start of the
    pixel phase, z <- (1-b)*z + b*eps, and feeds the model the reduced
    latent time 1-b from then on. Only meaningful for cascaded plans, where
    the latent is complete before pixels start.
    """
    if solver not in ("euler", "heun"):
        raise ConfigError(f"unknown solver {solver!r}")
    spec = guidance or GuidanceSpec()
    if spec.mode == "autoguidance" and spec.omega != 1.0 and weak is None:
        raise ConfigError("autoguidance requires a weak reference model")
    if latent_noise > 0.0:
        if "latent" not in z0:
            raise ConfigError("latent_noise needs a latent modality")
        lat_steps = plan.step_sizes("latent")
        pix_start = int(np.argmax(plan.step_sizes("pixel") > 0))
        if np.any(lat_steps[pix_start:] != 0.0):
            raise ConfigError(
                "latent_noise requires a cascaded plan (latent finished "
                "before pixels start)"
            )
        if not 0.0 < latent_noise < 1.0:
            raise ConfigError(f"latent_noise must lie in (0, 1), got {latent_noise}")
    states = dict(z0)
    for k in range(plan.total_steps):
        if latent_noise > 0.0 and k == pix_start:
            eps = latent_noise_eps if latent_noise_eps is not None \
                else stream(0xB0).standard_normal(states["latent"].shape)
            states["latent"] = (1.0 - latent_noise) * states["latent"] \
                + latent_noise * eps
            times = {m: plan.times[m].copy() for m in plan.times}
            times["latent"][pix_start:] = 1.0 - latent_noise
            plan = TrajectoryPlan(schedules=plan.schedules,
                                  total_steps=plan.total_steps,
                                  knots=plan.knots, times=times,
                                  alpha_inf=plan.alpha_inf)
        if solver == "euler":
            states = joint_step_euler(states, plan, k, denoiser, guidance, weak,
                                      labels, eps_min, counter)
        else:
            states = joint_step_heun(states, plan, k, denoiser, guidance, weak,
                                     labels, eps_min, substitute_final, counter)
    return states


def sample_batch(denoiser, plan: TrajectoryPlan, n: int, seed: int,
                 class_labels=None, guidance=None, weak=None,
                 solver: str = "heun", pixel_decoder=None,
                 pixel_normalizer=None, eps_min: float = EPS_MIN_DEFAULT,
                 latent_noise: float = 0.0, shard_size: int = 256,
                 counter=None):
    """Draw n samples: unit-Gaussian init, integrate, decode pixels.

    The generated latent is discarded; pixels are denormalized, decoded to
    images when a decoder is given, and clamped to [-1, 1]. Same seed and
    checkpoint give bit-identical batches regardless of shard size.
    """
    rng = stream(seed)
    shapes = denoiser.modality_shapes
    z0 = {m: rng.standard_normal((n,) + tuple(shapes[m])) for m in sorted(shapes)}
    renoise = rng.standard_normal((n,) + tuple(shapes["latent"])) \
        if latent_noise > 0.0 else None
    if class_labels is not None:
        class_labels = np.asarray(class_labels)
        if class_labels.shape[0] != n:
            raise ValueError(f"need {n} labels, got {class_labels.shape[0]}")

    outs = []
    for lo in range(0, n, shard_size):
        hi = min(lo + shard_size, n)
        shard_z = {m: z0[m][lo:hi] for m in z0}
        shard_labels = None if class_labels is None else class_labels[lo:hi]
        final = integrate(
            denoiser, plan, shard_z, shard_labels, guidance, weak, solver,
            eps_min, latent_noise=latent_noise,
            latent_noise_eps=None if renoise is None else renoise[lo:hi],
            counter=counter,
        )
        outs.append(final["pixel"])
    pixels = np.concatenate(outs, axis=0)
    if pixel_normalizer is not None:
        pixels = pixel_normalizer.invert(pixels)
    if pixel_decoder is not None:
        pixels = pixel_decoder.decode(pixels)
    return np.clip(pixels, -1.0, 1.0)
