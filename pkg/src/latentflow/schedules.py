"""Time-schedule algebra for multi-time flows.

A schedule maps global time to a modality's own time: t_i = f_i(t_global),
with f non-decreasing, f(0)=0 and f(1)=1. Time runs from 0 (pure noise) to
1 (clean data). Four families are supported:

    identity          f(t) = t
    shift:<alpha>     f(t) = t*alpha / (1 + (alpha-1)*t)
    cascaded:<a>:<b>  flat 0 on [0,a], linear to 1 on [a,b], flat 1 on [b,1]
    linoffset:<o>     clip((t-o)/(1-o), 0, 1)

The shift family is the time warp that keeps the signal-to-noise ratio
fixed when the data is scaled by alpha, so shifting a modality's schedule
is interchangeable with rescaling its magnitude.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NotInvertibleError

SCHEDULE_KINDS = ("identity", "shift", "cascaded", "linoffset")


def shift_time(t, alpha):
    """Warp time by the SNR-preserving shift t*alpha / (1 + (alpha-1)*t).

    Accepts scalars or arrays in [0, 1]. alpha must be finite and > 0;
    alpha = 1 is the identity. Strictly increasing in t, with endpoints
    fixed: shift_time(0, a) = 0 and shift_time(1, a) = 1.
    """
    if not np.all(np.isfinite(alpha)) or np.any(np.asarray(alpha) <= 0):
        raise ValueError(f"shift alpha must be finite and > 0, got {alpha}")
    t_arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t_arr)):
        raise ValueError(f"time must be finite, got {t}")
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    # (1-t) + alpha*t is the same denominator as 1 + (alpha-1)*t but keeps
    # the endpoints exact: t=1 gives alpha/alpha = 1 for any alpha.
    out = t_arr * alpha / ((1.0 - t_arr) + alpha * t_arr)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Schedule:
    """A monotone time map f: [0,1] -> [0,1] with an inverse on its active range."""

    kind: str
    alpha: float = 1.0          # shift only
    start: float = 0.0          # cascaded segment start
    end: float = 1.0            # cascaded segment end
    offset: float = 0.0         # linoffset only

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "shift" and not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"shift alpha must be finite and > 0, got {self.alpha}")
        if self.kind == "cascaded" and not (0.0 <= self.start < self.end <= 1.0):
            raise ValueError(
                f"cascaded segment must satisfy 0 <= a < b <= 1, got ({self.start}, {self.end})"
            )
        if self.kind == "linoffset" and not (0.0 <= self.offset < 1.0):
            raise ValueError(f"linoffset offset must lie in [0, 1), got {self.offset}")

    @classmethod
    def identity(cls) -> "Schedule":
        return cls("identity")

    @classmethod
    def shift(cls, alpha: float) -> "Schedule":
        return cls("shift", alpha=float(alpha))

    @classmethod
    def cascaded(cls, start: float, end: float) -> "Schedule":
        return cls("cascaded", start=float(start), end=float(end))

    @classmethod
    def linear_offset(cls, offset: float) -> "Schedule":
        return cls("linoffset", offset=float(offset))

    def __call__(self, t_global):
        """Evaluate f(t_global); accepts scalars or arrays in [0, 1]."""
        t = np.asarray(t_global, dtype=float)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"global time must be finite, got {t_global}")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError(f"global time must lie in [0, 1], got {t_global}")
        if self.kind == "identity":
            out = t.copy()
        elif self.kind == "shift":
            out = t * self.alpha / ((1.0 - t) + self.alpha * t)
        elif self.kind == "cascaded":
            out = np.clip((t - self.start) / (self.end - self.start), 0.0, 1.0)
        else:
            out = np.clip((t - self.offset) / (1.0 - self.offset), 0.0, 1.0)
        return out if out.ndim else float(out)

    def active_range(self) -> tuple[float, float]:
        """Global-time interval on which f is strictly increasing."""
        if self.kind == "cascaded":
            return (self.start, self.end)
        if self.kind == "linoffset":
            return (self.offset, 1.0)
        return (0.0, 1.0)

    def invert(self, t_i):
        """Map a modality time back to global time on the advancing range.

        Raises NotInvertibleError when t_i is attained only on a flat
        segment boundary (e.g. t_i = 0 for cascaded with start > 0), where
        the preimage is an interval rather than a point.
        """
        t = np.asarray(t_i, dtype=float)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"modality time must be finite, got {t_i}")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError(f"modality time must lie in [0, 1], got {t_i}")
        if self.kind == "identity":
            out = t.copy()
        elif self.kind == "shift":
            inv = 1.0 / self.alpha
            out = t * inv / ((1.0 - t) + inv * t)
        elif self.kind == "cascaded":
            if self.start > 0.0 and np.any(t == 0.0):
                raise NotInvertibleError(
                    f"t_i=0 is flat on [0, {self.start}] for {self.format()}"
                )
            if self.end < 1.0 and np.any(t == 1.0):
                raise NotInvertibleError(
                    f"t_i=1 is flat on [{self.end}, 1] for {self.format()}"
                )
            out = self.start + t * (self.end - self.start)
        else:
            if self.offset > 0.0 and np.any(t == 0.0):
                raise NotInvertibleError(
                    f"t_i=0 is flat on [0, {self.offset}] for {self.format()}"
                )
            out = self.offset + t * (1.0 - self.offset)
        return out if out.ndim else float(out)

    def format(self) -> str:
        """Config-file name of this schedule (parse() round-trips it)."""
        if self.kind == "identity":
            return "identity"
        if self.kind == "shift":
            return f"shift:{self.alpha:g}"
        if self.kind == "cascaded":
            return f"cascaded:{self.start:g}:{self.end:g}"
        return f"linoffset:{self.offset:g}"

    @classmethod
    def parse(cls, name: str) -> "Schedule":
        """Parse a config-file schedule name.

        Accepted forms: `identity`, `shift:<alpha>`, `cascaded:<a>:<b>`,
        `linoffset:<o>`. Shift alphas accept `p/q` fractions (`shift:1/16`).
        """
        parts = name.strip().split(":")
        kind, args = parts[0], parts[1:]
        try:
            if kind == "identity" and not args:
                return cls.identity()
            if kind == "shift" and len(args) == 1:
                return cls.shift(parse_ratio(args[0]))
            if kind == "cascaded" and len(args) == 2:
                return cls.cascaded(float(args[0]), float(args[1]))
            if kind == "linoffset" and len(args) == 1:
                return cls.linear_offset(float(args[0]))
        except ValueError as exc:
            raise ValueError(f"bad schedule spec {name!r}: {exc}") from None
        raise ValueError(f"bad schedule spec {name!r}")


def parse_ratio(text: str) -> float:
    if "/" in text:
        num, den = text.split("/", 1)
        return float(num) / float(den)
    return float(text)


def convert_time(t_i, f_i: Schedule, f_j: Schedule):
    """Translate modality i's time to modality j's time at the same global time.

    Computes f_j(f_i^{-1}(t_i)); propagates NotInvertibleError from f_i.
    """
    return f_j(f_i.invert(t_i))


@dataclass(frozen=True)
class GenerationOrder:
    """Per-modality SNR at one global time; +inf marks a fully denoised modality."""

    snr: np.ndarray
    variances: np.ndarray


def generation_order(schedules, variances, t_global) -> GenerationOrder:
    """SNR trajectory entry f(t)^2 * V / (1 - f(t))^2 per modality.

    The SNR is the rate-of-information proxy that defines which modality is
    revealed first: larger values mean earlier generation. Entries are +inf
    exactly where f(t) = 1; never use the sentinel in arithmetic.
    """
    variances = np.asarray(variances, dtype=float)
    if np.any(variances <= 0) or not np.all(np.isfinite(variances)):
        raise ValueError(f"variances must be finite and > 0, got {variances}")
    fs = np.array([f(t_global) for f in schedules], dtype=float)
    snr = np.full_like(fs, np.inf)
    live = fs < 1.0
    snr[live] = fs[live] ** 2 * variances[live] / (1.0 - fs[live]) ** 2
    return GenerationOrder(snr=snr, variances=variances)
