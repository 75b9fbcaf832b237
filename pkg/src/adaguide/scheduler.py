"""Noise schedules, signal-to-noise ratio and discrete timestep grids.

Three schedule families are supported, all parameterized on continuous time
``t`` in ``[0, 1]`` with ``x_t = alpha(t) * x_0 + sigma(t) * eps``:

* ``vp-linear``: variance preserving with linear ``beta(t)``.
* ``vp-cosine``: variance preserving cosine rule with offset ``s``.
* ``rectified-flow``: ``alpha = 1 - t``, ``sigma = t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

KINDS = ("vp-linear", "vp-cosine", "rectified-flow")

_DEFAULT_PARAMS = {
    "vp-linear": {"beta_min": 0.1, "beta_max": 20.0},
    "vp-cosine": {"s": 0.008},
    "rectified-flow": {},
}

# Valid (clamped) time domain per kind. alpha or sigma vanishes at the open ends.
_DOMAINS = {
    "vp-linear": (1e-5, 1.0),
    "vp-cosine": (1e-5, 1.0 - 1e-3),
    "rectified-flow": (1e-3, 1.0 - 1e-3),
}


class DomainError(ValueError):
    """Raised for times outside a schedule's clamped domain or bad parameters."""


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(_DEFAULT_PARAMS[self.kind])
        if unknown:
            raise DomainError(f"unknown parameters for {self.kind}: {sorted(unknown)}")
        merged = {**_DEFAULT_PARAMS[self.kind], **{k: float(v) for k, v in self.params.items()}}
        if self.kind == "vp-linear":
            if not (0.0 <= merged["beta_min"] < merged["beta_max"]):
                raise DomainError("vp-linear requires 0 <= beta_min < beta_max")
        elif self.kind == "vp-cosine":
            if not merged["s"] > 0.0:
                raise DomainError("vp-cosine requires s > 0")
        object.__setattr__(self, "params", MappingProxyType(merged))

    @property
    def domain(self) -> tuple[float, float]:
        return _DOMAINS[self.kind]

    def clamp(self, t: float) -> float:
        lo, hi = self.domain
        return min(max(float(t), lo), hi)

    def describe(self) -> str:
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v:g}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.params.items()))))

    def __eq__(self, other):
        if not isinstance(other, NoiseSchedule):
            return NotImplemented
        return self.kind == other.kind and dict(self.params) == dict(other.params)


def _check_time(schedule: NoiseSchedule, t: float) -> float:
    t = float(t)
    lo, hi = schedule.domain
    if not (lo <= t <= hi):
        raise DomainError(f"t={t!r} outside clamped domain [{lo}, {hi}] of {schedule.kind}")
    return t


def alpha_bar(schedule: NoiseSchedule, t: float) -> float:
    """Cumulative signal variance ``alpha(t)**2`` of a VP schedule, unclamped on [0, 1]."""
    if schedule.kind == "vp-linear":
        b0, b1 = schedule.params["beta_min"], schedule.params["beta_max"]
        integral = b0 * t + 0.5 * t * t * (b1 - b0)
        return math.exp(-integral)
    if schedule.kind == "vp-cosine":
        s = schedule.params["s"]
        num = math.cos((t + s) / (1.0 + s) * math.pi / 2.0) ** 2
        den = math.cos(s / (1.0 + s) * math.pi / 2.0) ** 2
        return num / den
    raise DomainError(f"alpha_bar is only defined for VP schedules, not {schedule.kind}")


def alpha_sigma(schedule: NoiseSchedule, t: float) -> tuple[float, float]:
    """Signal and noise coefficients ``(alpha(t), sigma(t))``."""
    t = _check_time(schedule, t)
    if schedule.kind == "rectified-flow":
        return 1.0 - t, t
    if schedule.kind == "vp-linear":
        b0, b1 = schedule.params["beta_min"], schedule.params["beta_max"]
        half_integral = 0.5 * (b0 * t + 0.5 * t * t * (b1 - b0))
        # -expm1 keeps sigma accurate when the integral is tiny.
        return math.exp(-half_integral), math.sqrt(-math.expm1(-2.0 * half_integral))
    abar = alpha_bar(schedule, t)
    return math.sqrt(abar), math.sqrt(1.0 - abar)


def snr(schedule: NoiseSchedule, t: float) -> float:
    """Signal-to-noise ratio ``alpha(t) / sigma(t)``."""
    a, s = alpha_sigma(schedule, t)
    return a / s


@dataclass(frozen=True)
class TimestepGrid:
    """Sampling times in the order they are visited, largest first.

    ``terminal_time`` is where the final update lands; the sampler returns the
    clean-data estimate there.
    """

    steps: tuple[float, ...]
    terminal_time: float

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("a grid needs at least one step")
        if any(b >= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("grid steps must be strictly decreasing")

    @property
    def T(self) -> int:
        return len(self.steps)

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def __getitem__(self, i):
        return self.steps[i]


def _respread(values: list[float], lo: float, hi: float) -> list[float]:
    """Clamp ascending ``values`` into ``[lo, hi]`` keeping them strictly increasing.

    Entries strictly inside the domain are kept. Entries on or past an edge are
    placed evenly between that edge and the nearest kept entry, the outermost
    one landing exactly on the edge.
    """
    inside = [i for i, v in enumerate(values) if lo < v < hi]
    out = list(values)
    n = len(values)
    if not inside:
        # Nothing strictly inside: spread the whole grid across the domain.
        if n == 1:
            return [hi]
        return [lo + (hi - lo) * i / (n - 1) for i in range(n)]
    first, last = inside[0], inside[-1]
    k = first  # entries below the domain
    for j in range(k):
        out[j] = lo + (values[first] - lo) * j / k
    k = n - 1 - last  # entries above the domain
    for j in range(1, k + 1):
        out[last + j] = values[last] + (hi - values[last]) * j / k
    return out


def make_grid(schedule: NoiseSchedule, T: int) -> TimestepGrid:
    """Uniform trailing grid ``t_i = i / T`` for ``i = T .. 1``, clamped to the schedule domain."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    lo, hi = schedule.domain
    ascending = _respread([i / T for i in range(1, T + 1)], lo, hi)
    return TimestepGrid(steps=tuple(reversed(ascending)), terminal_time=lo)


def grid_snr(schedule: NoiseSchedule, grid: TimestepGrid | Sequence[float]) -> np.ndarray:
    return np.array([snr(schedule, t) for t in grid])


def snr_crossing_step(schedule: NoiseSchedule, grid: TimestepGrid, threshold: float) -> int:
    """Number of leading grid steps whose SNR does not exceed ``threshold``.

    The comparison is strict: a step with SNR exactly equal to the threshold
    counts as not exceeding it. Returns ``T`` if the threshold is never
    exceeded and 0 if it is exceeded from the first step.
    """
    count = 0
    for t in grid:
        if snr(schedule, t) > threshold:
            break
        count += 1
    return count


def solve_snr_time(schedule: NoiseSchedule, target: float = 1.0) -> float:
    """Continuous time at which the SNR equals ``target`` (bisection on the clamped domain)."""
    lo, hi = schedule.domain
    f_lo, f_hi = snr(schedule, lo) - target, snr(schedule, hi) - target
    if f_lo < 0 or f_hi > 0:
        raise DomainError(f"SNR {target} is not attained on the domain of {schedule.kind}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if snr(schedule, mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)
