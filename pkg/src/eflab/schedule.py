"""Corruption schedules and the interleaved text/image clock.

A schedule kappa maps time in [0, 1] to the probability that a data token
is present in the noisy sequence. It is also the CDF of insertion times at
generation, which is what couples image noise levels to text time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from eflab.errors import ConfigError, DomainError

KINDS = ("linear", "poly")


def clip_time(tau: float) -> float:
    return min(1.0, max(0.0, tau))


@dataclass(frozen=True)
class ExtendedTime:
    """A time on the extended training clock; ``tau`` lives in [-1, 2]."""

    tau: float

    def __post_init__(self):
        if not -1.0 <= self.tau <= 2.0:
            raise DomainError(f"extended time {self.tau} outside [-1, 2]")

    @property
    def clipped(self) -> float:
        return clip_time(self.tau)


@dataclass(frozen=True)
class Schedule:
    """kappa(t) = t ** exponent. ``linear`` is exponent 1."""

    kind: str = "linear"
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "linear" and self.exponent != 1.0:
            raise ConfigError("linear schedule takes no exponent")
        if not (self.exponent > 0 and math.isfinite(self.exponent)):
            raise ConfigError(f"schedule exponent must be positive, got {self.exponent}")

    @classmethod
    def linear(cls) -> Schedule:
        return cls("linear", 1.0)

    @classmethod
    def polynomial(cls, exponent: float) -> Schedule:
        return cls("poly", float(exponent))

    @classmethod
    def from_config(cls, cfg: dict) -> Schedule:
        cfg = dict(cfg)
        kind = cfg.pop("kind", "linear")
        exponent = cfg.pop("exponent", 1.0)
        if cfg:
            raise ConfigError(f"unknown schedule keys: {sorted(cfg)}")
        return cls(kind, float(exponent))

    def to_config(self) -> dict:
        if self.kind == "linear":
            return {"kind": "linear"}
        return {"kind": self.kind, "exponent": self.exponent}

    def kappa(self, t):
        return kappa(self, t)

    def kappa_dot(self, t):
        return kappa_dot(self, t)

    def rate_ratio(self, t):
        return kappa_rate_ratio(self, t)

    def inverse(self, u):
        return kappa_inverse(self, u)


def _check_unit(x, name: str, *, upper_open: bool = False) -> None:
    arr = np.asarray(x, dtype=float)
    bad = (arr < 0) | (arr >= 1 if upper_open else arr > 1) | ~np.isfinite(arr)
    if np.any(bad):
        interval = "[0, 1)" if upper_open else "[0, 1]"
        raise DomainError(f"{name} must lie in {interval}, got {x}")


def _out(arr):
    return float(arr) if np.ndim(arr) == 0 else arr


def kappa(s: Schedule, t):
    """Probability that a data token has survived corruption at time ``t``."""
    _check_unit(t, "t")
    t = np.asarray(t, dtype=float)
    return _out(t if s.exponent == 1.0 else t**s.exponent)


def kappa_dot(s: Schedule, t):
    _check_unit(t, "t")
    t = np.asarray(t, dtype=float)
    if s.exponent == 1.0:
        return _out(np.ones_like(t))
    return _out(s.exponent * t ** (s.exponent - 1.0))


def kappa_rate_ratio(s: Schedule, t):
    """kappa_dot / (1 - kappa): the per-token insertion hazard at time ``t``.

    Undefined at t = 1, where every remaining token must be inserted.
    """
    _check_unit(t, "t", upper_open=True)
    t = np.asarray(t, dtype=float)
    if s.exponent == 1.0:
        return _out(1.0 / (1.0 - t))
    p = s.exponent
    with np.errstate(divide="ignore"):
        survival = -np.expm1(p * np.log(t))
        return _out(p * t ** (p - 1.0) / survival)


def kappa_inverse(s: Schedule, u):
    _check_unit(u, "u")
    u = np.asarray(u, dtype=float)
    return _out(u if s.exponent == 1.0 else u ** (1.0 / s.exponent))


def sample_insertion_time(s: Schedule, rng: np.random.Generator, size=None):
    """Inverse-CDF draw of the time at which a missing token gets inserted."""
    return kappa_inverse(s, rng.random(size))


def sample_interleaved_time(s: Schedule, tau_text: float, rng: np.random.Generator) -> ExtendedTime:
    """Image clock lagging the text clock by one insertion-time draw."""
    if not 0.0 <= tau_text <= 2.0:
        raise DomainError(f"tau_text must lie in [0, 2], got {tau_text}")
    return ExtendedTime(tau_text - sample_insertion_time(s, rng))


def sample_independent_times(rng: np.random.Generator) -> tuple[float, float]:
    t_text, t_img = rng.random(2)
    return float(t_text), float(t_img)
