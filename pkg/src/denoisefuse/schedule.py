"""Diffusion noise schedule and the per-step constants used by training and fusion.

Timesteps are 1-based: ``beta[t - 1]`` is the increment of step ``t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ScheduleError, ShapeError

NOISE_SCALES = ("c2", "sigma")


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with cached ``alpha`` and cumulative ``alpha_bar`` tables."""

    T: int
    beta_start: float
    beta_end: float
    kind: str = "linear"
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind != "linear":
            raise ScheduleError(f"unsupported schedule kind {self.kind!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ScheduleError(f"T must be a positive integer, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ScheduleError(
                f"need 0 < beta_start <= beta_end < 1, got beta_start={self.beta_start}, "
                f"beta_end={self.beta_end}"
            )
        beta = np.linspace(self.beta_start, self.beta_end, int(self.T), dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def params(self) -> dict:
        return {"T": int(self.T), "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end), "kind": self.kind}

    @classmethod
    def from_params(cls, params: dict) -> "NoiseSchedule":
        return cls(int(params["T"]), float(params["beta_start"]), float(params["beta_end"]),
                   params.get("kind", "linear"))

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside [1, {self.T}]")

    def a(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha[t - 1])

    def abar(self, t: int) -> float:
        """Cumulative product up to ``t``; ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bar[t - 1])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   kind: str = "linear") -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end, kind)


def c1(s: NoiseSchedule, t: int) -> float:
    """Noise-prediction gain ``(1 - a_t) / (sqrt(a_t) * sqrt(1 - abar_t))``."""
    a_t, ab_t = s.a(t), s.abar(t)
    if ab_t >= 1.0:
        raise ScheduleError(f"degenerate schedule at t={t}: alpha_bar == 1")
    return (1.0 - a_t) / (math.sqrt(a_t) * math.sqrt(1.0 - ab_t))


def c2(s: NoiseSchedule, t: int) -> float:
    """Posterior variance ``(1 - abar_{t-1}) / (1 - abar_t) * beta_t``; zero at ``t == 1``."""
    s._check_t(t)
    if t == 1:
        return 0.0
    ab_t = s.abar(t)
    if ab_t >= 1.0:
        raise ScheduleError(f"degenerate schedule at t={t}: alpha_bar == 1")
    return (1.0 - s.abar(t - 1)) / (1.0 - ab_t) * float(s.beta[t - 1])


def sigma(s: NoiseSchedule, t: int) -> float:
    return math.sqrt(c2(s, t))


def noise_scale(s: NoiseSchedule, t: int, mode: str) -> float:
    if mode == "c2":
        return c2(s, t)
    if mode == "sigma":
        return sigma(s, t)
    raise ValueError(f"noise_scale must be one of {NOISE_SCALES}, got {mode!r}")


def forward_noise(s: NoiseSchedule, x0, t: int, eps) -> np.ndarray:
    """Sample ``x_t`` given clean ``x0`` and a standard-normal draw ``eps`` (any matching shape)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    ab = s.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
