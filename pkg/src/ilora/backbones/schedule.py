"""Diffusion noise schedules."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] = 1, strictly decreasing
    parameterization: str  # "epsilon" | "v"

    def __post_init__(self):
        if self.parameterization not in ("epsilon", "v"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        ab = self.alpha_bar
        if ab.shape != (self.T + 1,):
            raise ValueError(f"alpha_bar must have length T+1, got {ab.shape}")
        if abs(ab[0] - 1.0) > 1e-12:
            raise ValueError("alpha_bar[0] must be 1")
        if not (np.diff(ab) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if (ab < 0).any() or (ab > 1).any():
            raise ValueError("alpha_bar must stay in [0, 1]")

    def with_alpha_bar(self, alpha_bar: np.ndarray) -> "NoiseSchedule":
        return replace(self, alpha_bar=alpha_bar)


def zero_snr_rescale(schedule: NoiseSchedule) -> NoiseSchedule:
    """Rescale sqrt(alpha_bar) linearly so the terminal step carries no signal
    (alpha_bar[T] exactly 0) while alpha_bar[1] is preserved."""
    if schedule.parameterization != "v":
        raise ValueError("zero-SNR rescaling requires the v parameterization")
    s = np.sqrt(schedule.alpha_bar)
    s1, sT = s[1], s[-1]
    s = (s - sT) * s1 / (s1 - sT)
    ab = s**2
    ab[0] = 1.0
    ab[-1] = 0.0
    return schedule.with_alpha_bar(ab)


def v_target(x0, eps, t: int, schedule: NoiseSchedule):
    """v = sqrt(ab_t) * eps - sqrt(1 - ab_t) * x0."""
    ab = float(schedule.alpha_bar[t])
    return (ab**0.5) * eps - ((1.0 - ab) ** 0.5) * x0


def noise_to(x0, eps, t: int, schedule: NoiseSchedule):
    """x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    ab = float(schedule.alpha_bar[t])
    return (ab**0.5) * x0 + ((1.0 - ab) ** 0.5) * eps


def make_schedule(T: int = 100, parameterization: str = "epsilon") -> NoiseSchedule:
    """Squared-cosine alpha_bar, nudged so the endpoints are exact."""
    t = np.arange(T + 1) / T
    ab = np.cos((t + 0.008) / 1.008 * np.pi / 2) ** 2
    ab = ab / ab[0]
    ab[0] = 1.0
    return NoiseSchedule(T=T, alpha_bar=ab, parameterization=parameterization)
