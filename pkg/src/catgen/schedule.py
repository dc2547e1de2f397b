"""Cosine noise schedule for multinomial diffusion, precomputed in float64 log-space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import log_1_min_a

DEFAULT_S = 0.008
ALPHA_BAR_MIN = 1e-8
ALPHA_BAR_MAX = 1.0 - 1e-8


def cosine_alpha_bar(t, T: int, s: float = DEFAULT_S):
    """Unclipped cumulative signal fraction ``f(t) / f(0)`` of the cosine schedule.

    ``f(t) = cos(((t / T + s) / (1 + s)) * pi / 2)``. The ratio is used directly
    as the categorical mixing weight (not its square root).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"t must lie in [0, {T}]")

    def f(tt):
        return np.cos(((tt / T + s) / (1.0 + s)) * (math.pi / 2.0))

    out = f(t) / f(0.0)
    # cos(pi/2) is ~6e-17 in floating point; pin the endpoint to exactly 0.
    return np.where(t == T, 0.0, out)


@dataclass(frozen=True)
class NoiseSchedule:
    """Log-space schedule arrays indexed by diffusion step.

    Arrays have length ``T + 1``. Index ``t`` in ``1..T`` is forward step ``t``;
    index 0 is the data level (alpha_bar = 1) and only exists so that
    ``log_cumprod_alpha[t - 1]`` is valid at ``t = 1``.
    """

    T: int
    s: float
    log_alpha: np.ndarray
    log_cumprod_alpha: np.ndarray
    log_1_min_alpha: np.ndarray
    log_1_min_cumprod_alpha: np.ndarray

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.exp(self.log_cumprod_alpha)

    def check_step(self, t, lo: int = 1):
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"diffusion step must lie in [{lo}, {self.T}], got {t.min()}..{t.max()}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "log_alpha": self.log_alpha,
            "log_cumprod_alpha": self.log_cumprod_alpha,
            "log_1_min_alpha": self.log_1_min_alpha,
            "log_1_min_cumprod_alpha": self.log_1_min_cumprod_alpha,
        }


def build_schedule(T: int, s: float = DEFAULT_S) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    alpha_bar = np.clip(cosine_alpha_bar(np.arange(T + 1), T, s), ALPHA_BAR_MIN, ALPHA_BAR_MAX)
    alpha_bar[0] = 1.0
    log_alpha = np.zeros(T + 1)
    log_alpha[1:] = np.log(alpha_bar[1:]) - np.log(alpha_bar[:-1])
    log_cumprod_alpha = np.cumsum(log_alpha)
    return NoiseSchedule(
        T=T,
        s=float(s),
        log_alpha=log_alpha,
        log_cumprod_alpha=log_cumprod_alpha,
        log_1_min_alpha=log_1_min_a(log_alpha),
        log_1_min_cumprod_alpha=log_1_min_a(log_cumprod_alpha),
    )


def schedule_from_arrays(T: int, s: float, arrays: dict[str, np.ndarray]) -> NoiseSchedule:
    return NoiseSchedule(T=int(T), s=float(s), **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
