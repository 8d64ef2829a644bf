"""Discrete noise schedule and the deterministic DDIM step coefficients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latentopt.errors import InvalidArgumentError
from latentopt.numerics import as_tensor

ALPHA_BAR_FLOOR = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[t]`` for t = 0..S, with alpha_bar[0] == 1.

    Values decrease strictly until they hit the floor clamp; long cosine
    schedules may repeat the floor value, which yields identity steps.
    """

    num_steps: int
    alpha_bar: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        ab = self.alpha_bar
        if ab.shape != (self.num_steps + 1,):
            raise InvalidArgumentError("alpha_bar must have S+1 entries")
        d = np.diff(ab)
        flat = d == 0
        if ab[0] != 1.0 or np.any(d > 0) or np.any(flat & (ab[1:] > ALPHA_BAR_FLOOR)) or ab[-1] <= 0:
            raise InvalidArgumentError("alpha_bar must start at 1, decrease strictly and stay positive")
        ab.setflags(write=False)


def make_schedule(num_steps: int, kind: str = "cosine") -> NoiseSchedule:
    if num_steps < 1:
        raise InvalidArgumentError("num_steps must be >= 1")
    t = np.arange(num_steps + 1, dtype=np.float64)
    if kind == "cosine":
        ab = np.cos(0.5 * math.pi * t / num_steps) ** 2
        ab = np.maximum(ab, ALPHA_BAR_FLOOR)
    elif kind == "linear":
        ab = np.linspace(1.0, ALPHA_BAR_FLOOR, num_steps + 1)
    else:
        raise InvalidArgumentError(f"unknown schedule kind {kind!r}")
    ab[0] = 1.0
    return NoiseSchedule(num_steps, ab, kind)


def _coeffs(ab_prev: float, ab_t: float) -> tuple[float, float]:
    a = math.sqrt(ab_prev / ab_t)
    b = math.sqrt(1.0 - ab_prev) - a * math.sqrt(1.0 - ab_t)
    return a, b


def ddim_coeffs(sched: NoiseSchedule, t: int) -> tuple[float, float]:
    """(a_t, b_t) such that ``x_{t-1} = a_t * x_t + b_t * eps_hat``."""
    if not 1 <= t <= sched.num_steps:
        raise InvalidArgumentError(f"step {t} outside 1..{sched.num_steps}")
    return _coeffs(float(sched.alpha_bar[t - 1]), float(sched.alpha_bar[t]))


def noise_sample(sched: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``.

    ``t`` may be an int or an integer array matching the leading axis of x0.
    """
    x0 = as_tensor(x0)
    eps = as_tensor(eps)
    if x0.shape != eps.shape:
        raise InvalidArgumentError(f"shape mismatch {x0.shape} vs {eps.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > sched.num_steps):
        raise InvalidArgumentError("step index out of range")
    ab = sched.alpha_bar[t_arr]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
