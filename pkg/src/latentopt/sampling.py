"""DDIM sampling, the one-step x0 estimate, and the coupled EDICT process.

Step convention: a generation step ``t`` maps state at t to state at t-1
using ``ddim_coeffs(sched, t)`` and the denoiser evaluated at step t. The
inverse of generation step t+1 maps state at t back to t+1 with the same
table entry, so forward and inverse share one set of coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latentopt.errors import InvalidArgumentError
from latentopt.models import DenoiserModel, denoiser_forward
from latentopt.numerics import as_tensor
from latentopt.schedule import NoiseSchedule, ddim_coeffs


@dataclass(frozen=True)
class LatentPair:
    x: np.ndarray
    y: np.ndarray
    t: int

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise InvalidArgumentError(f"pair shapes differ: {self.x.shape} vs {self.y.shape}")


@dataclass(frozen=True)
class EdictConfig:
    sched: NoiseSchedule
    p: float = 0.93
    conditioning: np.ndarray | None = None

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise InvalidArgumentError(f"mixing p must lie in (0, 1], got {self.p}")


def ddim_step(m: DenoiserModel, x_t, t: int, sched: NoiseSchedule, c=None) -> np.ndarray:
    a, b = ddim_coeffs(sched, t)
    return a * x_t + b * denoiser_forward(m, x_t, t, c)


def ddim_generate(m: DenoiserModel, x_T, sched: NoiseSchedule, c=None, t_start: int | None = None) -> np.ndarray:
    """Run DDIM from ``t_start`` (default S) down to 0."""
    x = as_tensor(x_T)
    start = sched.num_steps if t_start is None else t_start
    if not 0 <= start <= sched.num_steps:
        raise InvalidArgumentError(f"t_start {start} outside 0..{sched.num_steps}")
    for t in range(start, 0, -1):
        x = ddim_step(m, x, t, sched, c)
    return x


def ddim_trajectory(m: DenoiserModel, x_T, sched: NoiseSchedule, c=None) -> list[np.ndarray]:
    """All DDIM states; entry t holds x_t."""
    states = [None] * (sched.num_steps + 1)
    x = as_tensor(x_T)
    states[sched.num_steps] = x
    for t in range(sched.num_steps, 0, -1):
        x = ddim_step(m, x, t, sched, c)
        states[t - 1] = x
    return states


def one_step_x0(m: DenoiserModel, x_t, t: int, sched: NoiseSchedule, c=None, eps_hat=None) -> np.ndarray:
    """Solve the noising equation for x0 using a single noise prediction."""
    if not 1 <= t <= sched.num_steps:
        raise InvalidArgumentError(f"step {t} outside 1..{sched.num_steps}")
    ab = float(sched.alpha_bar[t])
    if eps_hat is None:
        eps_hat = denoiser_forward(m, x_t, t, c)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


# ------------------------------------------------------------------ EDICT


def edict_forward_core(theta, a: float, b: float, p: float, x, y):
    """The four coupled lines of one generation step; ``theta`` is the
    denoiser at this step. Returns (x', y', x_inter)."""
    x_inter = a * x + b * theta(y)
    y_inter = a * y + b * theta(x_inter)
    x_new = p * x_inter + (1.0 - p) * y_inter
    y_new = p * y_inter + (1.0 - p) * x_new
    return x_new, y_new, x_inter


def edict_inverse_core(theta, a: float, b: float, p: float, x, y):
    """Closed-form inverse of :func:`edict_forward_core`: undo the mixing, then
    the two affine updates in reverse order. Returns (x, y, x_inter)."""
    y_inter = (y - (1.0 - p) * x) / p
    x_inter = (x - (1.0 - p) * y_inter) / p
    y_prev = (y_inter - b * theta(x_inter)) / a
    x_prev = (x_inter - b * theta(y_prev)) / a
    return x_prev, y_prev, x_inter


def _theta(m, t, cfg: EdictConfig):
    return lambda z: denoiser_forward(m, z, t, cfg.conditioning)


def edict_step_forward(m: DenoiserModel, pair: LatentPair, cfg: EdictConfig) -> LatentPair:
    t = pair.t
    if not 1 <= t <= cfg.sched.num_steps:
        raise InvalidArgumentError(f"step {t} outside 1..{cfg.sched.num_steps}")
    a, b = ddim_coeffs(cfg.sched, t)
    x, y, _ = edict_forward_core(_theta(m, t, cfg), a, b, cfg.p, pair.x, pair.y)
    return LatentPair(x, y, t - 1)


def edict_step_inverse(m: DenoiserModel, pair: LatentPair, cfg: EdictConfig) -> LatentPair:
    t = pair.t
    if not 0 <= t <= cfg.sched.num_steps - 1:
        raise InvalidArgumentError(f"step {t} outside 0..{cfg.sched.num_steps - 1}")
    a, b = ddim_coeffs(cfg.sched, t + 1)
    x, y, _ = edict_inverse_core(_theta(m, t + 1, cfg), a, b, cfg.p, pair.x, pair.y)
    return LatentPair(x, y, t + 1)


def edict_generate(m: DenoiserModel, x_T, cfg: EdictConfig, y_T=None) -> LatentPair:
    """Denoise from x_T = y_T (unless ``y_T`` is given) down to step 0."""
    x = as_tensor(x_T)
    pair = LatentPair(x, x.copy() if y_T is None else as_tensor(y_T), cfg.sched.num_steps)
    while pair.t > 0:
        pair = edict_step_forward(m, pair, cfg)
    return pair


def edict_invert(m: DenoiserModel, pair: LatentPair, cfg: EdictConfig) -> LatentPair:
    """Noise a step-0 pair back up to step S."""
    if pair.t != 0:
        raise InvalidArgumentError("inversion starts from a step-0 pair")
    while pair.t < cfg.sched.num_steps:
        pair = edict_step_inverse(m, pair, cfg)
    return pair
