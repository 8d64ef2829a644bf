"""Tensor helpers and the seeded random stream.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. The random stream is splitmix64, which is counter based, so a block of
``n`` draws is computed in one vectorized shot and is bit-identical to drawing
them one at a time.
"""

from __future__ import annotations

import math

import numpy as np

from latentopt.errors import DegenerateInputError, InvalidArgumentError, NumericalFailureError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def as_tensor(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


def check_finite(t: np.ndarray, what: str = "tensor", step=None) -> np.ndarray:
    if not np.all(np.isfinite(t)):
        raise NumericalFailureError(f"non-finite values in {what}", step=step)
    return t


def _splitmix64_block(state: int, n: int) -> np.ndarray:
    counters = np.arange(1, n + 1, dtype=np.uint64)
    z = np.uint64(state) + counters * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 stream. Single owner; not safe to share across threads."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self, n: int) -> np.ndarray:
        out = _splitmix64_block(self.state, n)
        self.state = (self.state + n * int(_GOLDEN)) & _MASK64
        return out

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in [0, 1) with 53 random bits each."""
        shape = _shape_tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.next_u64(n) >> np.uint64(11)
        return (bits.astype(np.float64) * 2.0**-53).reshape(shape)

    def integers(self, high: int, shape) -> np.ndarray:
        """Integers in [0, high)."""
        if high < 1:
            raise InvalidArgumentError("high must be >= 1")
        u = self.uniform(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def normal(self, shape) -> np.ndarray:
        return gaussian_sample(self, shape)

    def spawn(self) -> "Rng":
        """Child stream seeded from the next draw of this one."""
        return Rng(int(self.next_u64(1)[0]))


def _shape_tuple(shape) -> tuple:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise InvalidArgumentError(f"shape must be nonempty with all dims >= 1, got {shape}")
    return shape


def gaussian_sample(rng: Rng, shape) -> np.ndarray:
    """Standard-normal tensor via Box-Muller on consecutive uniform pairs.

    Each pair (u1, u2) yields cos and sin outputs in that order; an odd count
    discards the final sin.
    """
    shape = _shape_tuple(shape)
    n = int(np.prod(shape, dtype=np.int64))
    pairs = (n + 1) // 2
    u = rng.uniform((2 * pairs,))
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * math.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)


def l2_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def renormalize_to(t, target_norm: float) -> np.ndarray:
    t = as_tensor(t)
    if target_norm <= 0:
        raise InvalidArgumentError("target_norm must be positive")
    norm = l2_norm(t)
    if norm == 0.0:
        raise DegenerateInputError("cannot renormalize a zero-norm tensor")
    return t * (target_norm / norm)


def clip_elementwise(t, bound: float) -> np.ndarray:
    if bound <= 0:
        raise InvalidArgumentError("bound must be positive")
    return np.clip(as_tensor(t), -bound, bound)


def momentum_accumulate(prev, update, eta: float) -> np.ndarray:
    """Heavy-ball buffer update: ``eta * prev + update``."""
    return eta * prev + update
