"""Synthetic labeled point clouds."""

from __future__ import annotations

import math

import numpy as np

from latentopt.errors import InvalidArgumentError
from latentopt.numerics import Rng, gaussian_sample


def mode_centers(n_modes: int, radius: float) -> np.ndarray:
    angles = 2.0 * math.pi * np.arange(n_modes) / n_modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_gmm_dataset(n_modes: int, radius: float, sigma: float, n_points: int, rng: Rng):
    """Isotropic Gaussian modes evenly spaced on a circle.

    Returns ``(points, labels)``; labels are drawn uniformly over modes.
    """
    if n_modes < 1:
        raise InvalidArgumentError("n_modes must be >= 1")
    labels = rng.integers(n_modes, (n_points,))
    noise = gaussian_sample(rng, (n_points, 2))
    return mode_centers(n_modes, radius)[labels] + sigma * noise, labels
