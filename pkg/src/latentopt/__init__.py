"""Direct optimization of diffusion latents on a toy diffusion model.

Trains a small denoiser on 2-D data, samples with DDIM and with the exactly
invertible coupled (EDICT) process, backpropagates losses on the final
generation to the initial noise in constant memory, and optimizes that noise
directly against pluggable guidance losses.
"""

from latentopt.errors import (
    DegenerateInputError,
    InvalidArgumentError,
    NumericalFailureError,
    ResourceLimitError,
)
from latentopt.numerics import Rng, gaussian_sample

__version__ = "0.1.0"

__all__ = [
    "DegenerateInputError",
    "InvalidArgumentError",
    "NumericalFailureError",
    "ResourceLimitError",
    "Rng",
    "gaussian_sample",
]
