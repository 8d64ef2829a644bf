"""Guidance losses on generated points and the one-step guided DDIM baseline.

Each loss evaluates row-wise on a batch (or on a single point) and its
``grad`` is the gradient of the summed loss, so one call serves many seeds.
The weight ``weight`` multiplies both value and gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from latentopt.errors import InvalidArgumentError, NumericalFailureError
from latentopt.models import (
    ClassifierModel,
    DenoiserModel,
    EmbeddingModel,
    ScoreModel,
    classifier_forward,
    classifier_input_grad,
    denoiser_forward,
    denoiser_vjp,
    embed,
    embed_vjp,
    log_softmax,
    score,
    score_vjp,
    softmax,
)
from latentopt.numerics import as_tensor
from latentopt.sampling import one_step_x0
from latentopt.schedule import NoiseSchedule, ddim_coeffs


def spherical_distance(x, y) -> np.ndarray:
    """``2 * sqrt(arcsin(|x - y| / 2))`` for unit vectors, row-wise."""
    r = np.linalg.norm(as_tensor(x) - as_tensor(y), axis=-1)
    return 2.0 * np.sqrt(np.arcsin(np.minimum(r / 2.0, 1.0)))


def _spherical_distance_grad(x, y):
    """d/dx of :func:`spherical_distance`; zero where x == y (the cusp)."""
    diff = x - y
    r = np.linalg.norm(diff, axis=-1, keepdims=True)
    half = np.minimum(r / 2.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        dd_dr = 1.0 / (2.0 * np.sqrt(np.arcsin(half)) * np.sqrt(1.0 - half * half))
        g = dd_dr * diff / r
    return np.where(r > 0, g, 0.0)


def _require_dim(x0, dim):
    x0 = as_tensor(x0)
    if x0.shape[-1] != dim:
        raise InvalidArgumentError(f"loss expects input dim {dim}, got {x0.shape[-1]}")
    return x0


@dataclass(frozen=True)
class SphericalDistanceLoss:
    target: np.ndarray  # unit-norm embedding
    embed_model: EmbeddingModel
    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidArgumentError("loss weight must be positive")
        if abs(np.linalg.norm(self.target) - 1.0) > 1e-9:
            raise InvalidArgumentError("target embedding must be unit norm")

    @property
    def input_dim(self):
        return self.embed_model.data_dim

    def value(self, x0):
        e = embed(self.embed_model, _require_dim(x0, self.input_dim))
        return self.weight * spherical_distance(e, self.target)

    def grad(self, x0):
        x0 = _require_dim(x0, self.input_dim)
        e = embed(self.embed_model, x0)
        return self.weight * embed_vjp(self.embed_model, x0, _spherical_distance_grad(e, self.target))


@dataclass(frozen=True)
class ClassTargetLoss:
    """Push the classifier towards ``class_index``.

    ``form="cross_entropy"`` is ``-log softmax_j``; ``form="bce"`` averages
    per-class sigmoid binary cross-entropy against the one-hot target.
    """

    class_index: int
    classifier: ClassifierModel
    form: str = "cross_entropy"
    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidArgumentError("loss weight must be positive")
        if not 0 <= self.class_index < self.classifier.n_classes:
            raise InvalidArgumentError("class_index out of range")
        if self.form not in ("cross_entropy", "bce"):
            raise InvalidArgumentError(f"unknown form {self.form!r}")

    @property
    def n_classes(self):
        return self.classifier.n_classes

    @property
    def input_dim(self):
        return self.classifier.data_dim

    def _onehot(self, shape):
        y = np.zeros(shape)
        y[..., self.class_index] = 1.0
        return y

    def logit_value(self, logits):
        if self.form == "cross_entropy":
            return -self.weight * log_softmax(logits)[..., self.class_index]
        y = self._onehot(logits.shape)
        return self.weight * np.mean(np.logaddexp(0.0, logits) - y * logits, axis=-1)

    def logit_grad(self, logits):
        y = self._onehot(logits.shape)
        if self.form == "cross_entropy":
            return self.weight * (softmax(logits) - y)
        return self.weight * (0.5 * (1.0 + np.tanh(0.5 * logits)) - y) / logits.shape[-1]

    def value(self, x0):
        return self.logit_value(classifier_forward(self.classifier, _require_dim(x0, self.input_dim)))

    def grad(self, x0):
        return classifier_input_grad(self.classifier, _require_dim(x0, self.input_dim), self)


@dataclass(frozen=True)
class ScalarTargetLoss:
    """``weight * |score(x) - target|`` with the zero subgradient at the kink."""

    score_model: ScoreModel
    target: float
    weight: float = 1.0

    def __post_init__(self):
        if self.weight <= 0:
            raise InvalidArgumentError("loss weight must be positive")

    @property
    def input_dim(self):
        return self.score_model.data_dim

    def value(self, x0):
        return self.weight * np.abs(score(self.score_model, _require_dim(x0, self.input_dim)) - self.target)

    def grad(self, x0):
        x0 = _require_dim(x0, self.input_dim)
        sign = np.sign(score(self.score_model, x0) - self.target)
        return self.weight * score_vjp(self.score_model, x0, sign)


GuidanceLoss = SphericalDistanceLoss | ClassTargetLoss | ScalarTargetLoss


def loss_eval(L, x0):
    return L.value(x0)


def loss_grad(L, x0) -> np.ndarray:
    return L.grad(x0)


def target_probability(classifier: ClassifierModel, x, class_index: int) -> np.ndarray:
    return softmax(classifier_forward(classifier, x))[..., class_index]


def classifier_guided_ddim(m: DenoiserModel, L, x_T, sched: NoiseSchedule, c=None, scale: float = 1.0) -> np.ndarray:
    """DDIM where each noise prediction is offset by the loss gradient taken
    at the one-step x0 estimate.

    The gradient is carried back to x_t through both the closed-form x0
    estimate and the denoiser call inside it; the offset is
    ``scale * sqrt(1 - alpha_bar_t) * grad``, which descends the loss since
    b_t < 0.
    """
    if scale < 0:
        raise InvalidArgumentError("guidance scale must be non-negative")
    x = as_tensor(x_T)
    for t in range(sched.num_steps, 0, -1):
        a, b = ddim_coeffs(sched, t)
        eps = denoiser_forward(m, x, t, c)
        if scale > 0:
            ab = float(sched.alpha_bar[t])
            k = math.sqrt(1.0 - ab)
            x0_est = one_step_x0(m, x, t, sched, c, eps_hat=eps)
            g0 = loss_grad(L, x0_est)
            # x0_est = (x - k*eps(x)) / sqrt(ab)
            g = (g0 - k * denoiser_vjp(m, x, t, c, g0)) / math.sqrt(ab)
            if not np.all(np.isfinite(g)):
                raise NumericalFailureError("non-finite guidance gradient", step=t)
            eps = eps + scale * k * g
        x = a * x + b * eps
    return x
