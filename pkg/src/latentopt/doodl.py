"""Direct optimization of the initial diffusion latent.

Each iteration generates (x0, y0) from x_T = y_T with the coupled sampler,
scores both through multicrop augmentation, backpropagates to x_T in
constant memory, and takes a clipped heavy-ball step. The perturbed latent
is then put back on the sphere of its original norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from latentopt.adjoint import edict_chain_vjp
from latentopt.errors import InvalidArgumentError, NumericalFailureError
from latentopt.models import DenoiserModel
from latentopt.numerics import (
    Rng,
    as_tensor,
    clip_elementwise,
    gaussian_sample,
    l2_norm,
    momentum_accumulate,
    renormalize_to,
)
from latentopt.sampling import EdictConfig, LatentPair, edict_generate


@dataclass(frozen=True)
class MulticropConfig:
    num_cutouts: int = 16
    cut_power: float = 0.3
    model_input_size: int = 0
    enabled: bool = False

    def __post_init__(self):
        if self.num_cutouts < 1:
            raise InvalidArgumentError("num_cutouts must be >= 1")
        if self.cut_power <= 0:
            raise InvalidArgumentError("cut_power must be positive")


@dataclass(frozen=True)
class CropBox:
    top: int
    left: int
    size: int


def sample_crops(height: int, width: int, cfg: MulticropConfig, rng: Rng) -> list[CropBox]:
    """Square crops whose side is ``min + (max - min) * r**cut_power``, r ~ U(0, 1),
    truncated to an integer, at uniform offsets."""
    max_size = min(height, width)
    min_size = min(height, width, cfg.model_input_size)
    boxes = []
    for _ in range(cfg.num_cutouts):
        r = float(rng.uniform((1,))[0])
        size = int(r**cfg.cut_power * (max_size - min_size) + min_size)
        left = int(rng.integers(width - size + 1, (1,))[0])
        top = int(rng.integers(height - size + 1, (1,))[0])
        boxes.append(CropBox(top, left, size))
    return boxes


def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Adaptive average pooling along one axis: bin i spans
    [floor(i*n_in/n_out), ceil((i+1)*n_in/n_out))."""
    P = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        P[i, lo:hi] = 1.0 / (hi - lo)
    return P


def crop_and_pool(img, box: CropBox, out_size: int) -> np.ndarray:
    patch = img[..., box.top : box.top + box.size, box.left : box.left + box.size]
    P = _pool_matrix(box.size, out_size)
    return P @ patch @ P.T


def crop_and_pool_vjp(shape, box: CropBox, out_size: int, g) -> np.ndarray:
    P = _pool_matrix(box.size, out_size)
    full = np.zeros(shape)
    full[..., box.top : box.top + box.size, box.left : box.left + box.size] = P.T @ g @ P
    return full


def _is_image(x) -> bool:
    return x.ndim >= 2


def multicrop(x, cfg: MulticropConfig, rng: Rng) -> list[np.ndarray]:
    """Augmented views of x. Vectors pass through as ``[x]`` when disabled."""
    x = as_tensor(x)
    if not _is_image(x):
        if cfg.enabled:
            raise InvalidArgumentError("multicrop cannot be enabled for vector data")
        return [x]
    if not cfg.enabled:
        return [x]
    if min(x.shape[-2:]) < cfg.model_input_size:
        raise InvalidArgumentError("image is smaller than the model input size")
    boxes = sample_crops(x.shape[-2], x.shape[-1], cfg, rng)
    return [crop_and_pool(x, b, cfg.model_input_size) for b in boxes]


def _crop_loss(L, img, boxes, out_size):
    """Mean loss over crops (or over the identity view when boxes is None),
    with its gradient w.r.t. img."""
    if boxes is None:
        flat = img.reshape(-1)
        return float(L.value(flat)), L.grad(flat).reshape(img.shape)
    total, grad = 0.0, np.zeros_like(img)
    for box in boxes:
        crop = crop_and_pool(img, box, out_size)
        flat = crop.reshape(-1)
        total += float(L.value(flat))
        grad += crop_and_pool_vjp(img.shape, box, out_size, L.grad(flat).reshape(crop.shape))
    n = len(boxes)
    return total / n, grad / n


def _draw_boxes(shape, cfg: MulticropConfig, rng: Rng):
    if len(shape) < 2 or not cfg.enabled:
        if len(shape) < 2 and cfg.enabled:
            raise InvalidArgumentError("multicrop cannot be enabled for vector data")
        return None
    return sample_crops(shape[-2], shape[-1], cfg, rng)


@dataclass(frozen=True)
class DoodlConfig:
    edict: EdictConfig
    lr: float = 0.05
    steps: int = 20
    momentum: float = 0.9
    clip_bound: float = 1e-3
    perturb_var: float = 1e-4
    multicrop: MulticropConfig = field(default_factory=MulticropConfig)
    renorm_after_perturb: bool = True

    def __post_init__(self):
        if self.lr < 0 or self.steps < 0 or not 0 <= self.momentum < 1:
            raise InvalidArgumentError("need lr >= 0, steps >= 0 and 0 <= momentum < 1")
        if self.clip_bound <= 0 or self.perturb_var < 0:
            raise InvalidArgumentError("need clip_bound > 0 and perturb_var >= 0")


@dataclass(frozen=True)
class OptState:
    x_T: np.ndarray
    momentum_buffer: np.ndarray
    original_norm: float
    iteration: int = 0
    loss_trace: tuple = ()
    last_update: np.ndarray | None = None  # clipped gradient before momentum


def init_state(x_T) -> OptState:
    x_T = as_tensor(x_T)
    return OptState(x_T, np.zeros_like(x_T), l2_norm(x_T))


def pair_loss(L, pair: LatentPair, cfg: DoodlConfig, rng: Rng):
    """``0.5 * (crop-mean loss on x0 + crop-mean loss on y0)`` and its gradients."""
    out = cfg.multicrop.model_input_size
    boxes_x = _draw_boxes(pair.x.shape, cfg.multicrop, rng)
    boxes_y = _draw_boxes(pair.y.shape, cfg.multicrop, rng)
    vx, gx = _crop_loss(L, pair.x, boxes_x, out)
    vy, gy = _crop_loss(L, pair.y, boxes_y, out)
    return 0.5 * (vx + vy), 0.5 * gx, 0.5 * gy


def doodl_step(m: DenoiserModel, L, state: OptState, cfg: DoodlConfig, rng: Rng) -> OptState:
    it = state.iteration
    x_T = state.x_T
    out = cfg.multicrop.model_input_size
    boxes_x = _draw_boxes(x_T.shape, cfg.multicrop, rng)
    boxes_y = _draw_boxes(x_T.shape, cfg.multicrop, rng)
    values = {}

    def loss_grad_at_output(x0, y0):
        vx, gx = _crop_loss(L, x0, boxes_x, out)
        vy, gy = _crop_loss(L, y0, boxes_y, out)
        values["loss"] = 0.5 * (vx + vy)
        return 0.5 * gx, 0.5 * gy

    try:
        report = edict_chain_vjp(m, x_T, cfg.edict, loss_grad_at_output)
    except NumericalFailureError as err:
        raise NumericalFailureError(f"gradient failed at chain step {err.step}", step=it) from err
    loss = values["loss"]
    if not math.isfinite(loss):
        raise NumericalFailureError("non-finite loss", step=it)

    raw = clip_elementwise(-cfg.lr * report.grad, cfg.clip_bound)
    g = momentum_accumulate(state.momentum_buffer, raw, cfg.momentum)
    x_new = x_T + g
    if not cfg.renorm_after_perturb:
        x_new = renormalize_to(x_new, state.original_norm)
    if cfg.perturb_var > 0:
        x_new = x_new + math.sqrt(cfg.perturb_var) * gaussian_sample(rng, x_T.shape)
    # x_T and y_T coincide here, so averaging the pair is the identity
    if cfg.renorm_after_perturb:
        x_new = renormalize_to(x_new, state.original_norm)
    if not np.all(np.isfinite(x_new)):
        raise NumericalFailureError("non-finite latent update", step=it)
    return replace(
        state,
        x_T=x_new,
        momentum_buffer=g,
        iteration=it + 1,
        loss_trace=state.loss_trace + (loss,),
        last_update=raw,
    )


@dataclass
class DoodlResult:
    x_T: np.ndarray
    generation: LatentPair
    loss_trace: list
    final_loss: float
    state: OptState


def doodl_optimize(m: DenoiserModel, L, x_T_init, cfg: DoodlConfig, rng: Rng) -> DoodlResult:
    """``cfg.steps`` optimizer iterations from ``x_T_init``.

    ``final_loss`` scores the returned generation the same way the trace
    entries are scored.
    """
    state = init_state(x_T_init)
    for _ in range(cfg.steps):
        state = doodl_step(m, L, state, cfg, rng)
    generation = edict_generate(m, state.x_T, cfg.edict)
    final_loss, _, _ = pair_loss(L, generation, cfg, rng)
    return DoodlResult(state.x_T, generation, list(state.loss_trace), final_loss, state)
