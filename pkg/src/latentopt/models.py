"""Small MLP models with explicit forward passes and vector-Jacobian products.

Every model here is a thin role wrapper around :class:`MLP`:

* :class:`DenoiserModel` predicts the noise added to a point, given the step
  index and a conditioning vector.
* :class:`ClassifierModel` maps a point to class logits.
* :class:`EmbeddingModel` maps a point to a unit-norm embedding.
* :class:`ScoreModel` maps a point to a bounded scalar score.

Arrays are float64 with the feature axis last; a leading batch axis is
optional everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from latentopt.errors import InvalidArgumentError
from latentopt.numerics import Rng, as_tensor, check_finite, gaussian_sample, momentum_accumulate
from latentopt.schedule import NoiseSchedule, noise_sample


def _sigmoid(z):
    # tanh form: no overflow, and cheaper than a sign-split exp here
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu(z):
    return z * _sigmoid(z)


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class MLP:
    """Fully connected net, SiLU between layers, linear output."""

    weights: list
    biases: list

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def trace(self, h):
        """Forward pass that also returns the activations backprop needs."""
        inputs, pres = [], []
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ w + b
            pres.append(z)
            h = _silu(z) if i < n - 1 else z
        return h, (inputs, pres)

    def forward(self, h):
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = _silu(z) if i < n - 1 else z
        return h

    def backprop(self, h, g, need_params=True, cache=None):
        """Returns (grad wrt input, weight grads, bias grads) for cotangent g."""
        inputs, pres = cache if cache is not None else self.trace(h)[1]
        gws, gbs = [], []
        n = len(self.weights)
        for i in reversed(range(n)):
            if i < n - 1:
                g = g * _silu_grad(pres[i])
            if need_params:
                gws.append(inputs[i].T @ g if g.ndim == 2 else np.outer(inputs[i], g))
                gbs.append(g.sum(axis=0) if g.ndim == 2 else g.copy())
            g = g @ self.weights[i].T
        return g, gws[::-1], gbs[::-1]

    def vjp(self, h, g):
        return self.backprop(h, g, need_params=False)[0]

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(sizes, rng: Rng, zero_output: bool = False) -> MLP:
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        if zero_output and i == len(sizes) - 2:
            w = np.zeros((n_in, n_out))
        else:
            w = gaussian_sample(rng, (n_in, n_out)) * math.sqrt(1.0 / n_in)
        weights.append(w)
        biases.append(np.zeros(n_out))
    return MLP(weights, biases)


def zeros_mlp(sizes) -> MLP:
    return MLP(
        [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
        [np.zeros(b) for b in sizes[1:]],
    )


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal step features ``[sin(w_k t)..., cos(w_k t)...]``.

    Frequencies run geometrically from 1 down to 1/1000. ``t`` may be an
    integer array, giving one row per entry.
    """
    if dim < 2 or dim % 2:
        raise InvalidArgumentError("time embedding dim must be a positive even integer")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = 1000.0 ** (-np.arange(half) / (half - 1))
    angles = np.multiply.outer(np.asarray(t, dtype=np.float64), freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# ---------------------------------------------------------------- denoiser


@dataclass
class DenoiserModel:
    mlp: MLP
    data_dim: int
    time_embed_dim: int
    cond_dim: int

    def _input(self, x, t, c):
        x = as_tensor(x)
        if x.shape[-1] != self.data_dim:
            raise InvalidArgumentError(f"expected data dim {self.data_dim}, got {x.shape[-1]}")
        batch = x.shape[:-1]
        temb = time_embed(t, self.time_embed_dim)
        temb = np.broadcast_to(temb, batch + (self.time_embed_dim,))
        if c is None:
            c = np.zeros(self.cond_dim)
        c = as_tensor(c)
        if c.shape[-1] != self.cond_dim:
            raise InvalidArgumentError(f"expected conditioning dim {self.cond_dim}, got {c.shape[-1]}")
        c = np.broadcast_to(c, batch + (self.cond_dim,))
        return np.concatenate([x, temb, c], axis=-1)


def init_denoiser(data_dim: int, rng: Rng, hidden=(128, 128, 128), time_embed_dim: int = 16,
                  cond_dim: int = 0) -> DenoiserModel:
    sizes = [data_dim + time_embed_dim + cond_dim, *hidden, data_dim]
    return DenoiserModel(init_mlp(sizes, rng), data_dim, time_embed_dim, cond_dim)


def zero_denoiser(data_dim: int, hidden=(8,), time_embed_dim: int = 4, cond_dim: int = 0) -> DenoiserModel:
    sizes = [data_dim + time_embed_dim + cond_dim, *hidden, data_dim]
    return DenoiserModel(zeros_mlp(sizes), data_dim, time_embed_dim, cond_dim)


def denoiser_forward(m: DenoiserModel, x, t, c=None) -> np.ndarray:
    return m.mlp.forward(m._input(x, t, c))


def denoiser_vjp(m: DenoiserModel, x, t, c, cotangent) -> np.ndarray:
    """``cotangent^T d(denoiser_forward)/dx``; activations live only inside this call."""
    h = m._input(x, t, c)
    cotangent = as_tensor(cotangent)
    if cotangent.shape != h.shape[:-1] + (m.data_dim,):
        raise InvalidArgumentError(f"cotangent shape {cotangent.shape} does not match output")
    return m.mlp.vjp(h, cotangent)[..., : m.data_dim]


# -------------------------------------------------------------- classifier


@dataclass
class ClassifierModel:
    mlp: MLP
    data_dim: int
    n_classes: int


def init_classifier(data_dim: int, n_classes: int, rng: Rng, hidden=(64, 64)) -> ClassifierModel:
    return ClassifierModel(init_mlp([data_dim, *hidden, n_classes], rng), data_dim, n_classes)


def zero_classifier(data_dim: int, n_classes: int, hidden=(64, 64)) -> ClassifierModel:
    return ClassifierModel(zeros_mlp([data_dim, *hidden, n_classes]), data_dim, n_classes)


def _check_dim(x, dim):
    x = as_tensor(x)
    if x.shape[-1] != dim:
        raise InvalidArgumentError(f"expected input dim {dim}, got {x.shape[-1]}")
    return x


def classifier_forward(m: ClassifierModel, x) -> np.ndarray:
    return m.mlp.forward(_check_dim(x, m.data_dim))


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def classifier_input_grad(m: ClassifierModel, x, loss) -> np.ndarray:
    """Gradient w.r.t. x of a scalar loss on the logits.

    ``loss`` needs an ``n_classes`` attribute and a ``logit_grad(logits)``
    method returning dloss/dlogits (rows are summed for a batch).
    """
    if loss.n_classes != m.n_classes:
        raise InvalidArgumentError(f"loss expects {loss.n_classes} classes, model has {m.n_classes}")
    x = _check_dim(x, m.data_dim)
    logits = m.mlp.forward(x)
    return m.mlp.vjp(x, loss.logit_grad(logits))


# ------------------------------------------------------- embedding / score


@dataclass
class EmbeddingModel:
    mlp: MLP
    data_dim: int
    embed_dim: int


def init_embedding(data_dim: int, embed_dim: int, rng: Rng, hidden=(64,)) -> EmbeddingModel:
    return EmbeddingModel(init_mlp([data_dim, *hidden, embed_dim], rng), data_dim, embed_dim)


def embed(m: EmbeddingModel, x) -> np.ndarray:
    v = m.mlp.forward(_check_dim(x, m.data_dim))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def embed_vjp(m: EmbeddingModel, x, cotangent) -> np.ndarray:
    x = _check_dim(x, m.data_dim)
    v = m.mlp.forward(x)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    u = v / norm
    # d(v/|v|)/dv = (I - u u^T) / |v|
    gv = (cotangent - u * np.sum(u * cotangent, axis=-1, keepdims=True)) / norm
    return m.mlp.vjp(x, gv)


@dataclass
class ScoreModel:
    """Scalar score ``low + (high - low) * sigmoid(mlp(x))``, bounded in (low, high)."""

    mlp: MLP
    data_dim: int
    low: float = 1.0
    high: float = 10.0


def init_score(data_dim: int, rng: Rng, hidden=(32,), low=1.0, high=10.0) -> ScoreModel:
    return ScoreModel(init_mlp([data_dim, *hidden, 1], rng), data_dim, low, high)


def score(m: ScoreModel, x) -> np.ndarray:
    h = m.mlp.forward(_check_dim(x, m.data_dim))[..., 0]
    return m.low + (m.high - m.low) * _sigmoid(h)


def score_vjp(m: ScoreModel, x, cotangent) -> np.ndarray:
    x = _check_dim(x, m.data_dim)
    h = m.mlp.forward(x)
    s = _sigmoid(h)
    gh = np.asarray(cotangent)[..., None] * (m.high - m.low) * s * (1.0 - s)
    return m.mlp.vjp(x, gh)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    lr: float = 2e-3
    momentum: float = 0.9
    hidden: tuple = (128, 128, 128)
    time_embed_dim: int = 16
    cond_drop: float = 0.5
    heldout_fraction: float = 0.2
    smoothing: float = 0.99
    final_lr_fraction: float = 0.0  # linear decay of lr to this fraction by the last step
    optimizer: str = "adam"  # or "sgd" (heavy-ball momentum)


@dataclass
class TrainResult:
    model: object
    loss_trace: np.ndarray
    smoothed_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    heldout_accuracy: float | None = None


def _smooth(trace, beta):
    out = np.empty_like(trace)
    acc = trace[0] if len(trace) else 0.0
    for i, v in enumerate(trace):
        acc = beta * acc + (1 - beta) * v
        out[i] = acc
    return out


def _lr_at(cfg: TrainConfig, step: int) -> float:
    frac = step / max(cfg.steps - 1, 1)
    return cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac)


class _Optimizer:
    """In-place parameter updates: heavy-ball SGD or Adam (beta1 = momentum)."""

    def __init__(self, mlp: MLP, cfg: TrainConfig):
        if cfg.optimizer not in ("sgd", "adam"):
            raise InvalidArgumentError(f"unknown optimizer {cfg.optimizer!r}")
        self.cfg = cfg
        self.mlp = mlp
        self.first = [np.zeros_like(p) for p in mlp.params()]
        self.second = [np.zeros_like(p) for p in mlp.params()]
        self.count = 0

    def step(self, gws, gbs, step):
        cfg = self.cfg
        lr = _lr_at(cfg, step)
        self.count += 1
        for i, (p, g) in enumerate(zip(self.mlp.params(), [*gws, *gbs])):
            if cfg.optimizer == "sgd":
                self.first[i] = momentum_accumulate(self.first[i], g, cfg.momentum)
                p -= lr * self.first[i]
                continue
            self.first[i] = cfg.momentum * self.first[i] + (1.0 - cfg.momentum) * g
            self.second[i] = 0.999 * self.second[i] + 0.001 * g * g
            m_hat = self.first[i] / (1.0 - cfg.momentum**self.count)
            v_hat = self.second[i] / (1.0 - 0.999**self.count)
            p -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)


def train_denoiser(data, sched: NoiseSchedule, cfg: TrainConfig, rng: Rng, labels=None,
                   n_classes: int = 0, model: DenoiserModel | None = None) -> TrainResult:
    """Fit the noise-prediction objective with the optimizer named in ``cfg``.

    With ``labels`` the model is conditioned on one-hot classes, and the
    conditioning is zeroed with probability ``cfg.cond_drop`` so the same model
    also serves unconditional sampling.
    """
    data = as_tensor(data)
    if data.ndim != 2 or len(data) == 0:
        raise InvalidArgumentError("dataset must be a nonempty (N, dim) array")
    n, dim = data.shape
    if labels is not None and n_classes < 1:
        n_classes = int(np.max(labels)) + 1
    cond_dim = n_classes if labels is not None else 0
    if model is None:
        model = init_denoiser(dim, rng, cfg.hidden, cfg.time_embed_dim, cond_dim)
    else:
        model = DenoiserModel(model.mlp.copy(), model.data_dim, model.time_embed_dim, model.cond_dim)
    mlp = model.mlp
    opt = _Optimizer(mlp, cfg)
    trace = np.zeros(cfg.steps)
    bsz = min(cfg.batch_size, n) if cfg.batch_size > 0 else n
    for step in range(cfg.steps):
        idx = rng.integers(n, (bsz,))
        t = 1 + rng.integers(sched.num_steps, (bsz,))
        eps = gaussian_sample(rng, (bsz, dim))
        xt = noise_sample(sched, data[idx], t, eps)
        if cond_dim:
            c = one_hot(np.asarray(labels)[idx], cond_dim)
            keep = rng.uniform((bsz,)) >= cfg.cond_drop
            c *= keep[:, None]
        else:
            c = None
        h = model._input(xt, t, c)
        pred, cache = mlp.trace(h)
        err = pred - eps
        trace[step] = np.mean(err * err)
        _, gws, gbs = mlp.backprop(h, 2.0 * err / err.size, cache=cache)
        opt.step(gws, gbs, step)
    for p in mlp.params():
        check_finite(p, "denoiser parameters")
    return TrainResult(model, trace, _smooth(trace, cfg.smoothing))


def accuracy(m: ClassifierModel, x, labels) -> float:
    pred = np.argmax(classifier_forward(m, x), axis=-1)
    return float(np.mean(pred == np.asarray(labels)))


def train_classifier(data, labels, cfg: TrainConfig, rng: Rng, hidden=(64, 64)) -> TrainResult:
    """Cross-entropy training; accuracy is reported on a held-out split."""
    data = as_tensor(data)
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InvalidArgumentError("need at least two classes")
    n_classes = int(classes.max()) + 1
    n = len(data)
    perm = np.argsort(rng.uniform((n,)), kind="stable")
    n_held = int(round(cfg.heldout_fraction * n))
    held, train = perm[:n_held], perm[n_held:]
    model = init_classifier(data.shape[1], n_classes, rng, hidden)
    mlp = model.mlp
    opt = _Optimizer(mlp, cfg)
    trace = np.zeros(cfg.steps)
    bsz = min(cfg.batch_size, len(train))
    for step in range(cfg.steps):
        idx = train[rng.integers(len(train), (bsz,))]
        x = data[idx]
        logits, cache = mlp.trace(x)
        y = one_hot(labels[idx], n_classes)
        trace[step] = -np.mean(np.sum(y * log_softmax(logits), axis=-1))
        _, gws, gbs = mlp.backprop(x, (softmax(logits) - y) / bsz, cache=cache)
        opt.step(gws, gbs, step)
    eval_idx = held if len(held) else train
    acc = accuracy(model, data[eval_idx], labels[eval_idx])
    return TrainResult(model, trace, _smooth(trace, cfg.smoothing), acc)
