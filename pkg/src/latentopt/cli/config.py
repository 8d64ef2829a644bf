"""Flat, typed run configuration.

Precedence is defaults < config file < command-line overrides. Files hold
one ``key = value`` per line; ``#`` starts a comment.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from latentopt.doodl import DoodlConfig, MulticropConfig
from latentopt.models import TrainConfig
from latentopt.sampling import EdictConfig
from latentopt.schedule import NoiseSchedule, make_schedule


class ConfigError(Exception):
    pass


@dataclass
class Config:
    seed: int = 0
    out: str = "out"
    timing: bool = True

    # schedule / sampler
    S: int = 50
    schedule: str = "cosine"
    p: float = 0.93

    # DOODL
    lr: float = 0.05
    m: int = 20
    eta: float = 0.9
    clip_bound: float = 1e-3
    perturb_var: float = 1e-4
    renorm_after_perturb: bool = True
    multicrop: bool = False
    num_cutouts: int = 16
    cut_power: float = 0.3
    model_input_size: int = 0

    # dataset
    n_modes: int = 8
    radius: float = 1.0
    sigma: float = 0.05
    n_points: int = 4096
    data_seed: int = 0

    # denoiser training
    train_steps: int = 20000
    train_lr: float = 2e-3
    train_batch: int = 256
    train_optimizer: str = "adam"
    final_lr_fraction: float = 0.0
    cond_drop: float = 0.5
    hidden: str = "128,128,128"
    time_embed_dim: int = 16

    # classifier training
    clf_steps: int = 5000
    clf_lr: float = 2e-3
    clf_batch: int = 128
    clf_hidden: str = "64,64"

    # checkpoints and inputs
    denoiser_ckpt: str = ""
    classifier_ckpt: str = ""
    input: str = ""

    # sampling / guidance commands
    n_samples: int = 256
    sampler: str = "ddim"
    class_label: int = -1
    target_class: int = 0
    loss_form: str = "bce"
    guide_scale: float = 5.0

    # experiments
    n_seeds: int = 64
    compare_seeds: int = 32
    baseline_scale: float = 5.0
    roundtrip_cases: int = 1000
    gradcheck_configs: int = 21
    membench_steps: str = "10,50,200"
    aes_points: int = 16
    aes_target: float = 10.0
    aes_lr: float = 1.0
    aes_steps: int = 20
    aes_retention: float = 0.5
    aes_score_seed: int = 7

    def edict(self) -> EdictConfig:
        return EdictConfig(self.sched(), self.p)

    def sched(self) -> NoiseSchedule:
        return make_schedule(self.S, self.schedule)

    def doodl(self, lr: float | None = None, steps: int | None = None) -> DoodlConfig:
        mc = MulticropConfig(self.num_cutouts, self.cut_power, self.model_input_size, self.multicrop)
        return DoodlConfig(
            edict=self.edict(),
            lr=self.lr if lr is None else lr,
            steps=self.m if steps is None else steps,
            momentum=self.eta,
            clip_bound=self.clip_bound,
            perturb_var=self.perturb_var,
            multicrop=mc,
            renorm_after_perturb=self.renorm_after_perturb,
        )

    def denoiser_training(self) -> TrainConfig:
        return TrainConfig(
            steps=self.train_steps,
            batch_size=self.train_batch,
            lr=self.train_lr,
            hidden=int_list(self.hidden),
            time_embed_dim=self.time_embed_dim,
            cond_drop=self.cond_drop,
            final_lr_fraction=self.final_lr_fraction,
            optimizer=self.train_optimizer,
        )

    def classifier_training(self) -> TrainConfig:
        return TrainConfig(steps=self.clf_steps, batch_size=self.clf_batch, lr=self.clf_lr,
                           final_lr_fraction=self.final_lr_fraction, optimizer=self.train_optimizer)


def int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


REGISTRY = {f.name: f.type for f in fields(Config)}
_TYPES = {"int": int, "float": float, "str": str, "bool": bool}


def coerce(key: str, raw: str):
    if key not in REGISTRY:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[REGISTRY[key]]
    raw = raw.strip()
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        values[key.strip()] = coerce(key.strip(), raw)
    return values


def load_config(path: str | None = None, overrides: dict | None = None) -> Config:
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as f:
                values.update(parse_config_text(f.read()))
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw) if isinstance(raw, str) else raw
    for key in values:
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key {key!r}")
    return Config(**values)


def format_config(cfg: Config) -> str:
    """Manifest text; parses back to an identical Config."""
    lines = []
    for key, value in asdict(cfg).items():
        if isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
