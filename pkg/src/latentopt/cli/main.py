"""``latentopt`` command line.

Every subcommand takes ``--config <file>``, ``--out <dir>`` and one
``--<key> <value>`` override per config key. Exit codes: 0 success,
1 failed assertion, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from latentopt.cli import experiments as ex
from latentopt.cli.checkpoint import classifier_checkpoint, denoiser_checkpoint, save_checkpoint
from latentopt.cli.config import REGISTRY, Config, ConfigError, int_list, load_config
from latentopt.cli.data import make_gmm_dataset, mode_centers
from latentopt.cli.render import render_scatter
from latentopt.doodl import doodl_optimize
from latentopt.errors import InvalidArgumentError, NumericalFailureError
from latentopt.guidance import ClassTargetLoss, classifier_guided_ddim, target_probability
from latentopt.models import one_hot, train_classifier, train_denoiser
from latentopt.numerics import Rng
from latentopt.sampling import EdictConfig, LatentPair, ddim_generate, edict_generate, edict_invert

COMMANDS = ("train-denoiser", "train-classifier", "sample", "invert", "guide", "doodl", "experiment")


def dataset(cfg: Config):
    return make_gmm_dataset(cfg.n_modes, cfg.radius, cfg.sigma, cfg.n_points, Rng(cfg.data_seed))


def nearest_mode(cfg: Config, pts):
    centers = mode_centers(cfg.n_modes, cfg.radius)
    return np.argmin(np.linalg.norm(pts[:, None, :] - centers[None], axis=-1), axis=1)


def cmd_train_denoiser(cfg: Config) -> int:
    x, labels = dataset(cfg)
    res = train_denoiser(x, cfg.sched(), cfg.denoiser_training(), Rng(cfg.seed), labels=labels, n_classes=cfg.n_modes)
    path = os.path.join(cfg.out, "denoiser.ckpt")
    save_checkpoint(path, denoiser_checkpoint(res.model, schedule=cfg.schedule, S=cfg.S, seed=cfg.seed))
    idx = list(range(0, len(res.loss_trace), 100)) + [len(res.loss_trace) - 1]
    ex.write_csv(os.path.join(cfg.out, "denoiser_loss.csv"), ["step", "loss", "smoothed"],
                 [(i, res.loss_trace[i], res.smoothed_trace[i]) for i in idx])
    print(f"saved {path}; smoothed loss {res.smoothed_trace[0]:.4f} -> {res.smoothed_trace[-1]:.4f}")
    return 0


def cmd_train_classifier(cfg: Config) -> int:
    x, labels = dataset(cfg)
    res = train_classifier(x, labels, cfg.classifier_training(), Rng(cfg.seed + 1), hidden=int_list(cfg.clf_hidden))
    path = os.path.join(cfg.out, "classifier.ckpt")
    save_checkpoint(path, classifier_checkpoint(res.model, seed=cfg.seed))
    print(f"saved {path}; held-out accuracy {res.heldout_accuracy:.4f}")
    return 0


def _latents(cfg: Config):
    return np.stack([ex.seed_latent(cfg, i) for i in range(cfg.n_samples)])


def _conditioning(cfg: Config, m):
    if cfg.class_label < 0 or m.cond_dim == 0:
        return None
    return one_hot(cfg.class_label, m.cond_dim)


def cmd_sample(cfg: Config) -> int:
    m = ex.load_denoiser(cfg)
    c = _conditioning(cfg, m)
    X = _latents(cfg)
    if cfg.sampler == "ddim":
        out = ddim_generate(m, X, cfg.sched(), c)
    elif cfg.sampler == "edict":
        out = edict_generate(m, X, EdictConfig(cfg.sched(), cfg.p, c)).x
    else:
        raise ConfigError(f"unknown sampler {cfg.sampler!r}")
    ex.write_csv(os.path.join(cfg.out, "samples.csv"), ["seed", "x", "y"], [(i, *pt) for i, pt in enumerate(out)])
    render_scatter(out, nearest_mode(cfg, out), os.path.join(cfg.out, "samples.ppm"))
    return 0


def read_points(path: str) -> np.ndarray:
    if not path or not os.path.exists(path):
        raise ConfigError(f"input file not found: {path!r}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    try:
        return np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)
    except (KeyError, ValueError) as err:
        raise ConfigError(f"{path}: expected numeric columns x,y ({err})") from None


def cmd_invert(cfg: Config) -> int:
    m = ex.load_denoiser(cfg)
    ecfg = cfg.edict()  # unconditional
    pts = read_points(cfg.input)
    pairs = edict_invert(m, LatentPair(pts, pts.copy(), 0), ecfg)
    back = edict_generate(m, pairs.x, ecfg, y_T=pairs.y)
    err = np.maximum(np.abs(back.x - pts).max(axis=1), np.abs(back.y - pts).max(axis=1))
    rows = [(i, *pairs.x[i], *pairs.y[i], err[i]) for i in range(len(pts))]
    ex.write_csv(os.path.join(cfg.out, "latents.csv"), ["index", "xT_x", "xT_y", "yT_x", "yT_y", "recon_err"], rows)
    return 0


def cmd_guide(cfg: Config) -> int:
    m = ex.load_denoiser(cfg)
    clf = ex.load_classifier(cfg)
    L = ClassTargetLoss(cfg.target_class, clf, cfg.loss_form)
    out = classifier_guided_ddim(m, L, _latents(cfg), cfg.sched(), None, cfg.guide_scale)
    prob = target_probability(clf, out, cfg.target_class)
    ex.write_csv(os.path.join(cfg.out, "guided.csv"), ["seed", "x", "y", "target_prob"],
                 [(i, *out[i], prob[i]) for i in range(len(out))])
    render_scatter(out, nearest_mode(cfg, out), os.path.join(cfg.out, "guided.ppm"))
    return 0


def cmd_doodl(cfg: Config) -> int:
    m = ex.load_denoiser(cfg)
    clf = ex.load_classifier(cfg)
    L = ClassTargetLoss(cfg.target_class, clf, cfg.loss_form)
    dcfg = cfg.doodl()
    rows, pts = [], []
    for i in range(cfg.n_samples):
        res = doodl_optimize(m, L, ex.seed_latent(cfg, i), dcfg, Rng(cfg.seed * 1_000_003 + i + 500_000))
        x0 = res.generation.x
        first = res.loss_trace[0] if res.loss_trace else res.final_loss
        rows.append((i, first, res.final_loss, float(target_probability(clf, x0, cfg.target_class)), *x0))
        pts.append(x0)
    ex.write_csv(os.path.join(cfg.out, "doodl.csv"), ["seed", "initial_loss", "final_loss", "target_prob", "x", "y"], rows)
    pts = np.array(pts)
    render_scatter(pts, nearest_mode(cfg, pts), os.path.join(cfg.out, "doodl.ppm"))
    return 0


def cmd_experiment(cfg: Config, name: str) -> int:
    outcome = ex.run_experiment(name, cfg)
    print(outcome.report())
    return 0 if outcome.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latentopt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "experiment":
            p.add_argument("name", choices=sorted(ex.EXPERIMENTS))
        p.add_argument("--config", default=None)
        for key in REGISTRY:
            p.add_argument(f"--{key}", dest=f"opt_{key}", default=None, metavar=REGISTRY[key].upper())
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        os.makedirs(cfg.out, exist_ok=True)
        if args.command == "experiment":
            return cmd_experiment(cfg, args.name)
        handler = globals()["cmd_" + args.command.replace("-", "_")]
        return handler(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (InvalidArgumentError, NumericalFailureError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
