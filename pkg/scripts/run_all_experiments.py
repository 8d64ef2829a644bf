"""Train (if needed) and run every experiment, one output directory each.

    python3 scripts/run_all_experiments.py [--out out] [--config extra.cfg]

Prints each experiment's PASS/FAIL lines and exits 1 if any check failed.
"""

import argparse
import os
import sys

from latentopt.cli import main as cli


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="out")
    parser.add_argument("--config", default=None)
    args = parser.parse_args()
    base = ["--config", args.config] if args.config else []

    models = os.path.join(args.out, "models")
    den, clf = os.path.join(models, "denoiser.ckpt"), os.path.join(models, "classifier.ckpt")
    if not os.path.exists(den):
        cli.main(["train-denoiser", "--out", models, *base])
    if not os.path.exists(clf):
        cli.main(["train-classifier", "--out", models, *base])

    status = 0
    for name in sorted(cli.ex.EXPERIMENTS):
        out = os.path.join(args.out, name)
        code = cli.main(["experiment", name, "--out", out, "--denoiser_ckpt", den, "--classifier_ckpt", clf, *base])
        status = max(status, code)
    return status


if __name__ == "__main__":
    sys.exit(main())
