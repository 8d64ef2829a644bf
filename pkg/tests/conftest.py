import hashlib
import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest

import latentopt.models
from latentopt.cli import main as cli
from latentopt.cli.checkpoint import classifier_from_checkpoint, denoiser_from_checkpoint, load_checkpoint
from latentopt.cli.config import Config, format_config
from latentopt.models import init_denoiser
from latentopt.numerics import Rng
from latentopt.schedule import NoiseSchedule

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CACHE = Path(__file__).parent / ".cache"


def two_step_schedule(ab1=0.5, ab2=0.25):
    return NoiseSchedule(2, np.array([1.0, ab1, ab2]))


@pytest.fixture
def rand_model():
    return init_denoiser(2, Rng(3), hidden=(32, 32), time_embed_dim=8)


def _fingerprint(cfg: Config) -> str:
    h = hashlib.sha256(format_config(cfg).encode())
    h.update(Path(latentopt.models.__file__).read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def standard_config():
    """Default config pointing at trained checkpoints, trained once and cached
    on disk (keyed by config and model source)."""
    base = Config()
    out = CACHE / _fingerprint(base)
    den, clf = out / "denoiser.ckpt", out / "classifier.ckpt"
    if not (den.exists() and clf.exists()):
        out.mkdir(parents=True, exist_ok=True)
        cfg = Config(out=str(out))
        assert cli.cmd_train_denoiser(cfg) == 0
        assert cli.cmd_train_classifier(cfg) == 0
    return Config(denoiser_ckpt=str(den), classifier_ckpt=str(clf))


@pytest.fixture(scope="session")
def trained_denoiser(standard_config):
    return denoiser_from_checkpoint(load_checkpoint(standard_config.denoiser_ckpt))


@pytest.fixture(scope="session")
def trained_classifier(standard_config):
    return classifier_from_checkpoint(load_checkpoint(standard_config.classifier_ckpt))


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report(capsys):
    """Record one PASS/FAIL line per criterion; echoed live and in the summary."""

    def report(label: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} {label}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
