import time

import numpy as np
import pytest

from maeclip.config import load_preset
from maeclip.data import make_synthetic_pairs
from maeclip.model import MAECLIPConfig
from maeclip.nn import TransformerConfig
from maeclip.training import Trainer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(**overrides) -> MAECLIPConfig:
    """A 16-wide model that keeps per-test runtime in milliseconds."""
    base = dict(
        image_size=32, patch_size=8, channels=3,
        image_encoder=TransformerConfig(2, 16, 2),
        text_encoder=TransformerConfig(2, 16, 2, vocab_size=260, max_seq=64),
        decoder=TransformerConfig(1, 16, 2),
        embed_dim=16,
    )
    base.update(overrides)
    return MAECLIPConfig(**base)


@pytest.fixture
def tiny_config():
    return small_config()


@pytest.fixture(scope="session")
def overfit_trainer():
    """The desk-overfit run, trained once per session."""
    run = load_preset("desk-overfit")
    return timed_overfit(run)


def timed_overfit(run):
    trainer = Trainer(run, list(make_synthetic_pairs(run.seed, 8)))
    start = time.perf_counter()
    trainer.history = trainer.fit()
    trainer.seconds = time.perf_counter() - start
    return trainer


# criterion number -> one-line verdict, filled in by test_acceptance
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
