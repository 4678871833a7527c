import numpy as np
import pytest

from advkit.epochs import EpochSet
from advkit.harness.synth import SynthSpec, synth_dataset
from advkit.models import ArchSpec, build_model
from advkit.train import SplitPlan, TrainConfig, make_splits, train_model


def make_set(data, labels=None, fs=128.0, subjects=None, n_classes=None):
    data = np.asarray(data)
    n = data.shape[0]
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    subjects = np.zeros(n, dtype=int) if subjects is None else subjects
    names = None if n_classes is None else [f"c{k}" for k in range(n_classes)]
    return EpochSet(data, labels, subjects, fs, names or [])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def easy_data():
    """Small, clearly separable 2-class synthetic set with a fixed split."""
    ep, keys = synth_dataset(SynthSpec(n_epochs=320, n_channels=8, n_samples=64, snr_db=0, seed=3))
    sp = make_splits(ep, SplitPlan("mixed"), 0)[0]
    return ep, ep.subset(sp.train), ep.subset(sp.val), ep.subset(sp.test)


@pytest.fixture(scope="session")
def trained_eegnet(easy_data):
    _, train, val, _ = easy_data
    model = build_model(ArchSpec("eegnet", 8, 64, 2), seed=0)
    train_model(model, train, val, TrainConfig(max_epochs=15, patience=5, seed=0))
    return model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
