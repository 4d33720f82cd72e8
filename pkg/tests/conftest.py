import numpy as np
import pytest

from autolstm.data import DpcDataset, Dpc, Period
from autolstm.lstm import TrainingOutcome

ACCEPTANCE_LINES = []


class ScriptedTrainer:
    """Returns pre-scripted AAREs per (hidden_layers, epochs) and records calls."""

    def __init__(self, script, default=None, seconds_per_epoch=0.01):
        self.script = dict(script)
        self.default = default
        self.seconds_per_epoch = seconds_per_epoch
        self.calls = []

    def __call__(self, config, dataset):
        key = (config.hidden_layers, config.epochs)
        self.calls.append(key)
        if key not in self.script and self.default is None:
            raise AssertionError(f"unscripted configuration {key}")
        aare = self.script.get(key, self.default)
        t = config.epochs * self.seconds_per_epoch
        return TrainingOutcome(None, aare, t, self.seconds_per_epoch)


class SeededTrainer:
    """Deterministic fake whose AARE depends on configuration and seed only."""

    def __call__(self, config, dataset):
        r = (config.seed % 997) / 997.0
        aare = 0.02 + 0.2 * r / (config.hidden_layers + config.epochs / 100.0)
        return TrainingOutcome(None, aare, 0.001, 0.001 / config.epochs)


def small_dataset(seed=0, detector="d1", period="AM", L=4, n_days=(3, 2), length=20):
    rng = np.random.default_rng(seed)
    segs = [list(60 + 5 * np.sin(np.arange(length) / 3 + rng.uniform(0, 3))
                 + rng.normal(0, 1, length)) for _ in range(sum(n_days))]
    return DpcDataset.from_series(segs[:n_days[0]], segs[n_days[0]:], L, Dpc(detector, Period(period)))


@pytest.fixture
def tiny_dataset():
    return small_dataset()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
