import numpy as np
import pytest

from slmpda.data import TaskSpec, generate_synthetic_pda
from slmpda.models import ModelConfig
from slmpda.trainer import TrainConfig

SMALL_MODEL = ModelConfig(g_hidden=(16,), feature_dim=8, d_hidden=(8,), h_hidden=(8,))


def small_config(**kw) -> TrainConfig:
    """A few-step config on tiny networks for plumbing tests."""
    base = dict(steps=12, batch_size=16, eval_every=5, model=SMALL_MODEL, self_training_start=0.25)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_task():
    return generate_synthetic_pda(TaskSpec(source_per_class=12, target_per_class=12, rotation_deg=17.5, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
