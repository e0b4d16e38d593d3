import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geoadv.config import ExperimentConfig
from geoadv.models import AEModel
from geoadv.pipeline import Run, run_all
from geoadv.training import DatasetSpec, TrainConfig, build_dataset, train_ae

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REPO = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("GEOADV_CACHE", REPO / ".cache" / "acceptance"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_ae():
    """Untrained narrow autoencoder for fast unit tests."""
    model = AEModel.create(n=32, m=8, width_factor=0.125, seed=3)
    model.frozen = True
    return model


@pytest.fixture(scope="session")
def small_trained():
    """(dataset, autoencoder) for a three-class set of 64-point clouds, trained for a few seconds."""
    data = build_dataset(DatasetSpec(("sphere", "box", "torus"), 12, 64, 0, (0.7, 0.1, 0.2)))
    model = train_ae(AEModel.create(64, 16, 0.125, seed=0), data, TrainConfig(120, 6, 2e-3)).model
    return data, model


@pytest.fixture(scope="session")
def desk_run() -> Run:
    """The desk experiment of configs/desk.toml, computed once and cached on disk by config hash."""
    run = Run.open(ExperimentConfig.load(REPO / "configs" / "desk.toml"), CACHE)
    run_all(run)
    return run


ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict and print it immediately."""
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
