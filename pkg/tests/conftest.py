import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ircsim.dataset import Dataset
from ircsim.fixtures import make_dataset, make_models
from ircsim.model import save_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def desk():
    """The desk-scale fixture: data splits and both model styles."""
    train, calib, test = make_dataset(0)
    proposed, baseline = make_models(train, 0)
    return {"train": train, "calib": calib, "test": test, "proposed": proposed, "baseline": baseline}


@pytest.fixture(scope="session")
def small_files(desk, tmp_path_factory):
    """Model/data files with a 12-image test subset, for fast harness and CLI tests."""
    d = tmp_path_factory.mktemp("fixture")
    test = desk["test"]
    small = Dataset(test.inputs[:12], test.labels[:12], test.n_classes)
    small.save(d / "test.ircdata")
    Dataset(desk["calib"].inputs[:8], desk["calib"].labels[:8], 10).save(d / "calib.ircdata")
    save_model(desk["proposed"], d / "proposed.ircmodel")
    save_model(desk["baseline"], d / "baseline.ircmodel")
    (d / "config.json").write_text('{"seed": 3}\n')
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
