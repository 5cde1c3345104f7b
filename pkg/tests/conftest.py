import numpy as np
import pytest
import torch

from drvnet.synthetic import write_synthetic_dataset

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number, name, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        lines.append(f"[{number:02d}] {status}  {name}  {detail}".rstrip())
        return passed

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def drive_root(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("drive"), "drive", n_images=8, shape=(48, 56))


@pytest.fixture(scope="session")
def chasedb_root(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("chasedb"), "chasedb", shape=(40, 44))


@pytest.fixture(scope="session")
def stare_root(tmp_path_factory):
    return write_synthetic_dataset(tmp_path_factory.mktemp("stare"), "stare", n_images=8, shape=(40, 44))
