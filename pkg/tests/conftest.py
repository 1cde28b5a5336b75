import numpy as np
import pytest

from armsight.dataset import generate_samples, save_dataset, type_recordings
from armsight.kinematics import ROBOT_TYPES


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Nine rendered samples (three per robot type) saved to disk at 64x53."""
    root = tmp_path_factory.mktemp("small_dataset")
    recs = type_recordings(ROBOT_TYPES, 3)
    samples, ids = generate_samples(recs, seed=5)
    manifest = save_dataset(samples, root, 5, ids, recs)
    return manifest, samples


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
