from pathlib import Path

import pytest
import torch

from hcplayer.fixtures import make_synthetic_fixture

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def fixture_manifest(tmp_path_factory):
    """The shipped synthetic fixture: 16 records, seed 0."""
    return make_synthetic_fixture(tmp_path_factory.mktemp("fixture"))


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    return make_synthetic_fixture(tmp_path_factory.mktemp("small_fixture"), n_records=6)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
