import numpy as np
import pytest

from avbinaural.data import write_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Ten short synthetic clips (8/1/1 split) shared by the slower tests."""
    root = tmp_path_factory.mktemp("tiny")
    return write_synthetic_dataset(root, n_clips=10, seed=3, duration_s=2.0)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> one-line PASS/FAIL verdict, echoed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 9):
        terminalreporter.write_line(lines.get(n, f"criterion {n}: NOT RUN"))
