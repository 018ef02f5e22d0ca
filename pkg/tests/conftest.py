import numpy as np
import pytest

from mnartri import kernels
from mnartri.core import RatingDataset
from mnartri.synthetic import SyntheticParams, generate


@pytest.fixture
def tiny():
    """Two observed cells on a 2x2 grid."""
    return RatingDataset(2, 2, [0, 1], [0, 1], [1, 3])


@pytest.fixture
def random_dataset():
    def make(seed, m=6, n=7, density=0.4):
        rng = np.random.default_rng(seed)
        mask = rng.random((m, n)) < density
        mask[0, 0] = True
        u, i = np.nonzero(mask)
        return RatingDataset(m, n, u, i, rng.integers(1, 6, len(u)))
    return make


@pytest.fixture(scope="session")
def skewed_instance():
    """Observation probability rises steeply with the rating."""
    return generate(SyntheticParams(m=10, n=10, rank=3, skew=0.5, corr=2.0, p_min=0.05, p_max=0.9), seed=3)


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return request.param


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line, print it, and fail the test on FAIL."""
    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        if not ok:
            pytest.fail(line, pytrace=False)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
