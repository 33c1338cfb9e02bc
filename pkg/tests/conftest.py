import numpy as np
import pytest
from hypothesis import settings

from fedcrfd.data import MaskSpec, partition

settings.register_profile("repo", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def tiny_fed():
    """Two clients, 32x32 phantoms, a few patients: fast enough for engine tests."""
    return partition(
        range(12), 2, 0.25, [0, 1], [MaskSpec("uniform_1d", 5), MaskSpec("random_2d", 3)], 0,
        size=32, num_slices=2, test_patients=range(12, 14),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    def report(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
