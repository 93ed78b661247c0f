import numpy as np
import pytest

from neartofar.geometry import CameraIntrinsics
from neartofar.synth import default_intrinsics


@pytest.fixture
def K():
    # wide enough that the (80, 160) example pixel is inside the image
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0, width=320, height=240)


@pytest.fixture
def K160():
    return default_intrinsics()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE_RESULTS = []


@pytest.fixture
def acceptance():
    def record(number, name, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}"
        ACCEPTANCE_RESULTS.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(line)
