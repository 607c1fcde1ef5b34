import numpy as np
import pytest
from skimage import data

from fcsr.imaging import luminance


def grey(name):
    img = getattr(data, name)()
    return luminance(img) if img.ndim == 3 else img.astype(np.float64)


@pytest.fixture(scope="session")
def camera():
    return grey("camera")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, title, passed, detail)``."""

    def record(number, title, passed, detail):
        ACCEPTANCE.append((number, title, passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}")
