import numpy as np
import pytest

from nf3d.geometry_io import TriMesh
from nf3d.shapes import box, icosphere


@pytest.fixture(scope="session")
def unit_cube() -> TriMesh:
    """Closed cube [-0.5, 0.5]^3."""
    return box(0.5)


@pytest.fixture(scope="session")
def small_sphere() -> TriMesh:
    return icosphere(2, 0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, details); filled by tests/test_acceptance.py
_CRITERIA = {}


@pytest.fixture(scope="session")
def record():
    """Record the outcome of (part of) an acceptance criterion."""
    def rec(n: int, ok: bool, detail: str) -> None:
        prev_ok, prev = _CRITERIA.get(n, (True, ""))
        _CRITERIA[n] = (prev_ok and bool(ok), f"{prev}; {detail}" if prev else detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    return rec


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
