import numpy as np
import pytest

from romflux.mesh import build_structured_mesh, classify_boundary
from romflux.operators import build_operators


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small():
    """3x2x2 box with unequal spacing, its patches and operators."""
    mesh = build_structured_mesh(3, 2, 2, 1.5, 1.0, 0.8)
    patches = classify_boundary(mesh, (1.0, 0.3, 0.0))
    return mesh, patches, build_operators(mesh, patches)


@pytest.fixture(scope="session")
def cube4():
    mesh = build_structured_mesh(4, 4, 4)
    patches = classify_boundary(mesh)
    return mesh, patches, build_operators(mesh, patches)


def pytest_terminal_summary(terminalreporter):
    import sys
    report = sys.modules.get("acceptance_report")
    if report is None or not report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report.LINES):
        terminalreporter.write_line(report.LINES[number])
