import numpy as np
import pytest

from msm.topology import PhysicalParams, make_topology

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""

    def _report(criterion: int, ok: bool, detail: str):
        line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params():
    return PhysicalParams(D=50.0, dt=1e-4, Ts=0.1, seed=7)


@pytest.fixture
def siso():
    return make_topology("siso", d1=4.0, Rr=2.0)


@pytest.fixture
def topo_2x1():
    return make_topology("2x1", d1=4.0, h=4.0, Rr=2.0)


@pytest.fixture
def topo_2x2():
    return make_topology("2x2", d1=6.0, h=5.0, Rr=2.0)


@pytest.fixture
def topo_4x4():
    return make_topology("4x4", d1=6.0, h=10.0, w=4.0, Rr=3.0)
