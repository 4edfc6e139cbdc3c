"""Shared fixtures: small grids, equilibria and trajectory backends.

Backends are expensive to build, so they are created once per session.
"""

from __future__ import annotations

import pytest

from torstab.equilibrium import solve_picard, vacuum_equilibrium
from torstab.geometry import CrossSectionGrid, ToroidalFrame
from torstab.operators import TrajectoryBackend
from torstab.profiles import make_profile

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def grid12():
    return CrossSectionGrid(ToroidalFrame(3.0), 12, 12)


@pytest.fixture(scope="session")
def grid16():
    return CrossSectionGrid(ToroidalFrame(3.0), 16, 16)


@pytest.fixture(scope="session")
def vacuum12(grid12):
    return vacuum_equilibrium(grid12)


@pytest.fixture(scope="session")
def tilted_profile():
    """Reflection-symmetric profile whose equilibrium carries a toroidal current."""
    return make_profile("stable_even", c=0.2, tilt=0.3)


@pytest.fixture(scope="session")
def tilted_eq(tilted_profile, grid12):
    return solve_picard(tilted_profile, grid12)


@pytest.fixture(scope="session")
def tilted_backend(tilted_eq, tilted_profile):
    return TrajectoryBackend(tilted_eq, tilted_profile, seeds_log2=10, ergodic_horizon=200.0, cache_horizon=20.0)


@pytest.fixture(scope="session")
def charged_eq(grid12):
    """Unequal species densities give a nonzero electric potential as well."""
    prof = make_profile("stable_even", c=0.2, tilt=0.3, ratio=1.02)
    return solve_picard(prof, grid12)


@pytest.fixture(scope="session")
def unstable_profile():
    return make_profile("instability", k=0.5)


@pytest.fixture(scope="session")
def unstable_eq(unstable_profile, grid16):
    return solve_picard(unstable_profile, grid16, purely_magnetic=True)


@pytest.fixture(scope="session")
def unstable_backend(unstable_eq, unstable_profile):
    return TrajectoryBackend(unstable_eq, unstable_profile, seeds_log2=12, ergodic_horizon=200.0,
                             cache_horizon=20.0)


@pytest.fixture
def report(capsys):
    """Record and print one acceptance line, then assert the outcome."""

    def _report(number: int, name: str, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report
