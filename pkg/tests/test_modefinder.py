import numpy as np
import pytest

from torstab.equilibrium import solve_picard
from torstab.geometry import CrossSectionGrid, ToroidalFrame
from torstab.modefinder import ModeProblem, ModeSearchError, find_crossing, mode_fields, negative_count
from torstab.operators import TrajectoryBackend
from torstab.profiles import make_profile


@pytest.fixture(scope="module")
def grid8():
    return CrossSectionGrid(ToroidalFrame(3.0), 8, 8)


@pytest.fixture(scope="module")
def stable_problem(grid8):
    prof = make_profile("stable_even", c=0.2, tilt=0.3)
    eq = solve_picard(prof, grid8)
    backend = TrajectoryBackend(eq, prof, seeds_log2=7, ergodic_horizon=40.0, cache_horizon=10.0)
    return ModeProblem(eq, prof, backend, n=4)


def test_mode_fields_without_potential_gives_inductive_field(grid8):
    rng = np.random.default_rng(0)
    n = grid8.size
    a_phi = rng.normal(size=n)
    a_tilde = rng.normal(size=2 * n)
    lam = 0.7
    e_field, b_field = mode_fields(grid8, lam, np.zeros(n), a_phi, a_tilde)
    np.testing.assert_allclose(e_field[2], -lam * a_phi)
    np.testing.assert_allclose(e_field[0], -lam * a_tilde[:n])
    np.testing.assert_allclose(e_field[1], -lam * a_tilde[n:])
    assert b_field.shape == (3, n)


def test_mode_problem_needs_vector_rows(grid8):
    prof = make_profile("stable_even", c=0.2, tilt=0.3)
    eq = solve_picard(prof, grid8)
    backend = TrajectoryBackend(eq, prof, seeds_log2=5, ergodic_horizon=20.0, cache_horizon=5.0,
                                with_vector=False)
    with pytest.raises(ValueError):
        ModeProblem(eq, prof, backend, n=4)


def test_negative_count_reports_spectrum(stable_problem):
    rec = negative_count(1.0, stable_problem)
    for key in ("lambda", "raw_count", "count", "smallest", "index_n_eigenvalue", "u_definite", "fallback"):
        assert key in rec
    if rec["u_definite"]:
        assert rec["count"] >= stable_problem.n
    with pytest.raises(ValueError):
        stable_problem.level(0.0)


def test_stable_equilibrium_has_no_crossing(stable_problem):
    with pytest.raises(ModeSearchError) as info:
        find_crossing(stable_problem, [0.1, 1.0, 10.0])
    assert "smaller lambda" in info.value.guidance
    assert len(info.value.table) == 3


def test_lambda_grid_must_be_positive(stable_problem):
    with pytest.raises(ValueError):
        find_crossing(stable_problem, [0.0, 1.0])
