import json
import math

import numpy as np
import pytest

from torstab.equilibrium import (
    EquilibriumError,
    invariants_at,
    reconstruct_fields,
    solve_picard,
    source_integrals,
    vacuum_equilibrium,
    write_equilibrium,
)
from torstab.geometry import CrossSectionGrid, ToroidalFrame, VelocityQuadrature
from torstab.profiles import make_profile


@pytest.fixture(scope="module")
def grid():
    return CrossSectionGrid(ToroidalFrame(3.0), 12, 12)


def test_vacuum_is_field_free(grid):
    eq = solve_picard(make_profile("vacuum"), grid)
    assert eq.is_field_free
    assert eq.iterations == 1


def test_reflection_symmetric_even_profile_has_no_fields(grid):
    eq = solve_picard(make_profile("stable_even"), grid)
    assert eq.is_field_free


def test_tilted_profile_carries_current_and_solves_its_equations(grid):
    eq = solve_picard(make_profile("stable_even", c=0.2, tilt=0.3), grid, tol=1e-12)
    assert np.abs(eq.a_phi).max() > 1e-4
    assert np.abs(eq.phi).max() < 1e-12
    assert eq.residual_a < 1e-9
    assert 0 <= eq.contraction < 1


def test_unequal_species_produce_a_potential(grid):
    eq = solve_picard(make_profile("stable_even", c=0.2, tilt=0.3, ratio=1.02), grid)
    assert np.abs(eq.phi).max() > 1e-4
    assert eq.residual_phi < 1e-8


def _tensor_sources(grid, prof, k):
    rule = VelocityQuadrature.tensor(20.0, 96)
    v = rule.nodes
    gam = np.sqrt(1 + (v * v).sum(1))
    p = grid.major[k] * v[:, 2]
    dens = sum(s * prof.mu(s, gam, p) for s in (1, -1)) @ rule.weights
    curr = sum(s * prof.mu(s, gam, p) * v[:, 2] / gam for s in (1, -1)) @ rule.weights
    return dens, curr


def test_sources_match_tensor_velocity_sum(grid):
    prof = make_profile("stable_even", c=0.2, tilt=0.3, ratio=1.3)
    z = np.zeros(grid.size)
    f1, f2 = source_integrals(grid, z, z, prof)
    for k in (0, grid.size // 2, grid.size - 1):
        dens, curr = _tensor_sources(grid, prof, k)
        assert f1[k] == pytest.approx(dens, rel=5e-4)
        assert f2[k] == pytest.approx(curr, rel=5e-4)


def test_cylindrical_rule_converges_at_second_order(grid):
    prof = make_profile("stable_even", c=0.2, tilt=0.3, ratio=1.3)
    z = np.zeros(grid.size)
    dens, _ = _tensor_sources(grid, prof, 0)
    errs = []
    for n in (48, 96, 192):
        f1, _ = source_integrals(grid, z, z, prof, VelocityQuadrature.cylindrical(28.0, n, 2 * n))
        errs.append(abs(f1[0] - dens))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 1.8)


def test_purely_magnetic_needs_symmetric_profile(grid):
    asym = make_profile("stable_even", tilt=0.3, ratio=1.5)
    with pytest.raises(EquilibriumError):
        solve_picard(asym, grid, purely_magnetic=True)


def test_iteration_budget_is_enforced(grid):
    with pytest.raises(EquilibriumError) as info:
        solve_picard(make_profile("stable_even", c=0.2, tilt=0.3), grid, tol=1e-15, max_iter=2)
    assert info.value.history


def test_damping_validation(grid):
    with pytest.raises(ValueError):
        solve_picard(make_profile("stable_even"), grid, damping=0.0)


def test_invariants_in_vacuum():
    grid = CrossSectionGrid(ToroidalFrame(3.0), 8, 8)
    eq = vacuum_equilibrium(grid)
    state = np.array([[0.5, math.pi / 3, 0.3, -0.2, 0.7]])
    e_p, p_p, e_m, p_m = invariants_at(state, eq)
    gam = math.sqrt(1 + 0.09 + 0.04 + 0.49)
    big_r = 3.0 + 0.5 * math.cos(math.pi / 3)
    assert e_p[0] == pytest.approx(gam) and e_m[0] == pytest.approx(gam)
    assert p_p[0] == pytest.approx(big_r * 0.7) and p_m[0] == pytest.approx(big_r * 0.7)
    with pytest.raises(ValueError):
        invariants_at(np.array([[1.5, 0, 0, 0, 0]]), eq)


def test_invariants_include_potentials_with_species_sign(grid):
    eq = solve_picard(make_profile("stable_even", c=0.2, tilt=0.3, ratio=1.02), grid)
    rr, tt = grid.mesh()
    k = grid.size // 3
    state = np.array([[rr[k], tt[k], 0.0, 0.0, 0.0]])
    e_p, p_p, e_m, p_m = invariants_at(state, eq)
    assert e_p[0] - 1 == pytest.approx(eq.phi[k], rel=1e-3, abs=1e-8)
    assert 1 - e_m[0] == pytest.approx(eq.phi[k], rel=1e-3, abs=1e-8)
    assert p_p[0] == pytest.approx(grid.major[k] * eq.a_phi[k], rel=1e-3, abs=1e-8)
    assert p_m[0] == pytest.approx(-p_p[0])


def test_fields_of_a_pure_vector_potential(grid):
    eq = vacuum_equilibrium(grid)
    eq.a_phi = np.ones(grid.size)
    e_f, b_f = reconstruct_fields(eq)
    assert np.all(e_f == 0)
    # for A = 1 the flux is R, so B_theta = d_r(R) / R = cos(theta) / R away from the wall
    rr, tt = grid.mesh()
    inner = rr < 0.8
    np.testing.assert_allclose(b_f[1][inner], np.cos(tt[inner]) / grid.major[inner], atol=0.02)


def test_write_equilibrium_outputs(tmp_path, grid):
    eq = solve_picard(make_profile("stable_even", c=0.2, tilt=0.3), grid)
    summary = write_equilibrium(eq, tmp_path / "eq", "abc123")
    lines = (tmp_path / "eq.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc123"
    assert lines[1] == "# r,theta,phi,A_phi,E_r,E_theta,B_r,B_theta"
    assert len(lines) == 2 + grid.size
    data = json.loads((tmp_path / "eq.json").read_text())
    assert data["config_hash"] == "abc123"
    assert data["sup_a_phi"] == pytest.approx(summary["sup_a_phi"])
