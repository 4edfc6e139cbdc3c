import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings
from hypothesis import strategies as st

from torstab.equilibrium import solve_picard, vacuum_equilibrium
from torstab.geometry import CrossSectionGrid, ToroidalFrame, _stiffness
from torstab.operators import HomogeneousBackend, assemble_L, assemble_scalar_ops
from torstab.profiles import make_profile
from torstab.stability import (
    assess,
    config_hash,
    estimate_k0,
    scan_K,
    smallest_eigenvalue,
    witness_decomposition,
    witness_function,
)


@pytest.fixture(scope="module")
def grid8():
    return CrossSectionGrid(ToroidalFrame(3.0), 8, 8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_smallest_eigenvalue_matches_generalized_problem(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(10, 10))
    form = m + m.T
    w = rng.uniform(0.1, 2.0, 10)
    kappa, h = smallest_eigenvalue(form, w)
    ref = sla.eigh(form, np.diag(w), eigvals_only=True)[0]
    assert kappa == pytest.approx(ref, rel=1e-9, abs=1e-9)
    assert np.sum(w * h * h) == pytest.approx(1.0)
    np.testing.assert_allclose(form @ h, kappa * w * h, atol=1e-8 * np.abs(form).max())


def test_smallest_eigenvalue_shape_check():
    with pytest.raises(ValueError):
        smallest_eigenvalue(np.eye(3), np.ones(4))


def test_witness_has_unit_energy(grid8):
    h = witness_function(grid8)
    energy = h @ _stiffness(grid8).toarray() @ h + np.sum(grid8.weights * h * h / grid8.major**2)
    assert energy == pytest.approx(1.0)


def test_witness_decomposition_adds_up(grid8):
    prof = make_profile("instability", k=0.5)
    eq = solve_picard(prof, grid8, purely_magnetic=True)
    ops = assemble_scalar_ops(eq, prof, 0.0, HomogeneousBackend(eq, prof))
    assemble_L(ops)
    parts = witness_decomposition(ops, eq)
    assert parts["sum"] == pytest.approx(parts["form"], rel=1e-9, abs=1e-9)
    assert parts["one"] == pytest.approx(1.0)
    assert parts["III"] >= 0 and parts["correction"] <= 1e-12
    assert parts["II"] == 0.0


def test_vacuum_is_stable(grid8):
    rep = assess(vacuum_equilibrium(grid8), make_profile("vacuum"))
    assert rep.verdict == "stable"
    assert rep.kappa == pytest.approx(rep.kappa_vacuum)
    assert "eigenvector" not in rep.to_dict()


def test_strong_instability_family_is_unstable(grid8):
    prof = make_profile("instability", k=0.5)
    eq = solve_picard(prof, grid8, purely_magnetic=True)
    rep = assess(eq, prof)
    assert rep.verdict == "unstable"
    assert rep.witness["form"] < 0


@settings(max_examples=30)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers() | st.floats(allow_nan=False), max_size=6))
def test_config_hash_ignores_key_order(d):
    reordered = dict(reversed(list(d.items())))
    assert config_hash(d) == config_hash(reordered)
    assert len(config_hash(d)) == 16


def test_config_hash_changes_with_values():
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_scan_and_k0_estimate(grid8):
    rows = scan_K(make_profile("instability", k=1.0), [0.0, 0.5], grid8)
    assert [r["K"] for r in rows] == [0.0, 0.5]
    assert rows[0]["witness_form"] > 0
    assert rows[1]["witness_form"] < 0
    assert estimate_k0(rows) == 0.5
    assert estimate_k0([{"K": 1.0, "witness_form": 0.3}, {"K": 2.0, "error": "x"}]) is None
