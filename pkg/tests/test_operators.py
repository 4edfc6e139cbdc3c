import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from torstab.equilibrium import solve_picard, vacuum_equilibrium
from torstab.geometry import CrossSectionGrid, ToroidalFrame
from torstab.operators import (
    DivFreeBasis,
    HomogeneousBackend,
    NullBackend,
    assemble_L,
    assemble_scalar_ops,
    discrete_divergence,
    dump_operators,
    minimizer_identity_check,
    quadratic_form_A2,
)
from torstab.profiles import make_profile


@pytest.fixture(scope="module")
def grid8():
    return CrossSectionGrid(ToroidalFrame(3.0), 8, 8)


@pytest.fixture(scope="module")
def homogeneous_ops(grid8):
    prof = make_profile("instability", k=0.5)
    eq = solve_picard(prof, grid8, purely_magnetic=True)
    ops = assemble_scalar_ops(eq, prof, 0.0, HomogeneousBackend(eq, prof))
    assemble_L(ops)
    return ops


def test_vacuum_forms_reduce_to_the_laplacian(grid8):
    eq = vacuum_equilibrium(grid8)
    ops = assemble_scalar_ops(eq, make_profile("vacuum"), 0.0, NullBackend(grid8))
    stiff = ops.forms["stiffness"]
    np.testing.assert_allclose(ops.forms["A1"], -stiff, atol=1e-12)
    np.testing.assert_allclose(ops.forms["A2"], stiff + np.diag(grid8.weights / grid8.major**2), atol=1e-12)
    assert np.abs(ops.forms["B"]).max() == 0.0
    np.testing.assert_allclose(assemble_L(ops), ops.forms["A2"], atol=1e-12)


def test_homogeneous_grams_are_symmetric_and_positive(homogeneous_ops):
    for g in homogeneous_ops.grams[:2]:
        np.testing.assert_allclose(g, g.T, atol=1e-12 * np.abs(g).max())
        assert np.linalg.eigvalsh(g).min() > -1e-10 * np.abs(g).max()


def test_homogeneous_backend_only_serves_the_kernel(grid8):
    prof = make_profile("instability", k=0.5)
    eq = solve_picard(prof, grid8, purely_magnetic=True)
    backend = HomogeneousBackend(eq, prof)
    with pytest.raises(ValueError):
        backend.scalar_grams(0.5)
    with pytest.raises(ValueError):
        backend.vector_terms(0.5, np.zeros((2 * grid8.size, 2)))


def test_homogeneous_backend_rejects_fielded_equilibria(grid8):
    prof = make_profile("stable_even", c=0.2, tilt=0.3)
    eq = solve_picard(prof, grid8)
    with pytest.raises(ValueError):
        HomogeneousBackend(eq, prof)


def test_negative_lambda_is_rejected(grid8):
    eq = vacuum_equilibrium(grid8)
    with pytest.raises(ValueError):
        assemble_scalar_ops(eq, make_profile("vacuum"), -0.1, NullBackend(grid8))


def test_a1_is_negative_definite_and_l_is_symmetric(homogeneous_ops):
    w = homogeneous_ops.weights
    scaled = homogeneous_ops.forms["A1"] / np.sqrt(np.outer(w, w))
    assert np.linalg.eigvalsh(scaled).max() < 0
    lform = homogeneous_ops.forms["L"]
    assert np.abs(lform - lform.T).max() <= 1e-12 * np.abs(lform).max()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_a2_quadratic_form_equals_sum_of_its_terms(homogeneous_ops, seed):
    h = np.random.default_rng(seed).normal(size=homogeneous_ops.grid.size)
    parts = quadratic_form_A2(h, homogeneous_ops)
    assert parts["sum_of_terms"] == pytest.approx(parts["total"], rel=1e-10, abs=1e-12)
    assert parts["gradient"] >= 0 and parts["projection"] >= -1e-12


def test_divergence_free_basis_properties(grid8):
    basis = DivFreeBasis.build(grid8, 8)
    assert basis.size == 8
    assert basis.orthonormality_error() < 1e-10
    assert np.abs(basis.divergence()).max() < 1e-9 * np.abs(basis.vectors).max()
    assert np.all(np.diff(basis.sigma) >= -1e-10)
    assert basis.sigma[0] > 0


def test_divergence_operator_detects_a_uniform_radial_field(grid8):
    # a uniform radial field has divergence 1/r + cos(theta)/R
    n = grid8.size
    field = np.concatenate([np.ones(n), np.zeros(n)])
    assert np.abs(discrete_divergence(grid8, field)).max() > 0.1


def test_minimizer_check_requires_kernel_and_trajectories(homogeneous_ops, grid8):
    with pytest.raises(ValueError):
        minimizer_identity_check(np.zeros(grid8.size), None, homogeneous_ops, NullBackend(grid8))


def test_dump_operators_binary_layout(homogeneous_ops, tmp_path):
    stem = tmp_path / "ops"
    meta = dump_operators(homogeneous_ops, str(stem), config_hash="abc")
    assert set(meta["files"]) == {"A1", "A2", "B", "L"}
    n = homogeneous_ops.grid.size
    for name, path in meta["files"].items():
        raw = np.fromfile(path, dtype=np.float64)
        shape = np.frombuffer(raw[:2].tobytes(), dtype=np.int64)
        assert tuple(shape) == (n, n)
        np.testing.assert_array_equal(raw[2:2 + n], homogeneous_ops.weights)
        np.testing.assert_array_equal(raw[2 + n:].reshape(n, n), homogeneous_ops.forms[name])
    side = json.loads((tmp_path / "ops.json").read_text())
    assert side["config_hash"] == "abc" and side["lambda"] == 0.0
