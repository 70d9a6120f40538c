import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from surfgrid.assembly import build_screened_system, discretize
from surfgrid.components import AWARE, UNAWARE
from surfgrid.solver import (QUARTET, MultigridHierarchy, NumericalError, SingularSystemError,
                             build_hierarchy, build_prolongation, cg_reference, cycle,
                             gauss_seidel, one_dim_mask, reference_solve, solve_multigrid)

from conftest import surface_samples


def _spd(n, rng, density=0.2):
    B = sparse.random(n, n, density=density, random_state=rng)
    return (B @ B.T + sparse.identity(n)).tocsr()


def test_gauss_seidel_matches_textbook_sweep(rng):
    A = _spd(30, rng)
    b = rng.random(30)
    x = rng.random(30)
    D = A.toarray()
    ref = x.copy()
    for i in range(30):
        ref[i] = (b[i] - D[i] @ ref + D[i, i] * ref[i]) / D[i, i]
    np.testing.assert_allclose(gauss_seidel(A, x, b, 1), ref, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gauss_seidel_decreases_energy(seed):
    rng = np.random.default_rng(seed)
    A = _spd(25, rng)
    b = rng.standard_normal(25)
    x = rng.standard_normal(25)

    def energy(v):
        return 0.5 * v @ A @ v - b @ v

    y = gauss_seidel(A, x, b, 1)
    assert energy(y) <= energy(x) + 1e-12


def test_gauss_seidel_columns_and_zero_rows(rng, caplog):
    A = _spd(10, rng).tolil()
    A[3, :] = 0
    A[:, 3] = 0
    A = A.tocsr()
    b = rng.random((10, 2))
    out = gauss_seidel(A, np.zeros((10, 2)), b, 3)
    assert out.shape == (10, 2)
    assert "zero diagonal" in caplog.text
    with pytest.raises(ValueError):
        gauss_seidel(A, np.zeros(9), np.zeros(10))


def test_cg_matches_dense_solve(rng):
    A = _spd(40, rng)
    b = rng.random(40)
    res = cg_reference(A, b, tol=1e-12)
    assert res.converged
    np.testing.assert_allclose(res.x, np.linalg.solve(A.toarray(), b), rtol=1e-9)


def test_cg_zero_rhs_and_semidefinite(rng):
    A = _spd(5, rng)
    assert cg_reference(A, np.zeros(5)).iterations == 0
    # graph Laplacian with a consistent right-hand side
    L = sparse.diags([-np.ones(9), 2 * np.ones(10), -np.ones(9)], [-1, 0, 1]).tolil()
    L[0, 0] = L[9, 9] = 1
    b = rng.standard_normal(10)
    b -= b.mean()
    res = cg_reference(L.tocsr(), b, tol=1e-10)
    assert res.converged


def test_cg_non_finite_raises():
    A = sparse.csr_matrix(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    with pytest.raises(NumericalError):
        cg_reference(A, np.ones(2))


def test_masks():
    assert one_dim_mask() == {-1: 0.5, 0: 1.0, 1: 0.5}
    q = one_dim_mask(stencil=QUARTET)
    assert sum(q.values()) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        one_dim_mask(2)


@pytest.mark.parametrize("mode", [AWARE, UNAWARE])
def test_prolongation_reproduces_coarse_functions(hemispheres_forest, mode, rng):
    mesh = hemispheres_forest.mesh
    pts, faces = surface_samples(mesh, 1000, rng)
    for d in (2, 3):
        c = discretize(hemispheres_forest, d, mode)
        f = discretize(hemispheres_forest, d + 1, mode)
        P = build_prolongation(c, f)
        Ec = c.evaluation_matrix(pts, faces)
        Ef = f.evaluation_matrix(pts, faces)
        assert abs(Ec - Ef @ P).max() <= 1e-12


def test_prolongation_galerkin_consistent(sphere_forest):
    c = discretize(sphere_forest, 2, AWARE)
    f = discretize(sphere_forest, 3, AWARE)
    P = build_prolongation(c, f)
    for fine_op, coarse_op in ((f.stiffness(), c.stiffness()), (f.mass(), c.mass())):
        assert abs(P.T @ fine_op @ P - coarse_op).max() <= 1e-12 * abs(coarse_op).max()


def test_prolongation_needs_consecutive_levels(sphere_forest):
    with pytest.raises(ValueError):
        build_prolongation(discretize(sphere_forest, 2), discretize(sphere_forest, 4))


def _screened_hierarchy(forest, mode, shape="W", alpha=1.0):
    discs = [discretize(forest, d, mode) for d in forest.depths()]
    ops = [build_screened_system(d.stiffness(), d.mass(), alpha)[0] for d in discs]
    return build_hierarchy(discs, ops, smooth=3, shape=shape)


@pytest.mark.parametrize("shape", ["V", "W"])
def test_multigrid_reduces_residual(sphere_forest, shape, rng):
    h = _screened_hierarchy(sphere_forest, AWARE, shape)
    A = h.finest
    b = A @ rng.random(A.shape[0])
    u, hist = cycle(h, np.zeros_like(b), b)
    assert np.linalg.norm(b - A @ u) < 0.5 * np.linalg.norm(b)
    assert hist[-1][0] == 4
    u, info = solve_multigrid(h, b, tol=1e-6, max_cycles=200)
    assert info["converged"] and info["residual"] <= 1e-6


def test_single_level_cycle_is_smoothing(sphere_forest, rng):
    disc = discretize(sphere_forest, 2, AWARE)
    A = (disc.stiffness() + disc.mass()).tocsr()
    h = MultigridHierarchy([A], [], [2], smooth=4)
    b = rng.random(A.shape[0])
    u, _ = cycle(h, np.zeros_like(b), b)
    np.testing.assert_allclose(u, gauss_seidel(A, np.zeros_like(b), b, 8))


def test_bad_cycle_shape(sphere_forest):
    h = _screened_hierarchy(sphere_forest, AWARE)
    with pytest.raises(ValueError):
        cycle(h, np.zeros(h.finest.shape[0]), np.zeros(h.finest.shape[0]), "X")


def test_reference_solve_detects_singular():
    A = sparse.csr_matrix(np.diag([1.0, 2.0, 0.0]))
    with pytest.raises(SingularSystemError):
        reference_solve(A, np.ones(3))
    x = reference_solve(A + 1e-8 * sparse.identity(3), np.ones(3))
    assert np.all(np.isfinite(x))
