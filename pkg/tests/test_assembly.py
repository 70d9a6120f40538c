from math import factorial

import numpy as np
import pytest

from surfgrid.assembly import (MASS, STIFFNESS, assemble, build_screened_system, discretize,
                               eval_bspline)
from surfgrid.components import AWARE, UNAWARE
from surfgrid.mesh import face_component_labels
from surfgrid.quadrature import DEGREE4, DEGREE6

from conftest import surface_samples


@pytest.mark.parametrize("rule", [DEGREE4, DEGREE6])
def test_quadrature_integrates_monomials(rule):
    # reference triangle (0,0), (1,0), (0,1); area 1/2
    x, y = rule.barycentric[:, 1], rule.barycentric[:, 2]
    assert rule.weights.sum() == pytest.approx(1.0, abs=1e-12)
    for a in range(rule.degree + 1):
        for b in range(rule.degree + 1 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            got = 0.5 * np.sum(rule.weights * x ** a * y ** b)
            assert got == pytest.approx(exact, rel=1e-9, abs=1e-14)


def _coordinate_coefficients(disc):
    # trilinear functions reproduce linear ones: coefficient = corner position
    return disc.index.corners() / disc.level.resolution


def _exact_energies(mesh, axis):
    n = mesh.face_normals
    a = mesh.face_areas
    dirichlet = np.sum(a * (1.0 - n[:, axis] ** 2))
    x = mesh.vertices[mesh.faces][:, :, axis]
    l2 = np.sum(a / 12.0 * ((x ** 2).sum(1) + x.sum(1) ** 2))
    return dirichlet, l2


@pytest.mark.parametrize("mode", [AWARE, UNAWARE])
def test_linear_functions_exact(hemispheres_forest, mode):
    mesh = hemispheres_forest.mesh
    for d in (2, 3):
        disc = discretize(hemispheres_forest, d, mode)
        L, M = disc.stiffness(), disc.mass()
        u = _coordinate_coefficients(disc)
        for axis in range(3):
            dirichlet, l2 = _exact_energies(mesh, axis)
            assert u[:, axis] @ L @ u[:, axis] == pytest.approx(dirichlet, rel=1e-10)
            assert u[:, axis] @ M @ u[:, axis] == pytest.approx(l2, rel=1e-10)


def test_partition_of_unity(hemispheres_forest):
    mesh = hemispheres_forest.mesh
    for mode in (AWARE, UNAWARE):
        disc = discretize(hemispheres_forest, 3, mode)
        one = np.ones(disc.dim)
        np.testing.assert_allclose(disc.stiffness() @ one, 0.0, atol=1e-12)
        assert one @ disc.mass() @ one == pytest.approx(mesh.face_areas.sum(), rel=1e-12)


def test_aware_component_indicators_in_kernel(hemispheres_forest):
    mesh = hemispheres_forest.mesh
    disc = discretize(hemispheres_forest, 2, AWARE)
    labels = face_component_labels(mesh)[disc.level.faces]
    L = disc.stiffness()
    for c in np.unique(labels):
        ind = np.zeros(disc.dim)
        ind[np.unique(disc.index.node_basis[labels == c])] = 1.0
        assert np.abs(L @ ind).max() <= 1e-9 * np.abs(L).max()


def test_evaluation_reproduces_linear(hemispheres_forest, rng):
    disc = discretize(hemispheres_forest, 3, AWARE)
    pts, faces = surface_samples(disc.mesh, 500, rng)
    E = disc.evaluation_matrix(pts, faces)
    np.testing.assert_allclose(E @ _coordinate_coefficients(disc), pts, atol=1e-13)
    np.testing.assert_allclose(E.sum(axis=1), 1.0, atol=1e-13)


def test_evaluation_matches_pointwise_bspline(sphere_forest, rng):
    disc = discretize(sphere_forest, 3, UNAWARE)
    pts, faces = surface_samples(disc.mesh, 50, rng)
    E = disc.evaluation_matrix(pts, faces).toarray()
    corners = disc.index.corners()
    for q in range(len(pts)):
        for b in np.flatnonzero(E[q]):
            assert E[q, b] == pytest.approx(eval_bspline(corners[b], 3, pts[q])[0], abs=1e-13)


def test_load_vectors_consistent(sphere_forest):
    disc = discretize(sphere_forest, 3, AWARE)
    mesh = disc.mesh
    f, s = disc.load_vectors(mesh.vertices)
    u = _coordinate_coefficients(disc)
    np.testing.assert_allclose(f, disc.stiffness() @ u, atol=1e-12)
    np.testing.assert_allclose(s, disc.mass() @ u, atol=1e-12)


def test_integrate_pair_matches_matrix(sphere_forest, rng):
    disc = discretize(sphere_forest, 3, AWARE)
    L, M = disc.stiffness(), disc.mass()
    r, c = L.nonzero()
    for i in rng.choice(len(r), 20, replace=False):
        assert disc.integrate_pair(r[i], c[i], STIFFNESS) == pytest.approx(L[r[i], c[i]])
        assert disc.integrate_pair(r[i], c[i], MASS) == pytest.approx(M[r[i], c[i]])


def test_mass_face_scale(sphere_forest):
    disc = discretize(sphere_forest, 3, AWARE)
    scale = np.full(disc.mesh.face_count, 2.5)
    np.testing.assert_allclose((disc.mass(scale) - 2.5 * disc.mass()).data, 0, atol=1e-15)


def test_screened_system_and_epsilon(sphere_forest):
    disc = discretize(sphere_forest, 2, AWARE)
    sys_ = assemble(disc, epsilon=1e-3)
    np.testing.assert_allclose((sys_.L - disc.stiffness()).diagonal(), 1e-3)
    A, rhs = build_screened_system(disc.stiffness(), disc.mass(), 0.5)
    np.testing.assert_allclose((A - disc.stiffness() - 0.5 * disc.mass()).data, 0, atol=1e-15)
    f = np.ones((disc.dim, 1))
    np.testing.assert_allclose(rhs(f, 2 * f), f + 0.5 * 2 * f)
