import numpy as np
import pytest

from surfgrid import shapes
from surfgrid.embedding import build_fragment_forest
from surfgrid.mesh import normalize


@pytest.fixture(scope="session")
def sphere():
    return shapes.icosphere(2)


@pytest.fixture(scope="session")
def sphere_forest(sphere):
    norm, _ = normalize(sphere)
    return build_fragment_forest(norm, 4, min_depth=2)


@pytest.fixture(scope="session")
def hemispheres_forest():
    norm, _ = normalize(shapes.two_hemispheres(subdivisions=2))
    return build_fragment_forest(norm, 4, min_depth=2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def surface_samples(mesh, count, rng):
    """Uniform random points on random faces (not area weighted)."""
    faces = rng.integers(0, mesh.face_count, count)
    bary = rng.dirichlet([1.0, 1.0, 1.0], count)
    pts = np.einsum("qj,qjd->qd", bary, mesh.vertices[mesh.faces[faces]])
    return pts, faces


ACCEPTANCE = {}


def record(criterion: int, passed: bool, detail: str):
    """Store a criterion verdict; printed in the terminal summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
