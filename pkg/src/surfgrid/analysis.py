"""Laplace-Beltrami spectra, convergence sweeps and error metrics."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .assembly import SparseSystem, assemble, discretize
from .components import AWARE
from .embedding import build_fragment_forest
from .mesh import DEFAULT_PAD, TriangleMesh, cotan_operator, normalize, normalize_spherical
from .solver import DIRECT_MAX_DIM

logger = logging.getLogger(__name__)

ZERO_REL = 1e-8
RESIDUAL_TOL = 1e-6
REGULARIZATION = 1e-12
REFERENCE = "cotan"


@dataclasses.dataclass
class SpectrumReport:
    """Smallest generalized eigenvalues of ``L x = lambda M x`` (ascending)."""

    eigenvalues: np.ndarray
    mode: str
    depth: int | None = None
    rotation: int | None = None
    residuals: np.ndarray | None = None
    converged: bool = True
    vectors: np.ndarray | None = dataclasses.field(default=None, repr=False)

    @property
    def zero_count(self) -> int:
        lam = self.eigenvalues
        return int(np.sum(np.abs(lam) < ZERO_REL * max(abs(lam[-1]), 1e-300)))

    def scaled(self, factor: float) -> "SpectrumReport":
        return dataclasses.replace(self, eigenvalues=self.eigenvalues * factor)


def generalized_eigs(L, M, m: int, max_iter: int | None = None):
    """``m`` smallest eigenpairs of the pencil ``(L, M)``, L and M PSD.

    Trilinear functions restricted to planar pieces are often linearly
    dependent, so ``M`` may be singular; any such function also lies in the
    kernel of ``L``. Both problems are solved in shift-inverted form
    ``M x = mu (L + e I - sigma M) x`` with ``lambda = sigma + 1 / mu``,
    which sends functions vanishing on the surface to ``lambda = inf``.
    Dense up to a few thousand unknowns, otherwise shift-invert Lanczos.
    """
    n = L.shape[0]
    m = min(m, n)
    L = sparse.csr_matrix(L)
    M = sparse.csr_matrix(M)
    trL, trM = L.diagonal().sum(), M.diagonal().sum()
    if not (trL > 0 and trM > 0):
        raise ValueError("stiffness and mass must have positive trace")
    e = REGULARIZATION * trL / n
    sigma = -1e-3 * trL / trM
    Lr = (L + e * sparse.identity(n, format="csr")).tocsr()
    if n <= DIRECT_MAX_DIM:
        B = (Lr - sigma * M).toarray()
        mu, vec = scipy.linalg.eigh(M.toarray(), B, subset_by_index=(n - m, n - 1))
        lam, ok = sigma + 1.0 / mu, True
    else:
        try:
            lam, vec = splinalg.eigsh(Lr, k=m, M=M, sigma=sigma, which="LM", maxiter=max_iter)
            ok = True
        except splinalg.ArpackNoConvergence as exc:
            lam, vec, ok = exc.eigenvalues, exc.eigenvectors, False
            logger.warning("spectrum: %d of %d eigenpairs converged", len(lam), m)
    order = np.argsort(lam)
    vec = vec[:, order]
    vec /= np.sqrt(np.maximum(np.einsum("ij,ij->j", vec, M @ vec), 1e-300))
    return lam[order], vec, ok


def spectrum(system: SparseSystem, m: int = 50, depth: int | None = None,
             rotation: int | None = None, max_iter: int | None = None,
             keep_vectors: bool = False) -> SpectrumReport:
    """Smallest ``m`` eigenvalues of an assembled system with residual check."""
    lam, vec, ok = generalized_eigs(system.L, system.M, m, max_iter)
    res = residuals(system.L, system.M, lam, vec)
    if np.any(res > RESIDUAL_TOL):
        logger.warning("spectrum: max relative eigen-residual %.2e", res.max())
        ok = False
    return SpectrumReport(lam, system.mode, depth, rotation, res, ok,
                          vec if keep_vectors else None)


def residuals(L, M, lam, vec):
    """Normwise backward error ``||Lx - lambda Mx|| / ((|L| + |lambda| |M|) ||x||)``."""
    nl = splinalg.norm(L, 1)
    nm = splinalg.norm(M, 1)
    r = L @ vec - (M @ vec) * lam[None]
    num = np.linalg.norm(r, axis=0)
    den = (nl + np.abs(lam) * nm) * np.linalg.norm(vec, axis=0)
    return num / np.maximum(den, 1e-300)


def reference_spectrum(mesh: TriangleMesh, m: int = 50) -> SpectrumReport:
    """Cotangent-Laplacian spectrum of the mesh itself (ground truth)."""
    L, M = cotan_operator(mesh)
    return spectrum(SparseSystem(L, M, REFERENCE), m)


def _first_nonzero(lam):
    nz = np.flatnonzero(np.abs(lam) >= ZERO_REL * abs(lam[-1]))
    return lam[nz[0]] if len(nz) else 1.0


def deviation(lam, ref, start: int = 1) -> float:
    """RMS relative deviation of ``lam`` from ``ref`` over indices ``start:``.

    Reference eigenvalues in the kernel are replaced by the first nonzero
    reference eigenvalue in the denominator.
    """
    k = min(len(lam), len(ref))
    lam, ref = np.asarray(lam[:k]), np.asarray(ref[:k])
    den = np.maximum(np.abs(ref), abs(_first_nonzero(ref)))
    rel = np.abs(lam - ref) / den
    return float(np.sqrt(np.mean(rel[start:] ** 2)))


def spread(values) -> np.ndarray:
    """Per-index relative spread ``(max - min) / |mean|`` over rows of ``values``."""
    v = np.asarray(values)
    mean = np.abs(v.mean(axis=0))
    floor = ZERO_REL * np.abs(v[:, -1]).max()
    return (v.max(axis=0) - v.min(axis=0)) / np.maximum(mean, floor)


@dataclasses.dataclass
class SweepResult:
    reports: list
    reference: SpectrumReport
    deviations: list

    def rows(self, key: str):
        """``(key value, index, eigenvalue)`` tuples, reference rows tagged ``ref``."""
        out = [("ref", i + 1, float(v)) for i, v in enumerate(self.reference.eigenvalues)]
        for r in self.reports:
            out += [(getattr(r, key), i + 1, float(v)) for i, v in enumerate(r.eigenvalues)]
        return out


def resolution_sweep(mesh: TriangleMesh, depths, mode: str = AWARE, m: int = 50,
                     reference_mesh: TriangleMesh | None = None,
                     epsilon: float = 0.0,
                     reference: SpectrumReport | None = None,
                     pad: float = DEFAULT_PAD) -> SweepResult:
    """Grid spectra at increasing depths against the cotangent ground truth.

    Eigenvalues are reported in the units of the input mesh. The reference
    uses ``reference_mesh`` (a denser tessellation of the same surface) when
    given, else the mesh itself; a precomputed ``reference`` report skips
    that computation.
    """
    depths = list(depths)
    if depths != sorted(depths):
        raise ValueError("depths must be ascending")
    norm, xf = normalize(mesh, pad)
    forest = build_fragment_forest(norm, max(depths), min_depth=min(depths))
    ref = reference if reference is not None else reference_spectrum(
        reference_mesh if reference_mesh is not None else mesh, m)
    reports, devs = [], []
    for d in depths:
        sysd = assemble(discretize(forest, d, mode), epsilon)
        rep = spectrum(sysd, m, depth=d).scaled(xf.scale ** 2)
        reports.append(rep)
        devs.append(deviation(rep.eigenvalues, ref.eigenvalues))
    return SweepResult(reports, ref, devs)


def rotation_sweep(mesh: TriangleMesh, rotations, depth: int, mode: str = AWARE,
                   m: int = 50, epsilon: float = 0.0, pad: float = DEFAULT_PAD):
    """Spectra of rotated copies at a fixed depth.

    Returns the reports (in input units) and the per-index spread.
    """
    reports = []
    center = mesh.vertices.mean(axis=0)
    for rid, R in enumerate(rotations):
        R = np.asarray(R, dtype=np.float64)
        if not (np.allclose(R @ R.T, np.eye(3), atol=1e-9) and np.linalg.det(R) > 0):
            raise ValueError(f"rotation {rid} is not a proper rotation")
        rot = mesh.replace(vertices=(mesh.vertices - center) @ R.T + center,
                           material_positions=(mesh.material_positions - center) @ R.T + center)
        norm, xf = normalize_spherical(rot, pad)
        forest = build_fragment_forest(norm, depth, min_depth=depth)
        sysd = assemble(discretize(forest, depth, mode), epsilon)
        reports.append(spectrum(sysd, m, depth=depth, rotation=rid).scaled(xf.scale ** 2))
    k = min(len(r.eigenvalues) for r in reports)
    return reports, spread([r.eigenvalues[:k] for r in reports])


def rms_error(evolved, ground_truth) -> tuple[float, float]:
    """``sqrt(sum_i |v_i - g_i|^2)`` and its per-vertex variant ``/ sqrt(n)``."""
    a = evolved.vertices if isinstance(evolved, TriangleMesh) else np.asarray(evolved)
    b = ground_truth.vertices if isinstance(ground_truth, TriangleMesh) else np.asarray(ground_truth)
    if a.shape != b.shape:
        raise ValueError(f"vertex count mismatch: {a.shape} vs {b.shape}")
    total = float(np.sqrt(np.sum((a - b) ** 2)))
    return total, total / np.sqrt(max(len(a), 1))


def sphericity(points) -> float:
    """Std/mean of distances to the centroid (0 for a sphere)."""
    p = points.vertices if isinstance(points, TriangleMesh) else np.asarray(points)
    r = np.linalg.norm(p - p.mean(axis=0), axis=1)
    return float(r.std() / r.mean())
