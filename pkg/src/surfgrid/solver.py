"""Geometric multigrid over nested (connectivity-aware) B-spline spaces."""

from __future__ import annotations

import dataclasses
import itertools
import logging

import numba
import numpy as np
import scipy.linalg
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .assembly import Discretization
from .embedding import CORNER_OFFSETS, corner_from_linear, corner_linear

logger = logging.getLogger(__name__)

LINEAR = "linear"
QUARTET = "quartet"
DIRECT_MAX_DIM = 2000
COARSE_SWEEPS = 500


class ProlongationError(RuntimeError):
    """A fine basis function has no coarse parent (nesting violated)."""


class NumericalError(RuntimeError):
    pass


class SingularSystemError(NumericalError):
    pass


def one_dim_mask(degree: int = 1, stencil: str = LINEAR) -> dict:
    """Two-scale mask as ``{fine offset from 2k: weight}``.

    ``stencil="quartet"`` returns the ``(1 3 3 1)/4`` mask, which belongs to
    quadratic B-splines; it is kept for comparison only and does not
    reproduce trilinear functions.
    """
    if degree != 1:
        raise ValueError(f"only degree-1 (trilinear) splines are supported, got {degree}")
    if stencil == LINEAR:
        return {-1: 0.5, 0: 1.0, 1: 0.5}
    if stencil == QUARTET:
        return {-1: 0.25, 0: 0.75, 1: 0.75, 2: 0.25}
    raise ValueError(f"unknown stencil {stencil!r}")


def build_prolongation(coarse: Discretization, fine: Discretization,
                       stencil: str = LINEAR) -> sparse.csr_matrix:
    """Matrix ``P`` (fine dim x coarse dim) with ``b_c = sum_f P[f, c] b_f``.

    Entry ``P[(k', i'), (k, i)]`` is the tensor two-scale weight between the
    corners, kept only if the fine component ``C_k'^i'`` lies in ``C_k^i``
    (checked through the parent of one of its fragments).
    """
    if fine.depth != coarse.depth + 1 or fine.mode != coarse.mode:
        raise ValueError("prolongation needs consecutive levels of the same mode")
    mask = one_dim_mask(1, stencil)
    nc = coarse.level.resolution
    kf = corner_from_linear(fine.index.basis_corner, 2 * nc)
    rep = fine.index.representative
    parent = fine.level.parents[rep]
    if np.any(parent < 0):
        raise ProlongationError("fine level has fragments without parents")
    pvox = coarse.level.voxels[parent]
    rows, cols, vals = [], [], []
    fine_ids = np.arange(fine.dim)
    for offs in itertools.product(mask.items(), repeat=3):
        o = np.array([x[0] for x in offs])
        w = float(np.prod([x[1] for x in offs]))
        k2 = kf - o
        ok = np.all(k2 % 2 == 0, axis=1)
        k = k2 // 2
        ok &= np.all((k >= 0) & (k <= nc), axis=1)
        local = k - pvox
        incident = ok & np.all((local >= 0) & (local <= 1), axis=1)
        if stencil == LINEAR and np.any(ok & ~incident):
            bad = np.flatnonzero(ok & ~incident)[0]
            raise ProlongationError(
                f"fine basis {bad} (corner {tuple(kf[bad])}) has no coarse component "
                f"at corner {tuple(k[bad])}")
        sel = np.flatnonzero(incident)
        c_local = local[sel] @ np.array([1, 2, 4])
        cid = coarse.index.node_basis[parent[sel], c_local]
        rows.append(fine_ids[sel])
        cols.append(cid)
        vals.append(np.full(len(sel), w))
    P = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(fine.dim, coarse.dim))
    P.sum_duplicates()
    return P


@numba.njit(cache=True)
def _gs_sweeps(indptr, indices, data, x, b, iterations):
    n = len(x)
    skipped = 0
    for _ in range(iterations):
        for i in range(n):
            diag = 0.0
            acc = b[i]
            for jj in range(indptr[i], indptr[i + 1]):
                j = indices[jj]
                if j == i:
                    diag += data[jj]
                else:
                    acc -= data[jj] * x[j]
            if diag != 0.0:
                x[i] = acc / diag
            else:
                skipped += 1
    return skipped


def gauss_seidel(A, u, rhs, iterations: int = 1):
    """Forward Gauss-Seidel sweeps in index order (in place on a copy)."""
    A = sparse.csr_matrix(A)
    u = np.array(u, dtype=np.float64, copy=True)
    rhs = np.ascontiguousarray(rhs, dtype=np.float64)
    if A.shape[0] != len(u) or len(u) != len(rhs):
        raise ValueError("dimension mismatch between system, iterate and rhs")
    if u.ndim == 2:
        for c in range(u.shape[1]):
            col = np.ascontiguousarray(u[:, c])
            _check_skipped(_gs_sweeps(A.indptr, A.indices, A.data, col,
                                      np.ascontiguousarray(rhs[:, c]), iterations))
            u[:, c] = col
        return u
    _check_skipped(_gs_sweeps(A.indptr, A.indices, A.data, u, rhs, iterations))
    return u


def _check_skipped(skipped):
    if skipped:
        logger.warning("gauss_seidel: skipped %d updates of rows with zero diagonal", skipped)


@dataclasses.dataclass(eq=False)
class MultigridHierarchy:
    """Operators ordered coarse to fine; ``prolongations[l]`` maps level l to l+1."""

    operators: list
    prolongations: list
    depths: list
    smooth: int = 10
    shape: str = "W"
    _coarse_inverse: np.ndarray | None = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        self.operators = [sparse.csr_matrix(A) for A in self.operators]
        for A in self.operators:
            A.sort_indices()
        if len(self.prolongations) != len(self.operators) - 1:
            raise ValueError("need one prolongation per consecutive level pair")

    @property
    def finest(self):
        return self.operators[-1]

    def coarse_solve(self, rhs):
        A = self.operators[0]
        if A.shape[0] <= DIRECT_MAX_DIM:
            if self._coarse_inverse is None:
                self._coarse_inverse = scipy.linalg.pinvh(A.toarray())
            return self._coarse_inverse @ rhs
        return gauss_seidel(A, np.zeros_like(rhs), rhs, COARSE_SWEEPS)

    def with_operators(self, operators) -> "MultigridHierarchy":
        return MultigridHierarchy(list(operators), self.prolongations, self.depths,
                                  self.smooth, self.shape)


def build_hierarchy(discs: list, operators: list, smooth: int = 10, shape: str = "W",
                    stencil: str = LINEAR) -> MultigridHierarchy:
    """Hierarchy from per-level discretizations (coarse to fine) and operators."""
    P = [build_prolongation(c, f, stencil) for c, f in zip(discs[:-1], discs[1:])]
    return MultigridHierarchy(list(operators), P, [d.depth for d in discs], smooth, shape)


def cycle(h: MultigridHierarchy, u, rhs, shape: str | None = None):
    """One V- or W-cycle. Returns the new iterate and ``[(depth, residual)]``.

    With a single level the cycle is ``2 * smooth`` Gauss-Seidel sweeps.
    """
    shape = (shape or h.shape).upper()
    if shape not in ("V", "W"):
        raise ValueError(f"cycle shape must be V or W, got {shape!r}")
    history = []
    u = np.array(u, dtype=np.float64, copy=True)
    rhs = np.asarray(rhs, dtype=np.float64)
    if len(h.operators) == 1:
        u = gauss_seidel(h.finest, u, rhs, 2 * h.smooth)
        history.append((h.depths[-1], _norm(rhs - h.finest @ u)))
        return u, history
    u = _recurse(h, len(h.operators) - 1, u, rhs, 1 if shape == "V" else 2, history)
    return u, history


def _recurse(h, lvl, u, b, gamma, history):
    A = h.operators[lvl]
    if lvl == 0:
        u = h.coarse_solve(b)
        history.append((h.depths[0], _norm(b - A @ u)))
        return u
    u = gauss_seidel(A, u, b, h.smooth)
    P = h.prolongations[lvl - 1]
    rc = P.T @ (b - A @ u)
    ec = np.zeros_like(rc)
    for _ in range(gamma):
        ec = _recurse(h, lvl - 1, ec, rc, gamma, history)
    u = u + P @ ec
    u = gauss_seidel(A, u, b, h.smooth)
    history.append((h.depths[lvl], _norm(b - A @ u)))
    return u


def _norm(x):
    return float(np.linalg.norm(x))


def solve_multigrid(h: MultigridHierarchy, rhs, u0=None, tol=1e-8, max_cycles=50):
    """Repeat cycles until the relative residual drops below ``tol``."""
    u = np.zeros_like(rhs, dtype=np.float64) if u0 is None else np.array(u0, dtype=np.float64)
    bnorm = _norm(rhs) or 1.0
    res = _norm(rhs - h.finest @ u) / bnorm
    cycles = 0
    while res > tol and cycles < max_cycles:
        u, _ = cycle(h, u, rhs)
        cycles += 1
        res = _norm(rhs - h.finest @ u) / bnorm
        if not np.isfinite(res):
            raise NumericalError("multigrid diverged (non-finite residual)")
    return u, {"cycles": cycles, "residual": res, "converged": res <= tol}


@dataclasses.dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def cg_reference(A, b, tol: float = 1e-10, max_iter: int | None = None, x0=None) -> CGResult:
    """Plain conjugate gradients for symmetric positive (semi-)definite ``A``.

    ``residual`` is ``||b - A x|| / ||b||``.
    """
    b = np.asarray(b, dtype=np.float64)
    n = len(b)
    max_iter = 10 * n if max_iter is None else max_iter
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - A @ x
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return CGResult(x, 0, 0.0, True)
    p = r.copy()
    rr = r @ r
    it = 0
    while np.sqrt(rr) > tol * bnorm and it < max_iter:
        Ap = A @ p
        pAp = p @ Ap
        if not np.isfinite(pAp):
            raise NumericalError(f"CG: non-finite value at iteration {it}")
        if pAp <= 0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    res = float(np.linalg.norm(b - A @ x) / bnorm)
    if not np.isfinite(res):
        raise NumericalError("CG: non-finite residual")
    return CGResult(x, it, res, res <= tol)


def singularity_ratio(A) -> float:
    """Estimate of ``sigma_min / sigma_max`` of a symmetric matrix."""
    n = A.shape[0]
    if n <= DIRECT_MAX_DIM:
        ev = np.abs(scipy.linalg.eigvalsh(A.toarray() if sparse.issparse(A) else A))
        return float(ev.min() / ev.max()) if ev.max() > 0 else 0.0
    lu = splinalg.splu(sparse.csc_matrix(A))
    d = np.abs(lu.U.diagonal())
    return float(d.min() / d.max()) if d.max() > 0 else 0.0


def reference_solve(A, b, rcond: float = 1e-12):
    """Direct solve that refuses (numerically) singular systems."""
    ratio = singularity_ratio(A)
    if ratio <= rcond:
        raise SingularSystemError(
            f"system is singular to working precision (sigma ratio {ratio:.3e}); "
            "add a diagonal term with --epsilon or rotate the model")
    return splinalg.spsolve(sparse.csc_matrix(A), b)


__all__ = [
    "CORNER_OFFSETS", "corner_linear", "one_dim_mask", "build_prolongation",
    "gauss_seidel", "MultigridHierarchy", "build_hierarchy", "cycle",
    "solve_multigrid", "cg_reference", "reference_solve", "singularity_ratio",
]
