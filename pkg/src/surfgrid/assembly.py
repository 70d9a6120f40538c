"""Trilinear B-splines restricted to the surface and Galerkin assembly.

Integrands are polynomial on every fragment (trilinear functions restricted
to a plane), so fan-triangulating each fragment and applying a Dunavant rule
of sufficient degree integrates them exactly. Stiffness uses the tangential
(surface) gradient and is stored with the positive semi-definite sign
convention ``L_ij = +∫ <∇b_i, ∇b_j>``.
"""

from __future__ import annotations

import dataclasses
import logging
from functools import cached_property

import numpy as np
from scipy import sparse

from .components import (AWARE, BasisIndex, ComponentTable, corner_components,
                         enumerate_basis)
from .embedding import CORNER_OFFSETS, FragmentForest, FragmentLevel
from .mesh import TriangleMesh
from .quadrature import DEGREE4, DEGREE6, QuadratureRule

logger = logging.getLogger(__name__)

STIFFNESS = "stiffness"
MASS = "mass"
_CHUNK = 20000


def hat(t):
    return np.maximum(0.0, 1.0 - np.abs(t))


def eval_bspline(corner, depth: int, p, voxel=None):
    """Value and gradient of the trilinear B-spline centred at ``corner``.

    The gradient is one-sided on voxel faces: it is taken from the trilinear
    piece of ``voxel`` (default: the voxel containing ``p``).
    """
    n = 1 << depth
    k = np.asarray(corner, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    t = n * p - k
    h = hat(t)
    value = float(np.prod(h))
    if voxel is None:
        voxel = np.clip(np.floor(n * p), 0, n - 1)
    # slope of hat(N p - k) inside the voxel: +N left of the corner, -N right of it
    side = np.where(np.asarray(voxel) < k, 1.0, -1.0)
    inside = np.all(np.abs(np.asarray(voxel) + 0.5 - k) <= 0.5)
    grad = np.zeros(3)
    if inside:
        for a in range(3):
            grad[a] = n * side[a] * np.prod([h[b] for b in range(3) if b != a])
    return value, grad


def local_trilinear(t):
    """Values ``(..., 8)`` and voxel-local gradients ``(..., 8, 3)`` of the 8
    corner functions at local coordinates ``t`` in ``[0, 1]^3``."""
    off = CORNER_OFFSETS
    f = np.where(off[None] == 1, t[..., None, :], 1.0 - t[..., None, :])
    sign = np.where(off == 1, 1.0, -1.0)
    val = f.prod(axis=-1)
    grad = np.empty(val.shape + (3,))
    grad[..., 0] = sign[:, 0] * f[..., 1] * f[..., 2]
    grad[..., 1] = sign[:, 1] * f[..., 0] * f[..., 2]
    grad[..., 2] = sign[:, 2] * f[..., 0] * f[..., 1]
    return val, grad


def _segment_sum(owner, rows, n):
    """Sum ``rows`` (2-D) into ``n`` buckets given by ``owner``."""
    S = sparse.csr_matrix((np.ones(len(owner)), (owner, np.arange(len(owner)))),
                          shape=(n, len(owner)))
    return np.asarray(S @ rows)


def fan_quadrature(level: FragmentLevel, ids, rule: QuadratureRule):
    """Quadrature points of fragments ``ids``.

    Returns ``(owner, points, weights)`` with ``owner`` indexing into ``ids``.
    """
    polys = level.polys[ids]
    counts = level.counts[ids]
    owners, pts, wts = [], [], []
    for j in range(1, polys.shape[1] - 1):
        live = np.flatnonzero(counts > j + 1)
        if not len(live):
            continue
        v0 = polys[live, 0]
        v1 = polys[live, j]
        v2 = polys[live, j + 1]
        area = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
        b = rule.barycentric
        p = (b[None, :, 0, None] * v0[:, None] + b[None, :, 1, None] * v1[:, None]
             + b[None, :, 2, None] * v2[:, None])
        owners.append(np.repeat(live, len(rule)))
        pts.append(p.reshape(-1, 3))
        wts.append((area[:, None] * rule.weights[None]).ravel())
    if not owners:
        return np.zeros(0, np.int64), np.zeros((0, 3)), np.zeros(0)
    return np.concatenate(owners), np.concatenate(pts), np.concatenate(wts)


def barycentric_in_faces(mesh: TriangleMesh, faces, points):
    """Barycentric coordinates of points lying in the given faces."""
    p = mesh.vertices[mesh.faces[faces]]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    r = points - p[:, 0]
    a11 = np.einsum("ij,ij->i", e1, e1)
    a12 = np.einsum("ij,ij->i", e1, e2)
    a22 = np.einsum("ij,ij->i", e2, e2)
    b1 = np.einsum("ij,ij->i", r, e1)
    b2 = np.einsum("ij,ij->i", r, e2)
    det = a11 * a22 - a12 * a12
    s = (a22 * b1 - a12 * b2) / det
    t = (a11 * b2 - a12 * b1) / det
    return np.stack([1 - s - t, s, t], axis=1)


def face_gradients(mesh: TriangleMesh, values):
    """Per-face (tangential) gradient of piecewise-linear vertex data.

    ``values`` has shape ``(n,)`` or ``(n, c)``; result ``(m, 3)`` or ``(m, 3, c)``.
    """
    vals = np.asarray(values, dtype=np.float64)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    p = mesh.vertices[mesh.faces]
    n = mesh.face_normals
    area2 = 2.0 * np.maximum(mesh.face_areas, 1e-300)
    out = np.zeros((mesh.face_count, 3, vals.shape[1]))
    for j in range(3):
        e = p[:, (j + 2) % 3] - p[:, (j + 1) % 3]
        gphi = np.cross(n, e) / area2[:, None]
        out += gphi[:, :, None] * vals[mesh.faces[:, j]][:, None, :]
    return out[..., 0] if squeeze else out


@dataclasses.dataclass(eq=False)
class Discretization:
    """Basis functions of one grid level restricted to the mesh.

    Holds the fragments, their corner components, the basis numbering for one
    mode and per-fragment local element matrices.
    """

    mesh: TriangleMesh
    level: FragmentLevel
    table: ComponentTable
    index: BasisIndex

    @property
    def mode(self) -> str:
        return self.index.mode

    @property
    def depth(self) -> int:
        return self.level.depth

    @property
    def dim(self) -> int:
        return self.index.dim

    def _local_frames(self, ids, rule):
        lv = self.level
        owner, pts, w = fan_quadrature(lv, ids, rule)
        frag = ids[owner]
        n = lv.resolution
        t = np.clip(n * pts - lv.voxels[frag], 0.0, 1.0)
        val, grad = local_trilinear(t)
        grad *= n
        nrm = self.mesh.face_normals[lv.faces[frag]]
        grad -= np.einsum("qkd,qd->qk", grad, nrm)[..., None] * nrm[:, None, :]
        return owner, frag, pts, w, val, grad

    @cached_property
    def local_stiffness(self) -> np.ndarray:
        return self._local(STIFFNESS)

    @cached_property
    def local_mass(self) -> np.ndarray:
        return self._local(MASS)

    def _local(self, kind):
        nf = len(self.level)
        out = np.zeros((nf, 8, 8))
        rule = DEGREE4 if kind == STIFFNESS else DEGREE6
        for start in range(0, nf, _CHUNK):
            ids = np.arange(start, min(start + _CHUNK, nf))
            owner, _, _, w, val, grad = self._local_frames(ids, rule)
            if kind == STIFFNESS:
                q = np.matmul(grad * w[:, None, None], grad.transpose(0, 2, 1))
            else:
                q = (val * w[:, None])[:, :, None] * val[:, None, :]
            loc = _segment_sum(owner, q.reshape(len(q), 64), len(ids)).reshape(-1, 8, 8)
            out[ids] = 0.5 * (loc + loc.transpose(0, 2, 1))
        return out

    @cached_property
    def _pattern(self):
        """Sparsity pattern: unique (row, col) and scatter map of the upper triangle."""
        nb = self.index.node_basis
        rows = np.repeat(nb, 8, axis=1).ravel()
        cols = np.tile(nb, (1, 8)).ravel()
        upper = rows <= cols
        key = rows[upper] * self.dim + cols[upper]
        uniq, inv = np.unique(key, return_inverse=True)
        return upper, uniq // self.dim, uniq % self.dim, inv

    def scatter(self, local: np.ndarray, fragment_scale=None) -> sparse.csr_matrix:
        """Sum per-fragment 8x8 blocks into a symmetric sparse matrix."""
        upper, r, c, inv = self._pattern
        vals = local if fragment_scale is None else local * fragment_scale[:, None, None]
        data = np.bincount(inv, weights=vals.reshape(-1)[upper], minlength=len(r))
        U = sparse.csr_matrix((data, (r, c)), shape=(self.dim, self.dim))
        A = U + sparse.triu(U, k=1).T
        A = A.tocsr()
        A.sort_indices()
        return A

    def stiffness(self) -> sparse.csr_matrix:
        return self.scatter(self.local_stiffness)

    def mass(self, face_scale=None) -> sparse.csr_matrix:
        """Mass matrix; ``face_scale`` rescales the measure of each mesh face."""
        scale = None if face_scale is None else np.asarray(face_scale)[self.level.faces]
        return self.scatter(self.local_mass, scale)

    def load_vectors(self, values):
        """Gradient and value loads of piecewise-linear vertex data.

        Returns ``(f, s)`` with ``f_i = ∫<∇g, ∇b_i>`` and ``s_i = ∫ g b_i``,
        each of shape ``(dim, c)``.
        """
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        nchan = vals.shape[1]
        lv = self.level
        gface = face_gradients(self.mesh, vals)  # (m, 3, c)
        f_out = np.zeros((self.dim, nchan))
        s_out = np.zeros((self.dim, nchan))
        nb = self.index.node_basis
        for start in range(0, len(lv), _CHUNK):
            ids = np.arange(start, min(start + _CHUNK, len(lv)))
            _, frag, _, w, _, grad = self._local_frames(ids, DEGREE4)
            g = gface[lv.faces[frag]]
            loc = np.einsum("q,qkd,qdc->qkc", w, grad, g)
            for c in range(nchan):
                f_out[:, c] += np.bincount(nb[frag].ravel(), weights=loc[..., c].ravel(),
                                           minlength=self.dim)
            _, frag, pts, w, val, _ = self._local_frames(ids, DEGREE6)
            bary = barycentric_in_faces(self.mesh, lv.faces[frag], pts)
            gq = np.einsum("qj,qjc->qc", bary, vals[self.mesh.faces[lv.faces[frag]]])
            loc = np.einsum("q,qk,qc->qkc", w, val, gq)
            for c in range(nchan):
                s_out[:, c] += np.bincount(nb[frag].ravel(), weights=loc[..., c].ravel(),
                                           minlength=self.dim)
        return f_out, s_out

    def locate(self, points, faces) -> np.ndarray:
        """Fragment containing each surface point (``points[i]`` on ``faces[i]``)."""
        lv = self.level
        n = lv.resolution
        points = np.asarray(points, dtype=np.float64)
        faces = np.asarray(faces)
        base = np.clip(np.floor(n * points).astype(np.int64), 0, n - 1)
        frag = lv.lookup(base, faces, self.mesh.face_count)
        for off in CORNER_OFFSETS[1:]:
            miss = frag < 0
            if not miss.any():
                break
            v = base[miss] - off
            np.clip(v, 0, n - 1, out=v)
            lo, hi = v / n, (v + 1) / n
            p = points[miss]
            inbox = np.all((p >= lo - 1e-12) & (p <= hi + 1e-12), axis=1)
            cand = lv.lookup(v, faces[miss], self.mesh.face_count)
            frag[np.flatnonzero(miss)[inbox]] = cand[inbox]
        if np.any(frag < 0):
            raise ValueError(f"{int(np.sum(frag < 0))} points not found on the surface")
        return frag

    def evaluation_matrix(self, points, faces) -> sparse.csr_matrix:
        """Sparse ``(len(points), dim)`` matrix of basis values at surface points."""
        points = np.asarray(points, dtype=np.float64)
        frag = self.locate(points, faces)
        n = self.level.resolution
        t = np.clip(n * points - self.level.voxels[frag], 0.0, 1.0)
        val, _ = local_trilinear(t)
        rows = np.repeat(np.arange(len(points)), 8)
        return sparse.csr_matrix((val.ravel(), (rows, self.index.node_basis[frag].ravel())),
                                 shape=(len(points), self.dim))

    def vertex_evaluation_matrix(self, positions=None) -> sparse.csr_matrix:
        """Basis values at every mesh vertex (at ``positions`` in the embedding)."""
        mesh = self.mesh
        pos = mesh.vertices if positions is None else positions
        incident = np.full(mesh.vertex_count, -1, dtype=np.int64)
        live = np.flatnonzero(~mesh.degenerate_faces)
        for j in range(3):
            incident[mesh.faces[live, j]] = live
        if np.any(incident < 0):
            raise ValueError("vertex without a non-degenerate incident face")
        return self.evaluation_matrix(pos, incident)

    def integrate_pair(self, a: int, b: int, kind: str) -> float:
        """Single stiffness or mass entry, summed over shared fragments."""
        nb = self.index.node_basis
        fa = np.any(nb == a, axis=1)
        fb = np.any(nb == b, axis=1)
        shared = np.flatnonzero(fa & fb)
        if not len(shared):
            return 0.0
        local = (self.local_stiffness if kind == STIFFNESS else self.local_mass)[shared]
        ma = (nb[shared] == a).astype(float)
        mb = (nb[shared] == b).astype(float)
        return float(np.einsum("fi,fij,fj->", ma, local, mb))


def discretize(forest: FragmentForest, depth: int, mode: str = AWARE,
               table: ComponentTable | None = None) -> Discretization:
    table = corner_components(forest, depth) if table is None else table
    return Discretization(forest.mesh, forest.level(depth), table,
                          enumerate_basis(table, mode))


@dataclasses.dataclass(eq=False)
class SparseSystem:
    """Stiffness/mass pair of one discretization."""

    L: sparse.csr_matrix
    M: sparse.csr_matrix
    mode: str
    epsilon: float = 0.0

    @property
    def dim(self) -> int:
        return self.L.shape[0]


def assemble(disc: Discretization, epsilon: float = 0.0) -> SparseSystem:
    """Stiffness and mass; ``epsilon > 0`` adds ``epsilon * Id`` to the stiffness."""
    L = disc.stiffness()
    if epsilon > 0:
        L = (L + epsilon * sparse.identity(disc.dim, format="csr")).tocsr()
    return SparseSystem(L, disc.mass(), disc.mode, epsilon)


def build_screened_system(L, M, alpha: float):
    """Operator ``L + alpha M`` and a right-hand-side builder ``f + alpha s``."""
    if L.shape != M.shape:
        raise ValueError("L and M must have the same shape")
    A = (L + alpha * M).tocsr()

    def rhs(f, s):
        return np.asarray(f) + alpha * np.asarray(s)

    return A, rhs
