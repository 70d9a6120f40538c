"""Connected components of the surface inside voxels and B-spline supports.

Connectivity is mesh connectivity: two fragments are joined when their source
faces share a vertex or edge that meets the region under consideration, or
when they come from the same face (a face clipped to a box is convex). Two
pieces that merely touch in space without sharing a mesh simplex stay apart.

Every (fragment, local corner) pair of a level is a *node*: fragment ``f`` in
voxel ``v`` lies in the support of the 8 corners ``v + CORNER_OFFSETS``. A
corner component is a connected set of nodes sharing one corner.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

from .embedding import (CORNER_OFFSETS, FragmentForest, FragmentLevel,
                        corner_from_linear, corner_linear)
from .mesh import TriangleMesh

BOX_TOL = 1e-12
AWARE = "aware"
UNAWARE = "unaware"


def _segments_hit_boxes(p0, p1, lo, hi, tol=BOX_TOL):
    """Whether each segment ``p0 -> p1`` meets the closed box ``[lo, hi]``."""
    tmin = np.zeros(len(p0))
    tmax = np.ones(len(p0))
    ok = np.ones(len(p0), dtype=bool)
    d = p1 - p0
    for a in range(3):
        flat = np.abs(d[:, a]) < 1e-300
        ok &= ~flat | ((p0[:, a] >= lo[:, a] - tol) & (p0[:, a] <= hi[:, a] + tol))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[:, a] - tol - p0[:, a]) / d[:, a]
            t2 = (hi[:, a] + tol - p0[:, a]) / d[:, a]
        tmin = np.where(flat, tmin, np.maximum(tmin, np.minimum(t1, t2)))
        tmax = np.where(flat, tmax, np.minimum(tmax, np.maximum(t1, t2)))
    return ok & (tmin <= tmax)


def simplex_records(mesh: TriangleMesh, level: FragmentLevel):
    """(fragment, simplex) pairs for vertices/edges of a fragment's face that
    meet the fragment's closed voxel box.

    Simplex ids: vertices ``[0, nV)``, edges ``[nV, nV + nE)``.
    """
    nv = mesh.vertex_count
    edges, face_edges = mesh.edges
    lo, hi = level.box()
    frag = np.arange(len(level))
    tri = mesh.faces[level.faces]
    recs_f, recs_s = [], []
    for j in range(3):
        p = mesh.vertices[tri[:, j]]
        inside = np.all((p >= lo - BOX_TOL) & (p <= hi + BOX_TOL), axis=1)
        recs_f.append(frag[inside])
        recs_s.append(tri[inside, j])
        e = face_edges[level.faces, j]
        hit = _segments_hit_boxes(mesh.vertices[edges[e, 0]], mesh.vertices[edges[e, 1]],
                                  lo, hi)
        recs_f.append(frag[hit])
        recs_s.append(nv + e[hit])
    return np.concatenate(recs_f), np.concatenate(recs_s)


def _group_edges(group_keys, members):
    """Graph edges chaining together members that share a key tuple."""
    if not len(members):
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    order = np.lexsort(group_keys[::-1])
    keys = [k[order] for k in group_keys]
    m = members[order]
    same = np.ones(len(m) - 1, dtype=bool)
    for k in keys:
        same &= k[1:] == k[:-1]
    return m[:-1][same], m[1:][same]


def _labels(n, a, b):
    g = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(n, n))
    return csgraph.connected_components(g, directed=False)[1]


@dataclasses.dataclass(eq=False)
class VoxelComponents:
    """Partition of one level's fragments into per-voxel components.

    ``label[f]`` is a global component id; ``ordinal[f]`` numbers the
    components within a voxel by their smallest fragment id.
    """

    label: np.ndarray
    ordinal: np.ndarray

    def count_per_voxel(self, level: FragmentLevel) -> dict:
        keys = level.voxel_keys
        out = {}
        for k, o in zip(keys, self.ordinal):
            out[int(k)] = max(out.get(int(k), 0), int(o) + 1)
        return out


def voxel_components(forest: FragmentForest, depth: int) -> VoxelComponents:
    lv = forest.level(depth)
    f, s = simplex_records(forest.mesh, lv)
    a, b = _group_edges([lv.voxel_keys[f], s], f)
    lab = _labels(len(lv), a, b)
    label, ordinal = _canonical(lab, lv.voxel_keys, np.arange(len(lv)))
    return VoxelComponents(label, ordinal)


def _canonical(raw, group, member_id):
    """Renumber raw labels by (group, smallest member id); ordinal within group."""
    if not len(raw):
        return raw.copy(), raw.copy()
    nlab = raw.max() + 1
    first = np.full(nlab, np.iinfo(np.int64).max)
    np.minimum.at(first, raw, member_id)
    grp = np.zeros(nlab, dtype=np.int64)
    grp[raw] = group
    order = np.lexsort((first, grp))
    rank = np.empty(nlab, dtype=np.int64)
    rank[order] = np.arange(nlab)
    g_sorted = grp[order]
    start = np.r_[0, np.flatnonzero(g_sorted[1:] != g_sorted[:-1]) + 1]
    run = np.zeros(nlab, dtype=np.int64)
    run[start] = 1
    grp_start = np.maximum.accumulate(np.where(run == 1, np.arange(nlab), 0))
    ordinal_sorted = np.arange(nlab) - grp_start
    ordinal = np.empty(nlab, dtype=np.int64)
    ordinal[order] = ordinal_sorted
    return rank[raw], ordinal[raw]


@dataclasses.dataclass(eq=False)
class ComponentTable:
    """Corner components ``C_k^i`` of one level.

    Node arrays have shape ``(F, 8)``: entry ``[f, c]`` refers to fragment ``f``
    seen from the corner ``voxel(f) + CORNER_OFFSETS[c]``.
    """

    depth: int
    node_corner: np.ndarray    # linear corner index
    node_component: np.ndarray  # global corner-component id, ordered (corner, ordinal)
    node_ordinal: np.ndarray    # i - 1 within the corner
    n_components: int

    @property
    def resolution(self) -> int:
        return 1 << self.depth

    @cached_property
    def component_corner(self) -> np.ndarray:
        out = np.zeros(self.n_components, dtype=np.int64)
        out[self.node_component.ravel()] = self.node_corner.ravel()
        return out

    @cached_property
    def component_ordinal(self) -> np.ndarray:
        out = np.zeros(self.n_components, dtype=np.int64)
        out[self.node_component.ravel()] = self.node_ordinal.ravel()
        return out

    def counts_per_corner(self) -> tuple[np.ndarray, np.ndarray]:
        """Active corners (linear index) and their component counts ``I_k``."""
        corners, counts = np.unique(self.component_corner, return_counts=True)
        return corners, counts

    def histogram(self) -> dict:
        _, counts = self.counts_per_corner()
        vals, freq = np.unique(counts, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, freq)}

    def members(self, component: int) -> np.ndarray:
        """Fragment ids making up a corner component."""
        f, _ = np.nonzero(self.node_component == component)
        return np.unique(f)

    def component_of(self, corner, fragment) -> np.ndarray:
        """Component id of ``fragment`` within the support of ``corner`` (-1 if
        the fragment's voxel is not incident to the corner)."""
        corner = np.asarray(corner)
        fragment = np.asarray(fragment)
        nc = self.node_corner[fragment]
        hit = nc == np.asarray(corner)[..., None]
        col = np.argmax(hit, axis=-1)
        comp = np.take_along_axis(self.node_component[fragment], col[..., None], -1)[..., 0]
        return np.where(hit.any(axis=-1), comp, -1)


def corner_components(forest: FragmentForest, depth: int) -> ComponentTable:
    mesh = forest.mesh
    lv = forest.level(depth)
    n = lv.resolution
    nf = len(lv)
    node_corner = corner_linear(lv.voxels[:, None, :] + CORNER_OFFSETS[None], n)
    f, s = simplex_records(mesh, lv)
    # a face clipped to a corner support is convex, hence connected
    f = np.concatenate([f, np.arange(nf)])
    s = np.concatenate([s, mesh.vertex_count + len(mesh.edges[0]) + lv.faces])
    rec_node = (f[:, None] * 8 + np.arange(8)[None]).ravel()
    rec_corner = node_corner[f].ravel()
    rec_simplex = np.repeat(s, 8)
    a, b = _group_edges([rec_corner, rec_simplex], rec_node)
    raw = _labels(nf * 8, a, b)
    frag_of_node = np.repeat(np.arange(nf), 8)
    comp, ordinal = _canonical(raw, node_corner.ravel(), frag_of_node)
    ncomp = int(comp.max()) + 1 if len(comp) else 0
    return ComponentTable(depth, node_corner, comp.reshape(nf, 8),
                          ordinal.reshape(nf, 8), ncomp)


@dataclasses.dataclass(eq=False)
class BasisIndex:
    """Dense numbering of the active basis functions of one level.

    ``node_basis[f, c]`` is the basis id whose support contains fragment ``f``
    through its local corner ``c``. ``basis_corner`` / ``basis_ordinal`` give
    the corner (linear index) and component ordinal of each basis id.
    """

    mode: str
    depth: int
    node_basis: np.ndarray
    basis_corner: np.ndarray
    basis_ordinal: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.basis_corner)

    @property
    def resolution(self) -> int:
        return 1 << self.depth

    def corners(self) -> np.ndarray:
        return corner_from_linear(self.basis_corner, self.resolution)

    def members(self, basis_id: int) -> np.ndarray:
        f, _ = np.nonzero(self.node_basis == basis_id)
        return np.unique(f)

    @cached_property
    def representative(self) -> np.ndarray:
        """Smallest fragment id in each basis function's support."""
        rep = np.full(self.dim, np.iinfo(np.int64).max)
        frag = np.repeat(np.arange(len(self.node_basis)), 8)
        np.minimum.at(rep, self.node_basis.ravel(), frag)
        return rep


def enumerate_basis(table: ComponentTable, mode: str) -> BasisIndex:
    if mode == AWARE:
        # components are already numbered by (corner, ordinal)
        return BasisIndex(mode, table.depth, table.node_component.copy(),
                          table.component_corner, table.component_ordinal)
    if mode == UNAWARE:
        corners, inv = np.unique(table.node_corner, return_inverse=True)
        return BasisIndex(mode, table.depth, inv.reshape(table.node_corner.shape),
                          corners, np.zeros(len(corners), dtype=np.int64))
    raise ValueError(f"unknown mode {mode!r}")


def chi(coarse: ComponentTable, fine: ComponentTable, coarse_level: FragmentLevel,
        fine_level: FragmentLevel, c: int, c_fine: int) -> int:
    """1 iff some fragment of fine component ``c_fine`` has its parent in the
    coarse component ``c``."""
    corner = coarse.component_corner[c]
    frags = fine.members(c_fine)
    parents = fine_level.parents[frags]
    comps = coarse.component_of(np.full(len(parents), corner), parents)
    return int(np.any(comps == c))

