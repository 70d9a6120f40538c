"""Regular grid hierarchy and per-voxel clipping of mesh triangles.

A fragment is the planar convex polygon ``face ∩ voxel``. Fragments at depth
``d + 1`` are produced by splitting their parent fragment at depth ``d`` along
the three mid-planes of the parent voxel, so every fine fragment is contained
in exactly one coarse fragment by construction.

Polygons are stored padded: ``polys[i, :counts[i]]`` holds the vertices of
fragment ``i`` in order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import itertools
import logging

import numpy as np

from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

MAX_DEPTH = 10
ZERO_AREA = 1e-14

CORNER_OFFSETS = np.array(list(itertools.product((0, 1), repeat=3)))[:, ::-1]
"""The 8 corners of a voxel as (x, y, z) offsets; local index = x + 2y + 4z."""


def voxel_linear(voxels: np.ndarray, n: int) -> np.ndarray:
    v = np.asarray(voxels, dtype=np.int64)
    return (v[..., 2] * n + v[..., 1]) * n + v[..., 0]


def corner_linear(corners: np.ndarray, n: int) -> np.ndarray:
    """Lexicographic (z, y, x) index of corners of a grid with ``n`` voxels per axis."""
    k = np.asarray(corners, dtype=np.int64)
    return (k[..., 2] * (n + 1) + k[..., 1]) * (n + 1) + k[..., 0]


def corner_from_linear(lin: np.ndarray, n: int) -> np.ndarray:
    lin = np.asarray(lin, dtype=np.int64)
    x = lin % (n + 1)
    y = (lin // (n + 1)) % (n + 1)
    z = lin // (n + 1) ** 2
    return np.stack([x, y, z], axis=-1)


def corner_support_voxels(corner, depth: int) -> list[tuple[int, int, int]]:
    """Voxels incident to a grid corner, clamped to the domain."""
    n = 1 << depth
    k = np.asarray(corner, dtype=np.int64)
    if np.any(k < 0) or np.any(k > n):
        raise ValueError(f"corner {tuple(k)} outside [0, {n}]^3")
    out = []
    for off in CORNER_OFFSETS:
        v = k - off
        if np.all(v >= 0) and np.all(v < n):
            out.append(tuple(int(x) for x in v))
    return sorted(out, key=lambda v: (v[2], v[1], v[0]))


# ---------------------------------------------------------------------------
# polygon clipping

def polygon_areas(polys: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Areas of padded planar polygons (fan from the first vertex)."""
    f, k = polys.shape[:2]
    if f == 0 or k < 3:
        return np.zeros(f)
    v0 = polys[:, :1]
    cr = np.cross(polys[:, 1:-1] - v0, polys[:, 2:] - v0)
    live = np.arange(2, k)[None, :] < counts[:, None]
    cr = np.where(live[..., None], cr, 0.0)
    return 0.5 * np.linalg.norm(cr.sum(axis=1), axis=1)


def split_polygons(polys, counts, axis: int, offset):
    """Split padded convex polygons by the plane ``x[axis] = offset``.

    Returns ``(below, below_counts, above, above_counts)``. Points on the plane
    are kept on both sides; the cut vertices are snapped onto the plane. A
    polygon lying entirely in the plane goes to the upper side only, so it is
    never counted twice.
    """
    f, k = polys.shape[:2]
    offset = np.broadcast_to(np.asarray(offset, dtype=np.float64), (f,))
    idx = np.arange(k)
    live = idx[None, :] < counts[:, None]
    nxt = (idx[None, :] + 1) % np.maximum(counts[:, None], 1)
    p2 = np.take_along_axis(polys, nxt[..., None], axis=1)
    d1 = polys[:, :, axis] - offset[:, None]
    d2 = np.take_along_axis(d1, nxt, axis=1)
    crosses = live & (((d1 < 0) & (d2 > 0)) | ((d1 > 0) & (d2 < 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(crosses, d1 / (d1 - d2), 0.0)
    cut = polys + t[..., None] * (p2 - polys)
    cut[..., axis] = np.where(crosses, offset[:, None], cut[..., axis])

    flat = np.all((d1 == 0) | ~live, axis=1)
    out = []
    for keep in (live & (d1 <= 0) & ~flat[:, None], live & (d1 >= 0)):
        cand = np.stack([polys, cut], axis=2).reshape(f, 2 * k, 3)
        mask = np.stack([keep, crosses], axis=2).reshape(f, 2 * k)
        order = np.argsort(~mask, axis=1, kind="stable")
        cnt = mask.sum(axis=1)
        width = max(int(cnt.max()) if f else 0, 3)
        order = order[:, :width]
        out.append(np.take_along_axis(cand, order[..., None], axis=1))
        out.append(cnt)
    return tuple(out)


def clip_polygons_to_boxes(polys, counts, lo, hi):
    """Clip padded polygons against per-polygon axis-aligned boxes."""
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (len(polys), 3))
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (len(polys), 3))
    for axis in range(3):
        _, _, polys, counts = split_polygons(polys, counts, axis, lo[:, axis])
        polys, counts, _, _ = split_polygons(polys, counts, axis, hi[:, axis])
    return polys, counts


def clip_triangle_to_voxel(triangle, box_lo, box_hi):
    """Intersection of a triangle with a closed box.

    Returns the polygon as an ``(n, 3)`` array with the triangle's vertex
    orientation, or ``None`` if the intersection has zero area.
    """
    tri = np.asarray(triangle, dtype=np.float64).reshape(1, 3, 3)
    polys, counts = clip_polygons_to_boxes(tri, np.array([3]), box_lo, box_hi)
    if counts[0] < 3 or polygon_areas(polys, counts)[0] < ZERO_AREA:
        return None
    return polys[0, :counts[0]].copy()


# ---------------------------------------------------------------------------
# forest

@dataclasses.dataclass(eq=False)
class FragmentLevel:
    """All fragments at one grid depth, sorted by (voxel, face)."""

    depth: int
    polys: np.ndarray
    counts: np.ndarray
    voxels: np.ndarray
    faces: np.ndarray
    parents: np.ndarray
    areas: np.ndarray

    @property
    def resolution(self) -> int:
        return 1 << self.depth

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def voxel_keys(self) -> np.ndarray:
        return voxel_linear(self.voxels, self.resolution)

    def box(self, ids=None):
        v = self.voxels if ids is None else self.voxels[ids]
        n = self.resolution
        return v / n, (v + 1) / n

    def polygon(self, i: int) -> np.ndarray:
        return self.polys[i, :self.counts[i]]

    def lookup(self, voxels, faces, n_faces: int) -> np.ndarray:
        """Fragment id for each (voxel, face) pair, -1 when absent."""
        keys = self.voxel_keys * n_faces + self.faces
        q = voxel_linear(voxels, self.resolution) * n_faces + np.asarray(faces)
        if not len(keys):
            return np.full(q.shape, -1, dtype=np.int64)
        pos = np.minimum(np.searchsorted(keys, q), len(keys) - 1)
        return np.where(keys[pos] == q, pos, -1)


@dataclasses.dataclass(eq=False)
class FragmentForest:
    mesh: TriangleMesh
    min_depth: int
    max_depth: int
    levels: dict

    def level(self, depth: int) -> FragmentLevel:
        return self.levels[depth]

    def depths(self):
        return range(self.min_depth, self.max_depth + 1)

    def children_of(self, depth: int, fragment: int) -> np.ndarray:
        """Fragment ids at ``depth + 1`` whose parent is ``fragment``."""
        return np.flatnonzero(self.levels[depth + 1].parents == fragment)

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in self.depths():
            lv = self.levels[d]
            for arr in (lv.counts, lv.voxels, lv.faces, lv.parents):
                h.update(np.ascontiguousarray(arr, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(lv.polys).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        arrays = {"meta": np.array([self.min_depth, self.max_depth])}
        for d in self.depths():
            lv = self.levels[d]
            for name in ("polys", "counts", "voxels", "faces", "parents", "areas"):
                arrays[f"{name}_{d}"] = getattr(lv, name)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, mesh: TriangleMesh) -> "FragmentForest":
        with np.load(path) as z:
            lo, hi = (int(x) for x in z["meta"])
            levels = {d: FragmentLevel(d, *(z[f"{n}_{d}"] for n in
                                           ("polys", "counts", "voxels", "faces",
                                            "parents", "areas")))
                      for d in range(lo, hi + 1)}
        return cls(mesh, lo, hi, levels)


def mesh_hash(mesh: TriangleMesh) -> str:
    h = hashlib.sha256()
    h.update(mesh.vertices.tobytes())
    h.update(mesh.faces.tobytes())
    return h.hexdigest()[:16]


def _refine(polys, counts, voxels, faces, depth):
    """Split every fragment at ``depth`` into its (nonempty) children."""
    n2 = 2 << depth
    pieces = [(polys, counts, voxels * 2, np.arange(len(faces)))]
    for axis in range(3):
        nxt = []
        for p, c, v, src in pieces:
            mid = (v[:, axis] + 1) / n2
            lo_p, lo_c, hi_p, hi_c = split_polygons(p, c, axis, mid)
            v_hi = v.copy()
            v_hi[:, axis] += 1
            nxt.append((lo_p, lo_c, v, src))
            nxt.append((hi_p, hi_c, v_hi, src))
        pieces = nxt
    width = max(p.shape[1] for p, *_ in pieces)
    out_p, out_c, out_v, out_src = [], [], [], []
    for p, c, v, src in pieces:
        keep = (c >= 3) & (polygon_areas(p, c) >= ZERO_AREA)
        pad = np.zeros((int(keep.sum()), width, 3))
        pad[:, :p.shape[1]] = p[keep]
        out_p.append(pad)
        out_c.append(c[keep])
        out_v.append(v[keep])
        out_src.append(src[keep])
    return (np.concatenate(out_p), np.concatenate(out_c),
            np.concatenate(out_v), np.concatenate(out_src))


def _sorted_level(depth, polys, counts, voxels, faces, parents):
    n = 1 << depth
    order = np.lexsort((faces, voxel_linear(voxels, n)))
    polys = polys[order]
    counts = counts[order]
    width = max(int(counts.max()) if len(counts) else 3, 3)
    polys = np.ascontiguousarray(polys[:, :width])
    # zero the padding so the serialized form is canonical
    live = np.arange(width)[None, :] < counts[:, None]
    polys[~live] = 0.0
    return FragmentLevel(depth, polys, counts, voxels[order], faces[order],
                         parents[order], polygon_areas(polys, counts))


def build_fragment_forest(mesh: TriangleMesh, max_depth: int,
                          min_depth: int = 0) -> FragmentForest:
    """Clip the mesh into per-voxel fragments at every depth in range."""
    if not 0 <= min_depth <= max_depth <= MAX_DEPTH:
        raise ValueError(f"need 0 <= min_depth <= max_depth <= {MAX_DEPTH}")
    face_ids = np.flatnonzero(~mesh.degenerate_faces) if mesh.face_count else \
        np.zeros(0, dtype=np.int64)
    if mesh.face_count and len(face_ids) < mesh.face_count:
        logger.info("excluding %d degenerate faces", mesh.face_count - len(face_ids))
    polys = mesh.vertices[mesh.faces[face_ids]] if len(face_ids) else np.zeros((0, 3, 3))
    counts = np.full(len(face_ids), 3)
    polys, counts = clip_polygons_to_boxes(polys, counts, 0.0, 1.0)
    keep = (counts >= 3) & (polygon_areas(polys, counts) >= ZERO_AREA)
    polys, counts, faces = polys[keep], counts[keep], face_ids[keep]
    voxels = np.zeros((len(faces), 3), dtype=np.int64)
    parents = np.full(len(faces), -1, dtype=np.int64)

    levels = {}
    for depth in range(0, max_depth + 1):
        lv = _sorted_level(depth, polys, counts, voxels, faces, parents)
        if depth >= min_depth:
            if depth == min_depth:
                lv.parents[:] = -1
            levels[depth] = lv
        if depth == max_depth:
            break
        polys, counts, voxels, src = _refine(lv.polys, lv.counts, lv.voxels, lv.faces, depth)
        faces = lv.faces[src]
        parents = src
    return FragmentForest(mesh, min_depth, max_depth, levels)
