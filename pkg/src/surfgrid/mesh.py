"""Triangle meshes: I/O, grid normalization, cotangent reference operator."""

from __future__ import annotations

import dataclasses
import io
import logging
import os
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph

logger = logging.getLogger(__name__)

DEFAULT_PAD = 0.05
# faces below this area (relative to squared bbox diagonal) are treated as degenerate
DEGENERATE_REL_AREA = 1e-14
MIN_ANGLE = 1e-6


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid mesh data."""


@dataclasses.dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex attributes.

    Parameters
    ----------
    vertices : (n, 3) float array
    faces : (m, 3) int array
    colors : (n, 3) float array in [0, 1], optional
    material_positions : (n, 3) float array, optional
        Original embedding of each vertex. Defaults to ``vertices``.
    """

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    material_positions: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(f):
            if f.min() < 0 or f.max() >= len(v):
                raise MeshError(
                    f"face index out of range: vertex count is {len(v)}, "
                    f"max index is {f.max()}")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                      | (f[:, 0] == f[:, 2])):
                raise MeshError("face with repeated vertex index")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.colors is not None:
            c = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(v):
                raise MeshError("color count does not match vertex count")
            object.__setattr__(self, "colors", c)
        mp = self.material_positions
        mp = v.copy() if mp is None else np.ascontiguousarray(mp, dtype=np.float64)
        if mp.shape != v.shape:
            raise MeshError("material_positions shape does not match vertices")
        object.__setattr__(self, "material_positions", mp)
        for arr in (self.vertices, self.faces, self.colors, self.material_positions):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def replace(self, **changes) -> "TriangleMesh":
        return dataclasses.replace(self, **changes)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        """Unit normals; zero for degenerate faces."""
        cr = self._face_cross
        n = np.linalg.norm(cr, axis=1)
        out = np.zeros_like(cr)
        ok = n > 0
        out[ok] = cr[ok] / n[ok, None]
        return out

    @cached_property
    def _face_cross(self) -> np.ndarray:
        p = self.vertices[self.faces]
        return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    @cached_property
    def degenerate_faces(self) -> np.ndarray:
        """Boolean mask of faces with (numerically) zero area."""
        if not self.face_count:
            return np.zeros(0, dtype=bool)
        diag = np.linalg.norm(np.ptp(self.vertices, axis=0))
        return self.face_areas <= DEGENERATE_REL_AREA * max(diag, 1e-300) ** 2

    @cached_property
    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and the per-face edge ids.

        Returns
        -------
        edges : (e, 2) int array, sorted vertex pairs
        face_edges : (m, 3) int array; entry j is the edge opposite corner j
        """
        f = self.faces
        pairs = np.stack([f[:, [1, 2]], f[:, [2, 0]], f[:, [0, 1]]], axis=1)
        pairs = np.sort(pairs.reshape(-1, 2), axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 3)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def diagonal(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))


@dataclasses.dataclass(frozen=True)
class NormalizationTransform:
    """Similarity ``p -> scale * p + translation``."""

    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise MeshError("normalization scale must be positive")
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))

    def apply(self, points):
        return self.scale * np.asarray(points) + self.translation

    def inverse(self, points):
        return (np.asarray(points) - self.translation) / self.scale


def normalize(mesh: TriangleMesh, pad: float = DEFAULT_PAD):
    """Fit the mesh into ``[pad, 1 - pad]^3``, centered, preserving aspect."""
    if mesh.vertex_count == 0:
        raise MeshError("cannot normalize an empty mesh")
    if not 0 <= pad < 0.5:
        raise MeshError(f"pad must lie in [0, 0.5), got {pad}")
    lo, hi = mesh.bounding_box()
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise MeshError("all vertices coincide (zero diameter)")
    scale = (1.0 - 2.0 * pad) / extent
    translation = 0.5 - scale * 0.5 * (lo + hi)
    xf = NormalizationTransform(scale, translation)
    out = mesh.replace(vertices=xf.apply(mesh.vertices),
                       material_positions=xf.apply(mesh.material_positions))
    return out, xf


def normalize_spherical(mesh: TriangleMesh, pad: float = DEFAULT_PAD):
    """Like :func:`normalize` but from the vertex centroid and bounding radius.

    The transform commutes with rotations about the centroid, so rotated
    copies of a model differ only by a rotation about the grid center.
    """
    if mesh.vertex_count == 0:
        raise MeshError("cannot normalize an empty mesh")
    if not 0 <= pad < 0.5:
        raise MeshError(f"pad must lie in [0, 0.5), got {pad}")
    center = mesh.vertices.mean(axis=0)
    radius = float(np.max(np.linalg.norm(mesh.vertices - center, axis=1)))
    if radius <= 0:
        raise MeshError("all vertices coincide (zero diameter)")
    scale = (0.5 - pad) / radius
    xf = NormalizationTransform(scale, 0.5 - scale * center)
    out = mesh.replace(vertices=xf.apply(mesh.vertices),
                       material_positions=xf.apply(mesh.material_positions))
    return out, xf


def cotan_operator(mesh: TriangleMesh):
    """Cotangent stiffness and linear-FEM Galerkin mass.

    The stiffness is positive semi-definite: off-diagonal entries are
    ``-(cot a + cot b) / 2`` and rows sum to zero.

    Returns
    -------
    L, M : scipy.sparse.csr_matrix
    """
    n = mesh.vertex_count
    keep = ~mesh.degenerate_faces
    f = mesh.faces[keep]
    p = mesh.vertices[f]
    cots = np.empty((len(f), 3))
    clamped = 0
    for j in range(3):
        a = p[:, (j + 1) % 3] - p[:, j]
        b = p[:, (j + 2) % 3] - p[:, j]
        dot = np.einsum("ij,ij->i", a, b)
        cr = np.linalg.norm(np.cross(a, b), axis=1)
        ang = np.arctan2(cr, dot)
        small = (ang < MIN_ANGLE) | (ang > np.pi - MIN_ANGLE)
        clamped += int(small.sum())
        ang = np.clip(ang, MIN_ANGLE, np.pi - MIN_ANGLE)
        cots[:, j] = 1.0 / np.tan(ang)
    if clamped:
        logger.warning("cotan_operator: clamped %d near-degenerate angles", clamped)
    # corner j is opposite the edge (j+1, j+2)
    rows = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    cols = np.concatenate([f[:, 2], f[:, 0], f[:, 1]])
    w = 0.5 * np.concatenate([cots[:, 0], cots[:, 1], cots[:, 2]])
    W = sparse.coo_matrix((w, (rows, cols)), shape=(n, n)).tocsr()
    W = W + W.T
    L = sparse.diags(np.asarray(W.sum(axis=1)).ravel()) - W

    area = mesh.face_areas[keep]
    ii = np.repeat(f, 3, axis=1).ravel()
    jj = np.tile(f, (1, 3)).ravel()
    local = np.where(np.eye(3, dtype=bool).ravel()[None, :],
                     area[:, None] / 6.0, area[:, None] / 12.0).ravel()
    M = sparse.coo_matrix((local, (ii, jj)), shape=(n, n)).tocsr()
    return L.tocsr(), M


def face_component_labels(mesh: TriangleMesh) -> np.ndarray:
    """Label faces by edge-connected component (faces sharing a full edge)."""
    m = mesh.face_count
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    _, fe = mesh.edges
    face_ids = np.repeat(np.arange(m), 3)
    inc = sparse.coo_matrix((np.ones(3 * m), (face_ids, fe.ravel())),
                            shape=(m, fe.max() + 1)).tocsr()
    adj = inc @ inc.T
    _, labels = csgraph.connected_components(adj, directed=False)
    # relabel so components are ordered by their smallest face
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[labels]


def connected_components(mesh: TriangleMesh) -> list[np.ndarray]:
    """Partition face indices into edge-connected components."""
    labels = face_component_labels(mesh)
    if not len(labels):
        return []
    return [np.flatnonzero(labels == c) for c in range(labels.max() + 1)]


def vertex_component_labels(mesh: TriangleMesh) -> np.ndarray:
    """Per-vertex component label (-1 for vertices in no face)."""
    out = np.full(mesh.vertex_count, -1, dtype=np.int64)
    labels = face_component_labels(mesh)
    out[mesh.faces.ravel()] = np.repeat(labels, 3)
    return out


# ---------------------------------------------------------------------------
# I/O

def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an OBJ or PLY file. Polygons are fan-triangulated."""
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    with open(path, "rb") as fh:
        data = fh.read()
    if fmt == "obj":
        return _parse_obj(data.decode("utf-8", errors="replace"))
    if fmt == "ply":
        return _parse_ply(data)
    raise MeshError(f"unsupported mesh format {fmt!r}")


def save_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    if fmt == "obj":
        text = _format_obj(mesh)
    elif fmt == "ply":
        text = format_ply(mesh)
    else:
        raise MeshError(f"unsupported mesh format {fmt!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _fan(poly, lineno):
    if len(poly) < 3:
        raise MeshError(f"line {lineno}: polygon with fewer than 3 vertices")
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _parse_obj(text: str) -> TriangleMesh:
    verts, colors, faces = [], [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        tag = parts[0]
        try:
            if tag == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) < 3:
                    raise ValueError("vertex needs 3 coordinates")
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.extend(_fan(idx, lineno))
        except ValueError as exc:
            raise MeshError(f"line {lineno}: {exc}") from None
    if colors and len(colors) != len(verts):
        colors = []
    try:
        return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3),
                            np.array(faces, dtype=np.int64).reshape(-1, 3),
                            colors=np.array(colors) if colors else None)
    except MeshError as exc:
        raise MeshError(f"OBJ: {exc}") from None


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply(data: bytes) -> TriangleMesh:
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError("PLY: missing magic or end_header")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body_start = data.index(b"\n", end) + 1
    fmt = None
    elements = []  # (name, count, [(prop, dtype, list_count_dtype)])
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError(f"PLY header line {lineno}: property before element")
            try:
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], _PLY_TYPES[parts[3]],
                                            _PLY_TYPES[parts[2]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
            except KeyError as exc:
                raise MeshError(f"PLY header line {lineno}: unknown type {exc}") from None
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshError(f"PLY: unsupported format {fmt!r}")

    tables = {}
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for r in range(count):
                row = {}
                for pname, dt, ldt in props:
                    try:
                        if ldt is None:
                            row[pname] = float(tokens[pos])
                            pos += 1
                        else:
                            k = int(tokens[pos])
                            row[pname] = [int(float(t)) for t in tokens[pos + 1:pos + 1 + k]]
                            pos += 1 + k
                    except (IndexError, ValueError):
                        raise MeshError(
                            f"PLY: bad {name} record {r} at token {pos}") from None
                rows.append(row)
            tables[name] = rows
    else:
        buf = io.BytesIO(data[body_start:])
        for name, count, props in elements:
            rows = []
            if all(ldt is None for _, _, ldt in props):
                dt = np.dtype([(p, "<" + t) for p, t, _ in props])
                raw = buf.read(dt.itemsize * count)
                if len(raw) < dt.itemsize * count:
                    raise MeshError(f"PLY: truncated {name} block at offset {buf.tell()}")
                arr = np.frombuffer(raw, dtype=dt)
                tables[name] = [{p: float(a[p]) for p, _, _ in props} for a in arr]
                continue
            for r in range(count):
                row = {}
                for pname, dt, ldt in props:
                    if ldt is None:
                        sz = np.dtype(dt).itemsize
                        raw = buf.read(sz)
                        if len(raw) < sz:
                            raise MeshError(f"PLY: truncated at offset {buf.tell()}")
                        row[pname] = float(np.frombuffer(raw, "<" + dt)[0])
                    else:
                        csz = np.dtype(ldt).itemsize
                        raw = buf.read(csz)
                        if len(raw) < csz:
                            raise MeshError(f"PLY: truncated at offset {buf.tell()}")
                        k = int(np.frombuffer(raw, "<" + ldt)[0])
                        isz = np.dtype(dt).itemsize
                        raw = buf.read(isz * k)
                        if len(raw) < isz * k:
                            raise MeshError(f"PLY: truncated at offset {buf.tell()}")
                        row[pname] = np.frombuffer(raw, "<" + dt).astype(int).tolist()
                rows.append(row)
            tables[name] = rows

    vrows = tables.get("vertex", [])
    verts = np.array([[r["x"], r["y"], r["z"]] for r in vrows], dtype=float).reshape(-1, 3)
    colors = None
    if vrows and all(k in vrows[0] for k in ("red", "green", "blue")):
        vprops = {p: dt for p, dt, _ in next(e for e in elements if e[0] == "vertex")[2]}
        c = np.array([[r["red"], r["green"], r["blue"]] for r in vrows], dtype=float)
        colors = c / 255.0 if vprops["red"] in ("u1", "i1") else c
    faces = []
    for r, row in enumerate(tables.get("face", [])):
        idx = row.get("vertex_indices", row.get("vertex_index"))
        if idx is None:
            raise MeshError("PLY: face element lacks vertex_indices")
        faces.extend(_fan(idx, f"face {r}"))
    try:
        return TriangleMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3),
                            colors=colors)
    except MeshError as exc:
        raise MeshError(f"PLY: {exc}") from None


def _format_obj(mesh: TriangleMesh) -> str:
    out = []
    for i, v in enumerate(mesh.vertices):
        line = "v %.17g %.17g %.17g" % tuple(v)
        if mesh.colors is not None:
            line += " %.9g %.9g %.9g" % tuple(mesh.colors[i])
        out.append(line)
    out.extend("f %d %d %d" % tuple(f + 1) for f in mesh.faces)
    return "\n".join(out) + "\n"


def format_ply(mesh: TriangleMesh, comments=()) -> str:
    """ASCII PLY text; colors are written as uchar."""
    head = ["ply", "format ascii 1.0"]
    head += [f"comment {c}" for c in comments]
    head += [f"element vertex {mesh.vertex_count}",
             "property double x", "property double y", "property double z"]
    if mesh.colors is not None:
        head += ["property uchar red", "property uchar green", "property uchar blue"]
    head += [f"element face {mesh.face_count}",
             "property list uchar int vertex_indices", "end_header"]
    lines = head
    if mesh.colors is not None:
        rgb = np.clip(np.rint(mesh.colors * 255), 0, 255).astype(int)
        lines += ["%.17g %.17g %.17g %d %d %d" % (*v, *c)
                  for v, c in zip(mesh.vertices, rgb)]
    else:
        lines += ["%.17g %.17g %.17g" % tuple(v) for v in mesh.vertices]
    lines += ["3 %d %d %d" % tuple(f) for f in mesh.faces]
    return "\n".join(lines) + "\n"
