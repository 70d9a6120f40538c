"""Procedural test meshes used by the experiments and the test-suite."""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .mesh import TriangleMesh


def merge(*meshes: TriangleMesh) -> TriangleMesh:
    verts, faces, colors = [], [], []
    offset = 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += m.vertex_count
        colors.append(m.colors)
    col = None
    if all(c is not None for c in colors):
        col = np.concatenate(colors)
    return TriangleMesh(np.concatenate(verts), np.concatenate(faces), colors=col)


def transformed(mesh: TriangleMesh, rotation=None, translation=(0, 0, 0),
                scale=1.0) -> TriangleMesh:
    R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
    v = scale * mesh.vertices @ R.T + np.asarray(translation, dtype=float)
    return TriangleMesh(v, mesh.faces, colors=mesh.colors)


def grid_patch(nu: int, nv: int, size=(1.0, 1.0)) -> TriangleMesh:
    """Planar ``size[0] x size[1]`` rectangle in z=0, split into 2*nu*nv triangles."""
    u = np.linspace(0.0, size[0], nu + 1)
    v = np.linspace(0.0, size[1], nv + 1)
    U, V = np.meshgrid(u, v, indexing="ij")
    verts = np.stack([U.ravel(), V.ravel(), np.zeros(U.size)], axis=1)
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nu + 1, nv + 1)
    a = idx[:-1, :-1].ravel()
    b = idx[1:, :-1].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[:-1, 1:].ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(verts, faces)


def square(size: float = 1.0, z: float = 0.0) -> TriangleMesh:
    """Axis-aligned square made of two triangles."""
    m = grid_patch(1, 1, (size, size))
    return transformed(m, translation=(0, 0, z))


def cube(size: float = 1.0, origin=(0.0, 0.0, 0.0), subdivisions: int = 1) -> TriangleMesh:
    """Closed, outward-oriented axis-aligned cube surface."""
    n = subdivisions
    patch = grid_patch(n, n, (size, size))
    # (rotation, translation) placing the z=0 patch on each face, normals outward
    faces = [
        (Rotation.from_euler("x", 180, degrees=True).as_matrix(), (0, size, 0)),
        (np.eye(3), (0, 0, size)),
        (Rotation.from_euler("y", 90, degrees=True).as_matrix(), (size, 0, size)),
        (Rotation.from_euler("y", -90, degrees=True).as_matrix(), (0, 0, 0)),
        (Rotation.from_euler("x", -90, degrees=True).as_matrix(), (0, size, size)),
        (Rotation.from_euler("x", 90, degrees=True).as_matrix(), (0, 0, 0)),
    ]
    parts = [transformed(patch, R, np.add(t, origin)) for R, t in faces]
    return _weld(merge(*parts), tol=1e-9 * size)


def _weld(mesh: TriangleMesh, tol: float) -> TriangleMesh:
    key = np.round(mesh.vertices / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    verts = mesh.vertices[first[order]]
    faces = remap[inv.ravel()][mesh.faces]
    colors = None if mesh.colors is None else mesh.colors[first[order]]
    return TriangleMesh(verts, faces, colors=colors)


def cube_lattice(n: int = 3, gap: float = 0.4, size: float = 1.0,
                 subdivisions: int = 1) -> TriangleMesh:
    """``n x n x n`` disjoint cubes of side ``size`` separated by ``gap``."""
    pitch = size + gap
    return merge(*[cube(size, (i * pitch, j * pitch, k * pitch), subdivisions)
                   for k in range(n) for j in range(n) for i in range(n)])


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    v = np.array(verts, dtype=float)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(faces, dtype=np.int64)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq[:, 0]] + v[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = len(f)
        e = inv.ravel() + len(v)
        a, b, c = e[:m], e[m:2 * m], e[2 * m:]
        v = np.concatenate([v, mid])
        f = np.concatenate([np.stack([f[:, 0], a, c], 1), np.stack([f[:, 1], b, a], 1),
                            np.stack([f[:, 2], c, b], 1), np.stack([a, b, c], 1)])
    return TriangleMesh(radius * v, f)


def blob(subdivisions: int = 4, amplitude: float = 0.35, seed: int = 0) -> TriangleMesh:
    """Genus-0 star-shaped surface: an icosphere with smooth radial bumps."""
    rng = np.random.default_rng(seed)
    s = icosphere(subdivisions)
    p = s.vertices
    r = np.ones(len(p))
    for _ in range(4):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r += amplitude * np.exp(-8.0 * (1.0 - p @ d))
    return TriangleMesh(p * r[:, None], s.faces)


def torus(R: float = 1.0, r: float = 0.35, nu: int = 48, nv: int = 16) -> TriangleMesh:
    u = np.linspace(0, 2 * np.pi, nu, endpoint=False)
    v = np.linspace(0, 2 * np.pi, nv, endpoint=False)
    U, V = np.meshgrid(u, v, indexing="ij")
    verts = np.stack([(R + r * np.cos(V)) * np.cos(U),
                      (R + r * np.cos(V)) * np.sin(U),
                      r * np.sin(V)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    a = (i * nv + j).ravel()
    b = (((i + 1) % nu) * nv + j).ravel()
    c = (((i + 1) % nu) * nv + (j + 1) % nv).ravel()
    d = (i * nv + (j + 1) % nv).ravel()
    faces = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh(verts, faces)


# tilt keeping the sheets out of axis-aligned (singular) position
SHEET_TILT = Rotation.from_euler("xyz", [17.0, -11.0, 7.0], degrees=True).as_matrix()


def two_sheets(gap: float = 0.03, size=(1.0, 0.8), resolution: int = 4,
               rotation=None) -> TriangleMesh:
    """Two parallel, disjoint rectangles a distance ``gap`` apart.

    The first sheet is slightly larger so the two spectra do not coincide.
    """
    a = grid_patch(resolution, resolution, size)
    b = grid_patch(resolution, resolution, (0.9 * size[0], 0.9 * size[1]))
    b = transformed(b, translation=(0.05 * size[0], 0.05 * size[1], gap))
    m = merge(a, b)
    m = transformed(m, translation=-0.5 * (m.vertices.min(0) + m.vertices.max(0)))
    return transformed(m, SHEET_TILT if rotation is None else rotation)


def half_shell(subdivisions: int = 3, flatten: float = 0.2) -> TriangleMesh:
    """Closed hemisphere-like shell: unit sphere whose x<0 half is squashed."""
    s = icosphere(subdivisions)
    v = s.vertices.copy()
    neg = v[:, 0] < 0
    v[neg, 0] *= flatten
    return TriangleMesh(v, s.faces)


def two_hemispheres(gap: float = 0.04, subdivisions: int = 3,
                    flatten: float = 0.2) -> TriangleMesh:
    """Two mirrored half-shells whose flat sides face each other across ``gap``."""
    h = half_shell(subdivisions, flatten)
    shift = gap / 2 + flatten
    right = transformed(h, translation=(shift, 0, 0))
    mirror = np.diag([-1.0, 1.0, 1.0])
    left = transformed(h, mirror, translation=(-shift, 0, 0))
    # mirroring flips orientation
    left = TriangleMesh(left.vertices, left.faces[:, ::-1])
    return merge(right, left)
