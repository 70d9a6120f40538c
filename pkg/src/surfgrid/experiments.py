"""Reusable experiment drivers: synthetic textures, color fitting, min-depth sweeps."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import sparse

from .assembly import build_screened_system, discretize
from .components import AWARE
from .embedding import build_fragment_forest
from .mesh import DEFAULT_PAD, TriangleMesh, normalize
from .solver import MultigridHierarchy, build_prolongation, cg_reference, cycle

CHECKERBOARD = "checkerboard3d"
RAMP = "ramp"
CONSTANT = "constant"


def checkerboard3d(points, period: float, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """RGB colors of a 3D checkerboard with cubic cells of side ``period``."""
    cell = np.floor((np.asarray(points) - np.asarray(origin)) / period).astype(np.int64)
    parity = (cell.sum(axis=1) % 2).astype(np.float64)
    return np.stack([parity, 1.0 - parity, np.full_like(parity, 0.5)], axis=1)


def coordinate_ramp(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    lo, hi = p.min(axis=0), p.max(axis=0)
    return (p - lo) / np.where(hi > lo, hi - lo, 1.0)


def synthetic_texture(spec: str, points) -> np.ndarray:
    """Parse ``checkerboard3d:<period>``, ``ramp`` or ``constant:<value>``."""
    name, _, arg = spec.partition(":")
    if name == CHECKERBOARD:
        if not arg:
            raise ValueError("checkerboard3d needs a period, e.g. checkerboard3d:2")
        period = float(arg)
        if not period > 0:
            raise ValueError("checkerboard period must be positive")
        return checkerboard3d(points, period)
    if name == RAMP:
        return coordinate_ramp(points)
    if name == CONSTANT:
        value = float(arg) if arg else 0.5
        return np.full((len(points), 3), value)
    raise ValueError(f"unknown texture {spec!r}")


@dataclasses.dataclass(eq=False)
class ColorProblem:
    """Screened-Poisson color fit ``(L + alpha M) u = f + alpha s`` on every level."""

    mesh: TriangleMesh      # normalized
    discs: list             # depth 0 .. depth
    operators: list
    prolongations: list
    rhs: np.ndarray         # finest level, (dim, channels)

    @property
    def depth(self) -> int:
        return self.discs[-1].depth

    def hierarchy(self, min_depth: int, smooth: int = 10, shape: str = "W") -> MultigridHierarchy:
        lo = min_depth - self.discs[0].depth
        if not 0 <= lo < len(self.discs):
            raise ValueError(f"min_depth {min_depth} outside [{self.discs[0].depth}, {self.depth}]")
        return MultigridHierarchy(self.operators[lo:], self.prolongations[lo:],
                                  [d.depth for d in self.discs[lo:]], smooth, shape)


def color_problem(mesh: TriangleMesh, colors, depth: int, mode: str = AWARE,
                  alpha: float = 0.01, epsilon: float = 0.0, min_depth: int = 0,
                  galerkin: bool = False, pad: float = DEFAULT_PAD) -> ColorProblem:
    norm, _ = normalize(mesh, pad)
    forest = build_fragment_forest(norm, depth, min_depth=min_depth)
    discs = [discretize(forest, d, mode) for d in range(min_depth, depth + 1)]
    prolong = [build_prolongation(c, f) for c, f in zip(discs[:-1], discs[1:])]
    eye = sparse.identity
    if galerkin:
        fine = discs[-1]
        A, _ = build_screened_system(fine.stiffness(), fine.mass(), alpha)
        ops = [(A + epsilon * eye(fine.dim, format="csr")).tocsr()]
        for P in reversed(prolong):
            ops.insert(0, (P.T @ ops[0] @ P).tocsr())
    else:
        ops = []
        for d in discs:
            A, _ = build_screened_system(d.stiffness(), d.mass(), alpha)
            ops.append((A + epsilon * eye(d.dim, format="csr")).tocsr())
    _, rhs = build_screened_system(discs[-1].stiffness(), discs[-1].mass(), alpha)
    f, s = discs[-1].load_vectors(colors)
    return ColorProblem(norm, discs, ops, prolong, rhs(f, s))


def random_guess(dim: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """Initial coefficients drawn uniformly from [0, 1]."""
    return rng.random((dim, channels))


def min_depth_sweep(problem: ColorProblem, u0: np.ndarray, smooth: int = 10,
                    shape: str = "W") -> list[dict]:
    """Residual after one cycle for every minimum depth.

    ``normalized`` divides by the norm of the initial guess, ``relative`` by
    the initial residual.
    """
    A = problem.operators[-1]
    b = problem.rhs
    r0 = float(np.linalg.norm(b - A @ u0))
    g0 = float(np.linalg.norm(u0))
    rows = []
    for md in range(problem.discs[0].depth, problem.depth + 1):
        u, _ = cycle(problem.hierarchy(md, smooth, shape), u0, b)
        r = float(np.linalg.norm(b - A @ u))
        rows.append({"min_depth": md, "residual": r, "normalized": r / g0,
                     "relative": r / r0})
    return rows


def solve_colors(problem: ColorProblem, u0: np.ndarray, cycles: int, min_depth: int,
                 smooth: int = 10, shape: str = "W", solver: str = "mg"):
    """Run ``cycles`` multigrid cycles (or CG); return coefficients and residual rows."""
    A = problem.operators[-1]
    b = problem.rhs
    history = []
    if solver == "cg":
        u = np.empty_like(u0)
        for c in range(b.shape[1]):
            res = cg_reference(A, b[:, c], tol=1e-10, x0=u0[:, c])
            u[:, c] = res.x
        history.append({"cycle": 1, "level": problem.depth,
                        "residual": float(np.linalg.norm(b - A @ u))})
        return u, history
    h = problem.hierarchy(min_depth, smooth, shape)
    u = u0
    for k in range(1, cycles + 1):
        u, levels = cycle(h, u, b)
        history += [{"cycle": k, "level": d, "residual": r} for d, r in levels]
    return u, history
