"""Conformalized mean-curvature flow in a grid B-spline space.

The stiffness of the initial surface is frozen. Each step reassembles the
mass on the evolved surface by keeping every fragment's material quadrature
and scaling its measure by the evolved/original area ratio of its triangle,
then solves ``(M_t + delta/2 L_0) u' = M_t u`` per coordinate.

By default the surface is rescaled about its area-weighted centroid after
every step so that its area stays fixed; without this a sphere collapses in
finite time. Grid quantities live in normalized coordinates. ``delta`` and all reported
positions are in the units of the input mesh.
"""

from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .analysis import rms_error, sphericity
from .assembly import Discretization, discretize
from .components import AWARE
from .embedding import build_fragment_forest
from .mesh import DEFAULT_PAD, TriangleMesh, cotan_operator, normalize
from .solver import NumericalError, build_prolongation, cg_reference, MultigridHierarchy, \
    solve_multigrid

logger = logging.getLogger(__name__)

MG = "mg"
CG = "cg"
MIN_AREA_RATIO = 1e-12
GROUND_TRUTH_STEP = 0.05
PROJECTION_TOL = 1e-12


@dataclasses.dataclass
class FlowConfig:
    depth: int = 6
    min_depth: int | None = None
    mode: str = AWARE
    solver: str = MG
    delta: float | None = 1.0
    budget_seconds: float | None = None
    total_time: float = 10.0
    epsilon: float = 0.0
    smooth: int = 10
    cycle: str = "W"
    tol: float = 1e-8
    max_cycles: int = 100
    preserve_area: bool = True
    pad: float = DEFAULT_PAD

    def __post_init__(self):
        if self.solver not in (MG, CG):
            raise ValueError(f"solver must be {MG!r} or {CG!r}")
        if (self.delta is None) == (self.budget_seconds is None):
            raise ValueError("give exactly one of delta and budget_seconds")
        if self.delta is not None and self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.total_time < 0:
            raise ValueError("total_time must be non-negative")


@dataclasses.dataclass
class FlowState:
    """Coefficients (normalized frame) and evolved vertex positions (input frame)."""

    step: int
    time: float
    coefficients: np.ndarray
    positions: np.ndarray
    delta: float


@dataclasses.dataclass(eq=False)
class FlowContext:
    """Everything that stays fixed during a flow."""

    mesh: TriangleMesh          # normalized
    transform: object
    discs: list                 # coarse to fine
    stiffness: list             # L_0 per level
    prolongations: list
    evaluation: sparse.csr_matrix
    config: FlowConfig

    @property
    def finest(self) -> Discretization:
        return self.discs[-1]

    def to_input(self, points):
        return self.transform.inverse(points)

    def evolved_area_ratio(self, positions) -> np.ndarray:
        """Per-face evolved/original area; collapsed faces get 0."""
        ev = self.mesh.replace(vertices=self.transform.apply(positions))
        ratio = ev.face_areas / np.maximum(self.mesh.face_areas, 1e-300)
        bad = ratio < MIN_AREA_RATIO
        if np.any(bad & (self.mesh.face_areas > 0)):
            logger.warning("flow: %d evolved triangles degenerated", int(bad.sum()))
        return np.where(bad, 0.0, ratio)


def prepare(mesh: TriangleMesh, config: FlowConfig) -> FlowContext:
    norm, xf = normalize(mesh, config.pad)
    lo = config.depth if config.solver == CG else (
        max(0, config.depth - 4) if config.min_depth is None else config.min_depth)
    forest = build_fragment_forest(norm, config.depth, min_depth=lo)
    discs = [discretize(forest, d, config.mode) for d in range(lo, config.depth + 1)]
    eye = sparse.identity
    stiff = [(d.stiffness() + config.epsilon * eye(d.dim, format="csr")).tocsr() for d in discs]
    P = [build_prolongation(c, f) for c, f in zip(discs[:-1], discs[1:])]
    E = discs[-1].vertex_evaluation_matrix(norm.material_positions)
    return FlowContext(norm, xf, discs, stiff, P, E, config)


def init_flow(ctx: FlowContext, delta: float) -> FlowState:
    """L2 projection of the coordinate functions onto the finest space."""
    disc = ctx.finest
    M = disc.mass()
    _, s = disc.load_vectors(ctx.mesh.vertices)
    u = np.zeros_like(s)
    d = M.diagonal()
    # basis functions that vanish on the surface have a zero diagonal
    d = np.where(d > 0, d, 1.0)
    jacobi = splinalg.LinearOperator(M.shape, matvec=lambda v: v / d, dtype=np.float64)
    for c in range(3):
        u[:, c], info = splinalg.cg(M, s[:, c], rtol=PROJECTION_TOL, maxiter=20 * disc.dim,
                                    M=jacobi)
        if info != 0:
            raise NumericalError(f"projection did not converge (coordinate {c})")
    return FlowState(0, 0.0, u, ctx.to_input(ctx.evaluation @ u), delta)


def step(ctx: FlowContext, state: FlowState, delta: float | None = None) -> FlowState:
    """One semi-implicit step with the tracked mass matrix."""
    delta = state.delta if delta is None else delta
    cfg = ctx.config
    ratio = ctx.evolved_area_ratio(state.positions)
    masses = [d.mass(ratio) for d in ctx.discs]
    h = ctx.transform.scale ** 2 * delta / 2.0
    ops = [(M + h * L).tocsr() for M, L in zip(masses, ctx.stiffness)]
    rhs = masses[-1] @ state.coefficients
    u0 = state.coefficients
    if cfg.solver == CG:
        u = np.empty_like(u0)
        for c in range(3):
            res = cg_reference(ops[-1], rhs[:, c], tol=cfg.tol, x0=u0[:, c],
                               max_iter=20 * len(rhs))
            if not res.converged:
                logger.warning("flow: CG stopped at residual %.2e", res.residual)
            u[:, c] = res.x
    else:
        hier = MultigridHierarchy(ops, ctx.prolongations, [d.depth for d in ctx.discs],
                                  cfg.smooth, cfg.cycle)
        u, info = solve_multigrid(hier, rhs, u0, tol=cfg.tol, max_cycles=cfg.max_cycles)
        if not info["converged"]:
            logger.warning("flow: multigrid stopped at residual %.2e", info["residual"])
    if not np.all(np.isfinite(u)):
        raise NumericalError(f"non-finite coefficients at step {state.step + 1}")
    pos = ctx.evaluation @ u
    if cfg.preserve_area:
        # basis functions sum to one on the surface, so an affine map of the
        # coefficients is the same affine map of the embedding
        center, factor = area_rescaling(ctx.mesh, pos)
        u = factor * u + (1.0 - factor) * center
        pos = factor * pos + (1.0 - factor) * center
    return FlowState(state.step + 1, state.time + delta, u, ctx.to_input(pos), delta)


def area_rescaling(reference: TriangleMesh, positions):
    """Area-weighted centroid and the scale restoring the reference area."""
    ev = reference.replace(vertices=positions)
    a = ev.face_areas
    total = a.sum()
    if not total > 0:
        raise NumericalError("evolved surface has zero area")
    center = (a[:, None] * positions[ev.faces].mean(axis=1)).sum(0) / total
    return center, float(np.sqrt(reference.face_areas.sum() / total))


def cotan_flow(mesh: TriangleMesh, delta: float, steps: int,
               max_substep: float = GROUND_TRUTH_STEP, tol: float = 1e-10,
               preserve_area: bool = True) -> list:
    """Ground-truth cMCF with the cotangent Laplacian.

    Each step of length ``delta`` is split into equal substeps no longer than
    ``max_substep``. Returns vertex positions after every step (first entry
    is the input).
    """
    L, M0 = cotan_operator(mesh)
    sub = max(1, int(np.ceil(delta / max_substep - 1e-12))) if delta > 0 else 1
    h = delta / sub
    x = mesh.vertices.copy()
    out = [x.copy()]
    for _ in range(steps):
        for _ in range(sub):
            M = cotan_operator(mesh.replace(vertices=x))[1] if h > 0 else M0
            A = (M + 0.5 * h * L).tocsr()
            b = M @ x
            for c in range(3):
                x[:, c] = cg_reference(A, b[:, c], tol=tol, x0=x[:, c]).x
            if preserve_area:
                center, factor = area_rescaling(mesh, x)
                x = factor * x + (1.0 - factor) * center
        out.append(x.copy())
    return out


@dataclasses.dataclass
class FlowRun:
    states: list
    metrics: list               # dicts per step
    timings: list               # solve seconds per step
    delta: float


METRIC_COLUMNS = ("step", "time", "rms", "rms_per_vertex", "sphericity")


def run_flow(mesh: TriangleMesh, config: FlowConfig, ground_truth=None,
             keep_states: bool = True) -> FlowRun:
    """Flow until ``total_time``.

    With ``budget_seconds`` the step count is the number of steps that fit
    in the budget at the measured cost of one step, and
    ``delta = total_time / steps``. ``ground_truth`` is a callable
    ``(delta, steps) -> list of positions`` or a precomputed list.
    """
    ctx = prepare(mesh, config)
    if config.budget_seconds is not None:
        probe = init_flow(ctx, config.total_time)
        t0 = time.perf_counter()
        step(ctx, probe, config.total_time / 10)
        cost = max(time.perf_counter() - t0, 1e-6)
        steps = max(1, int(config.budget_seconds // cost))
        delta = config.total_time / steps
    else:
        delta = config.delta
        steps = 0 if config.total_time == 0 or delta == 0 else \
            int(round(config.total_time / delta))
    state = init_flow(ctx, delta)
    gt = ground_truth(delta, steps) if callable(ground_truth) else ground_truth
    states = [state]
    metrics = [_metrics(state, gt)]
    timings = [0.0]
    for _ in range(steps):
        t0 = time.perf_counter()
        state = step(ctx, state)
        timings.append(time.perf_counter() - t0)
        metrics.append(_metrics(state, gt))
        if keep_states:
            states.append(state)
        else:
            states = [states[0], state]
    return FlowRun(states, metrics, timings, delta)


def _metrics(state: FlowState, gt) -> dict:
    row = {"step": state.step, "time": state.time, "rms": float("nan"),
           "rms_per_vertex": float("nan"), "sphericity": sphericity(state.positions)}
    if gt is not None and state.step < len(gt):
        row["rms"], row["rms_per_vertex"] = rms_error(state.positions, gt[state.step])
    return row
