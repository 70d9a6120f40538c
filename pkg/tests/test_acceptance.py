"""Acceptance suite: one verdict line per criterion (see the terminal summary)."""

import time

import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.transform import Rotation

from surfgrid import shapes
from surfgrid.analysis import reference_spectrum, resolution_sweep, rotation_sweep
from surfgrid.assembly import discretize
from surfgrid.cli import main
from surfgrid.components import AWARE, UNAWARE
from surfgrid.embedding import build_fragment_forest, corner_from_linear
from surfgrid.experiments import color_problem
from surfgrid.flow import FlowConfig, cotan_flow, run_flow
from surfgrid.mesh import face_component_labels, normalize
from surfgrid.solver import SingularSystemError, build_prolongation, reference_solve

from conftest import record, surface_samples

pytestmark = pytest.mark.acceptance


def _csv_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    head = lines[0].split(",")
    return [dict(zip(head, l.split(","))) for l in lines[1:]]


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_prolongation_exact():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    corpus = {"sphere": shapes.icosphere(3), "cube-lattice": shapes.cube_lattice(),
              "two-sheets": shapes.two_sheets()}
    worst = 0.0
    for mesh in corpus.values():
        norm, _ = normalize(mesh)
        forest = build_fragment_forest(norm, 5, min_depth=3)
        pts, faces = surface_samples(norm, 1000, rng)
        for mode in (AWARE, UNAWARE):
            for d in (3, 4):
                c, f = discretize(forest, d, mode), discretize(forest, d + 1, mode)
                P = build_prolongation(c, f)
                err = abs(c.evaluation_matrix(pts, faces)
                          - f.evaluation_matrix(pts, faces) @ P).max()
                worst = max(worst, err)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed <= 120
    assert record(1, ok, f"max pointwise error {worst:.2e}, {elapsed:.1f} s")


# -- 2 ------------------------------------------------------------------------

def _indicators(disc, labels):
    comp = labels[disc.level.faces]
    out = []
    for c in np.unique(labels):
        v = np.zeros(disc.dim)
        v[np.unique(disc.index.node_basis[comp == c])] = 1.0
        out.append(v)
    return out


def _largest_finite_eigenvalue(L, M):
    # M is singular when trilinear functions vanish on the surface; restrict
    # the pencil to the range of M
    mu, Q = scipy.linalg.eigh(M.toarray())
    keep = mu > 1e-10 * mu.max()
    W = Q[:, keep] / np.sqrt(mu[keep])
    return scipy.linalg.eigvalsh(W.T @ L.toarray() @ W).max()


def test_criterion_2_kernel_counting():
    cases = {1: (shapes.icosphere(2), None),
             2: (shapes.two_hemispheres(subdivisions=2), 3),
             8: (shapes.cube_lattice(2, 0.3), 2)}
    details, ok = [], True
    for k, (mesh, coupling_depth) in cases.items():
        norm, _ = normalize(mesh)
        labels = face_component_labels(norm)
        assert labels.max() + 1 == k
        forest = build_fragment_forest(norm, 3, min_depth=0)
        worst = 0.0
        for d in forest.depths():
            disc = discretize(forest, d, AWARE)
            L = disc.stiffness()
            for v in _indicators(disc, labels):
                worst = max(worst, np.abs(L @ v).max() / np.abs(L).max())
        ok &= worst <= 1e-9
        msg = f"k={k}: aware max|L 1_c|/max|L| {worst:.1e}"
        if coupling_depth is not None:
            disc = discretize(forest, coupling_depth, UNAWARE)
            aware_dim = discretize(forest, coupling_depth, AWARE).dim
            L, M = disc.stiffness(), disc.mass()
            lam_max = _largest_finite_eigenvalue(L, M)
            rq = np.array([(v @ L @ v) / (v @ M @ v) for v in _indicators(disc, labels)])
            near_null = int(np.sum(rq < 1e-6 * lam_max))
            ok &= near_null < k and disc.dim < aware_dim
            msg += (f", unaware depth {coupling_depth}: {near_null} near-null indicators, "
                    f"min RQ/lam_max {rq.min() / lam_max:.1e}")
        details.append(msg)
    assert record(2, ok, "; ".join(details))


# -- 3 ------------------------------------------------------------------------

CONVERGENCE_ARGS = ["convergence", "builtin:cube-lattice", "--depth", "5", "--alpha", "0.01",
                    "--cycle", "w", "--smooth", "10", "--seed", "0",
                    "--synthetic-texture", "checkerboard3d", "2"]


def _convergence(out, mode):
    assert main(CONVERGENCE_ARGS + ["--mode", mode, "--out", str(out)]) == 0
    return out / "convergence.csv"


@pytest.fixture(scope="module")
def convergence_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("c3")
    t0 = time.perf_counter()
    paths = {m: _convergence(base / m, m) for m in (AWARE, UNAWARE)}
    return paths, time.perf_counter() - t0


def test_criterion_3_min_depth_sweep(convergence_runs):
    paths, elapsed = convergence_runs
    res = {m: np.array([float(r["normalized"]) for r in _csv_rows(p)])
           for m, p in paths.items()}
    flat = res[UNAWARE].max() / res[UNAWARE].min()
    growth = res[AWARE][-1] / res[AWARE][0]
    ok = len(res[AWARE]) == 6 and flat <= 2 and growth >= 5 and elapsed <= 600
    assert record(3, ok, f"6x6x6 lattice depth 5: unaware max/min {flat:.2f}, "
                         f"aware growth {growth:.0f}x, {elapsed:.0f} s")


# -- 4 ------------------------------------------------------------------------

def _mc_entry(disc, normals, a, b, kind, n_samples, rng):
    """Monte-Carlo estimate and standard error of one matrix entry."""
    lv = disc.level
    nb = disc.index.node_basis
    shared = np.flatnonzero(np.any(nb == a, 1) & np.any(nb == b, 1))
    faces = np.unique(lv.faces[shared])
    mesh = disc.mesh
    area = mesh.face_areas[faces]
    pick = rng.choice(len(faces), n_samples, p=area / area.sum())
    fid = faces[pick]
    bary = rng.dirichlet([1.0, 1.0, 1.0], n_samples)
    p = np.einsum("qj,qjd->qd", bary, mesh.vertices[mesh.faces[fid]])
    n = lv.resolution
    vox = np.clip(np.floor(n * p).astype(np.int64), 0, n - 1)
    frag = lv.lookup(vox, fid, mesh.face_count)
    hit = np.isin(frag, shared)
    p, fid, vox, frag = p[hit], fid[hit], vox[hit], frag[hit]
    t = n * p - vox
    offs = corner_from_linear(disc.table.node_corner[frag], n) - vox[:, None, :]
    w = np.where(offs == 1, t[:, None, :], 1.0 - t[:, None, :])
    dw = np.where(offs == 1, 1.0, -1.0) * n
    val = w.prod(-1)
    grad = np.stack([dw[..., 0] * w[..., 1] * w[..., 2], w[..., 0] * dw[..., 1] * w[..., 2],
                     w[..., 0] * w[..., 1] * dw[..., 2]], -1)
    nrm = normals[fid]
    grad -= np.einsum("qkd,qd->qk", grad, nrm)[..., None] * nrm[:, None, :]
    ma, mb = (nb[frag] == a), (nb[frag] == b)
    if kind == "mass":
        fa, fb = (val * ma).sum(1), (val * mb).sum(1)
        g = fa * fb
    else:
        ga = (grad * ma[..., None]).sum(1)
        gb = (grad * mb[..., None]).sum(1)
        g = (ga * gb).sum(1)
    integrand = np.zeros(n_samples)
    integrand[hit] = g
    total = area.sum()
    return total * integrand.mean(), total * integrand.std(ddof=1) / np.sqrt(n_samples)


def test_criterion_4_quadrature_vs_monte_carlo():
    rng = np.random.default_rng(4)
    norm, _ = normalize(shapes.two_hemispheres(subdivisions=2))
    forest = build_fragment_forest(norm, 3, min_depth=3)
    disc = discretize(forest, 3, AWARE)
    p = norm.vertices[norm.faces]
    normals = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    passed = total = 0
    for kind, A in (("stiffness", disc.stiffness()), ("mass", disc.mass())):
        rows, cols = A.nonzero()
        for i in rng.choice(len(rows), 200, replace=False):
            est, se = _mc_entry(disc, normals, rows[i], cols[i], kind, 100_000, rng)
            passed += abs(est - A[rows[i], cols[i]]) <= 3 * se + 1e-15
            total += 1
    frac = passed / total
    assert record(4, frac >= 0.95, f"{passed}/{total} entries within 3 SE ({frac:.1%})")


# -- 5 ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def sheet_reference():
    # dense tessellation of the same two rectangles as ground truth
    return reference_spectrum(shapes.two_sheets(resolution=256), 30)


def test_criterion_5_spectral_convergence(sheet_reference):
    mesh = shapes.two_sheets()
    depths = [3, 4, 5, 6]
    dev = {m: resolution_sweep(mesh, depths, m, 30, reference=sheet_reference).deviations
           for m in (AWARE, UNAWARE)}
    a = np.array(dev[AWARE])
    inversions = [(a[i + 1] - a[i]) / a[i] for i in range(len(a) - 1) if a[i + 1] > a[i]]
    monotone = len(inversions) == 0 or (len(inversions) == 1 and inversions[0] <= 0.05)
    dominated = all(x <= y for x, y in zip(dev[AWARE], dev[UNAWARE]))
    fmt = lambda v: "/".join(f"{x:.2e}" for x in v)
    assert record(5, monotone and dominated,
                  f"aware {fmt(dev[AWARE])}, unaware {fmt(dev[UNAWARE])} at depths 3-6")


# -- 6 ------------------------------------------------------------------------

def test_criterion_6_rotation_stability():
    mesh = shapes.two_sheets()
    rotations = Rotation.random(5, random_state=0).as_matrix()
    spreads = {m: rotation_sweep(mesh, rotations, 4, m, 30)[1] for m in (AWARE, UNAWARE)}
    better = spreads[AWARE][1:30] <= spreads[UNAWARE][1:30]
    frac = better.mean()
    assert record(6, frac >= 0.8,
                  f"aware spread <= unaware at {better.sum()}/{len(better)} indices, "
                  f"median {np.median(spreads[AWARE][1:]):.1e} vs "
                  f"{np.median(spreads[UNAWARE][1:]):.1e}")


# -- 7 ------------------------------------------------------------------------

FLOW_ARGS = ["flow", "builtin:sphere", "--depth", "5", "--delta", "1", "--total-time", "10"]


@pytest.fixture(scope="module")
def sphere_flow(tmp_path_factory):
    out = tmp_path_factory.mktemp("c7")
    assert main(FLOW_ARGS + ["--out", str(out)]) == 0
    return out / "flow_metrics.csv"


def test_criterion_7_cmcf(sphere_flow):
    t0 = time.perf_counter()
    sph = np.array([float(r["sphericity"]) for r in _csv_rows(sphere_flow)])
    sphere_ok = len(sph) == 11 and sph.max() - sph[0] <= 1e-3

    blob = shapes.blob(4)
    run = run_flow(blob, FlowConfig(depth=5, delta=1.0, total_time=30), keep_states=False)
    blob_sph = np.array([r["sphericity"] for r in run.metrics])
    blob_ok = blob.vertex_count <= 20_000 and blob_sph.min() <= 0.05

    hemis = shapes.two_hemispheres(gap=0.04)
    delta, steps = 0.05, 10
    gt = cotan_flow(hemis, delta, steps)
    final = {}
    for mode in (AWARE, UNAWARE):
        r = run_flow(hemis, FlowConfig(depth=5, mode=mode, delta=delta,
                                       total_time=delta * steps), ground_truth=gt,
                     keep_states=False)
        final[mode] = r.metrics[-1]["rms"]
    hemi_ok = final[AWARE] < final[UNAWARE]
    elapsed = time.perf_counter() - t0
    ok = sphere_ok and blob_ok and hemi_ok and elapsed <= 900
    assert record(7, ok,
                  f"sphere drift {sph.max() - sph[0]:.1e}; blob sphericity "
                  f"{blob_sph[0]:.3f}->{blob_sph.min():.3f}; hemispheres final RMS aware "
                  f"{final[AWARE]:.4f} vs unaware {final[UNAWARE]:.4f}; {elapsed:.0f} s")


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_singular_square():
    mesh = shapes.square()
    colors = np.full((mesh.vertex_count, 3), 0.5)
    singular = color_problem(mesh, colors, 3, AWARE, alpha=0.01, epsilon=0.0)
    try:
        reference_solve(singular.operators[-1], singular.rhs[:, 0])
        detected = False
    except SingularSystemError:
        detected = True
    fixed = color_problem(mesh, colors, 3, AWARE, alpha=0.01, epsilon=1e-8)
    A, b = fixed.operators[-1], fixed.rhs[:, 0]
    x = reference_solve(A, b)
    rel = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
    fitted = fixed.discs[-1].vertex_evaluation_matrix() @ x
    ok = detected and rel <= 1e-8 and np.allclose(fitted, 0.5, atol=1e-4)
    assert record(8, ok, f"eps=0 detected singular: {detected}; eps=1e-8 residual {rel:.1e}, "
                         f"max color error {np.abs(fitted - 0.5).max():.1e}")


# -- 9 ------------------------------------------------------------------------

def test_criterion_9_determinism(convergence_runs, sphere_flow, tmp_path):
    paths, _ = convergence_runs
    same = []
    for mode, first in paths.items():
        again = _convergence(tmp_path / mode, mode)
        same.append(first.read_bytes() == again.read_bytes())
    assert main(FLOW_ARGS + ["--out", str(tmp_path / "flow")]) == 0
    same.append(sphere_flow.read_bytes() == (tmp_path / "flow" / "flow_metrics.csv").read_bytes())
    assert record(9, all(same), f"{sum(same)}/{len(same)} CSVs byte-identical on rerun")
