"""Command-line entry point: ``surfgrid <subcommand> [mesh] [options]``.

Exit codes: 0 success, 2 usage error, 3 bad input, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import pathlib
import subprocess
import sys

import numpy as np
from scipy import io as spio
from scipy.spatial.transform import Rotation

from . import __version__, shapes
from .analysis import reference_spectrum, resolution_sweep, rotation_sweep, spectrum
from .assembly import assemble, discretize
from .components import AWARE, UNAWARE, corner_components
from .embedding import build_fragment_forest
from .experiments import (color_problem, min_depth_sweep, random_guess, solve_colors,
                          synthetic_texture)
from .flow import CG, MG, METRIC_COLUMNS, FlowConfig, cotan_flow, run_flow
from .mesh import DEFAULT_PAD, MeshError, format_ply, load_mesh, normalize
from .solver import NumericalError

logger = logging.getLogger("surfgrid")

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4

BUILTIN = {
    "sphere": lambda: shapes.icosphere(3),
    "blob": lambda: shapes.blob(4),
    "cube-lattice": lambda: shapes.cube_lattice(6, 1.0),
    "two-sheets": lambda: shapes.two_sheets(),
    "two-hemispheres": lambda: shapes.two_hemispheres(),
    "torus": lambda: shapes.torus(),
    "square": lambda: shapes.square(),
}


class UsageError(Exception):
    pass


def version_string() -> str:
    """``git describe``-style version, falling back to the package version."""
    here = pathlib.Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- configuration ------------------------------------------------------------

def read_config(path) -> dict:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    values = {}
    text = pathlib.Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def format_config(args: argparse.Namespace) -> list[str]:
    skip = {"func", "config", "out", "verbose"}
    return [f"{k}={_fmt(v)}" for k, v in sorted(vars(args).items())
            if k not in skip and v is not None]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _depth_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad depth list {text!r}") from exc


def _texture(text):
    # accept both "checkerboard3d 2" and "checkerboard3d:2"
    return ":".join(str(text).replace(":", " ").split())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("mesh", nargs="?", help="OBJ/PLY path or builtin:<name>")
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--depth", type=int, default=5)
    p.add_argument("--mode", choices=(AWARE, UNAWARE), default=AWARE)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pad", type=float, default=DEFAULT_PAD,
                   help="margin between the mesh and the unit cube")
    p.add_argument("--dump-matrices", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("-v", "--verbose", action="store_true")


def _add_solver(p):
    p.add_argument("--min-depth", type=int, default=0)
    p.add_argument("--cycle", choices=("v", "w"), default="w")
    p.add_argument("--smooth", type=int, default=10)
    p.add_argument("--cycles", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="surfgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"surfgrid {version_string()}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="per-level dimensions, components and sparsity")
    _add_common(p)
    p.add_argument("--min-depth", type=int, default=0)
    p.set_defaults(func=cmd_info)

    for name, func, hlp in (("fit-color", cmd_fit_color, "screened-Poisson color fitting"),
                            ("convergence", cmd_convergence,
                             "residual after one cycle for every minimum depth")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        _add_solver(p)
        p.add_argument("--alpha", type=float, default=0.01)
        p.add_argument("--synthetic-texture", dest="texture", nargs="+", type=_texture,
                       help="checkerboard3d <period> | ramp | constant <value>")
        p.add_argument("--galerkin", type=_bool, nargs="?", const=True, default=False)
        if name == "fit-color":
            p.add_argument("--solver", choices=(MG, CG), default=MG)
            p.add_argument("--sweep-min-depth", type=_bool, nargs="?", const=True,
                           default=False)
        p.set_defaults(func=func)

    p = sub.add_parser("spectrum", help="smallest generalized eigenvalues")
    _add_common(p)
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--reference", type=_bool, nargs="?", const=True, default=False,
                   help="also compute the cotangent spectrum of the mesh")
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("sweep-res", help="spectra over increasing depths")
    _add_common(p)
    p.add_argument("--depths", type=_depth_list, default=[3, 4, 5])
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--reference-mesh", help="denser tessellation for the ground truth")
    p.set_defaults(func=cmd_sweep_res)

    p = sub.add_parser("sweep-rot", help="spectra of randomly rotated copies")
    _add_common(p)
    p.add_argument("--rotations", type=int, default=5)
    p.add_argument("--count", type=int, default=50)
    p.set_defaults(func=cmd_sweep_rot)

    p = sub.add_parser("flow", help="conformalized mean-curvature flow")
    _add_common(p)
    p.add_argument("--min-depth", type=int)
    p.add_argument("--cycle", choices=("v", "w"), default="w")
    p.add_argument("--smooth", type=int, default=10)
    p.add_argument("--solver", choices=(MG, CG), default=MG)
    p.add_argument("--delta", type=float)
    p.add_argument("--budget-seconds", type=float)
    p.add_argument("--total-time", type=float, default=10.0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--preserve-area", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--ground-truth", type=_bool, nargs="?", const=True, default=False,
                   help="compare against a cotangent flow of the input mesh")
    p.add_argument("--stride", type=int, default=0, help="export every n-th step as PLY")
    p.set_defaults(func=cmd_flow)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = read_config(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        for a in subparser._actions:
            for opt in a.option_strings:
                known.setdefault(opt.lstrip("-").replace("-", "_"), a)
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[key]
            key = action.dest
            conv = action.type or (lambda x: x)
            try:
                defaults[key] = conv(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"config key {key!r}: {raw!r} not in {list(action.choices)}")
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if not args.mesh:
        raise UsageError("a mesh path (or builtin:<name>) is required")
    return args


# -- helpers -------------------------------------------------------------------

def _load(args):
    if args.mesh.startswith("builtin:"):
        name = args.mesh.split(":", 1)[1]
        if name not in BUILTIN:
            raise MeshError(f"unknown builtin mesh {name!r}; choose from {sorted(BUILTIN)}")
        return BUILTIN[name]()
    path = pathlib.Path(args.mesh)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    return load_mesh(path)


def _outdir(args) -> pathlib.Path:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _header(args) -> list[str]:
    return [f"surfgrid {version_string()}"] + format_config(args)


def write_csv(path, columns, rows, args):
    buf = io.StringIO()
    for line in _header(args):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c] if isinstance(row, dict) else row[i])
                    for i, c in enumerate(columns)])
    pathlib.Path(path).write_text(buf.getvalue())
    logger.info("wrote %s", path)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_ply(path, mesh, args):
    pathlib.Path(path).write_text(format_ply(mesh, comments=_header(args)))
    logger.info("wrote %s", path)


def _dump(args, system, out, tag=""):
    if args.dump_matrices:
        spio.mmwrite(str(out / f"stiffness{tag}.mtx"), system.L)
        spio.mmwrite(str(out / f"mass{tag}.mtx"), system.M)


def _colors(args, mesh):
    if args.texture:
        spec = args.texture if isinstance(args.texture, str) else ":".join(args.texture)
        return synthetic_texture(spec, mesh.vertices)
    if mesh.colors is None:
        raise MeshError("mesh has no vertex colors; pass --synthetic-texture")
    return np.asarray(mesh.colors, dtype=np.float64)


# -- subcommands ---------------------------------------------------------------

def cmd_info(args):
    mesh = _load(args)
    norm, xf = normalize(mesh, args.pad)
    forest = build_fragment_forest(norm, args.depth, min_depth=args.min_depth)
    print(f"mesh: {mesh.vertex_count} vertices, {mesh.face_count} faces, scale {xf.scale:.6g}")
    rows = []
    for d in range(args.min_depth, args.depth + 1):
        table = corner_components(forest, d)
        row = {"depth": d, "fragments": len(forest.level(d))}
        for mode in (AWARE, UNAWARE):
            disc = discretize(forest, d, mode, table)
            L = disc.stiffness()
            row[f"{mode}_dim"] = disc.dim
            row[f"{mode}_nnz_per_row"] = L.nnz / max(disc.dim, 1)
        row["histogram"] = " ".join(f"{k}:{v}" for k, v in sorted(table.histogram().items()))
        rows.append(row)
        print(f"depth {d}: fragments {row['fragments']}, aware dim {row['aware_dim']}, "
              f"unaware dim {row['unaware_dim']}, nnz/row {row['aware_nnz_per_row']:.2f} "
              f"(unaware {row['unaware_nnz_per_row']:.2f}), components per corner "
              f"{row['histogram']}")
    cols = ["depth", "fragments", "aware_dim", "unaware_dim", "aware_nnz_per_row",
            "unaware_nnz_per_row", "histogram"]
    out = _outdir(args)
    write_csv(out / "info.csv", cols, rows, args)
    if args.dump_matrices:
        _dump(args, assemble(discretize(forest, args.depth, args.mode), args.epsilon), out)


def _problem(args, mesh):
    colors = _colors(args, mesh)
    prob = color_problem(mesh, colors, args.depth, args.mode, args.alpha, args.epsilon,
                         min_depth=0, galerkin=args.galerkin, pad=args.pad)
    rng = np.random.default_rng(args.seed)
    u0 = random_guess(prob.discs[-1].dim, colors.shape[1], rng)
    return prob, u0


def cmd_fit_color(args):
    mesh = _load(args)
    prob, u0 = _problem(args, mesh)
    out = _outdir(args)
    u, hist = solve_colors(prob, u0, args.cycles, args.min_depth, args.smooth,
                           args.cycle.upper(), args.solver)
    E = prob.discs[-1].vertex_evaluation_matrix()
    fitted = np.clip(E @ u, 0.0, 1.0)
    write_ply(out / "fitted.ply", mesh.replace(colors=fitted), args)
    write_csv(out / "residuals.csv", ["cycle", "level", "residual"], hist, args)
    if args.sweep_min_depth:
        rows = min_depth_sweep(prob, u0, args.smooth, args.cycle.upper())
        write_csv(out / "min_depth_sweep.csv",
                  ["min_depth", "residual", "normalized", "relative"], rows, args)
    if args.dump_matrices:
        spio.mmwrite(str(out / "system.mtx"), prob.operators[-1])
    print(f"final residual {hist[-1]['residual']:.6e}")


def cmd_convergence(args):
    mesh = _load(args)
    prob, u0 = _problem(args, mesh)
    rows = min_depth_sweep(prob, u0, args.smooth, args.cycle.upper())
    write_csv(_outdir(args) / "convergence.csv",
              ["min_depth", "residual", "normalized", "relative"], rows, args)
    for r in rows:
        print(f"min_depth {r['min_depth']}: normalized residual {r['normalized']:.6e}")


def cmd_spectrum(args):
    mesh = _load(args)
    norm, xf = normalize(mesh, args.pad)
    forest = build_fragment_forest(norm, args.depth, min_depth=args.depth)
    system = assemble(discretize(forest, args.depth, args.mode), args.epsilon)
    rep = spectrum(system, args.count, depth=args.depth).scaled(xf.scale ** 2)
    rows = [(args.mode, args.depth, i + 1, v) for i, v in enumerate(rep.eigenvalues)]
    if args.reference:
        ref = reference_spectrum(mesh, args.count)
        rows += [("cotan", "", i + 1, v) for i, v in enumerate(ref.eigenvalues)]
    out = _outdir(args)
    write_csv(out / "spectrum.csv", ["source", "depth", "index", "eigenvalue"], rows, args)
    _dump(args, system, out)
    print(f"{len(rep.eigenvalues)} eigenvalues, {rep.zero_count} near zero, "
          f"max residual {rep.residuals.max():.2e}")
    if not rep.converged:
        raise NumericalError("eigen-solver did not converge to the required residual")


def cmd_sweep_res(args):
    mesh = _load(args)
    ref_mesh = None
    if args.reference_mesh:
        ref_mesh = load_mesh(args.reference_mesh)
    res = resolution_sweep(mesh, args.depths, args.mode, args.count, reference_mesh=ref_mesh,
                           epsilon=args.epsilon, pad=args.pad)
    out = _outdir(args)
    write_csv(out / "sweep_res.csv", ["depth", "index", "eigenvalue"], res.rows("depth"), args)
    write_csv(out / "sweep_res_deviation.csv", ["depth", "deviation"],
              list(zip(args.depths, res.deviations)), args)
    for d, dev in zip(args.depths, res.deviations):
        print(f"depth {d}: rms relative deviation {dev:.6e}")


def cmd_sweep_rot(args):
    mesh = _load(args)
    rots = Rotation.random(args.rotations, random_state=args.seed).as_matrix()
    reports, spr = rotation_sweep(mesh, rots, args.depth, args.mode, args.count, args.epsilon,
                                  args.pad)
    rows = [(r.rotation, i + 1, v) for r in reports for i, v in enumerate(r.eigenvalues)]
    out = _outdir(args)
    write_csv(out / "sweep_rot.csv", ["rotation", "index", "eigenvalue"], rows, args)
    write_csv(out / "sweep_rot_spread.csv", ["index", "spread"],
              [(i + 1, s) for i, s in enumerate(spr)], args)
    print(f"median spread over indices 2..{len(spr)}: {np.median(spr[1:]):.6e}")


def cmd_flow(args):
    mesh = _load(args)
    if (args.delta is None) == (args.budget_seconds is None):
        raise UsageError("give exactly one of --delta and --budget-seconds")
    cfg = FlowConfig(depth=args.depth, min_depth=args.min_depth, mode=args.mode,
                     solver=args.solver, delta=args.delta, budget_seconds=args.budget_seconds,
                     total_time=args.total_time, epsilon=args.epsilon, smooth=args.smooth,
                     cycle=args.cycle.upper(), tol=args.tol, preserve_area=args.preserve_area,
                     pad=args.pad)
    gt = None
    if args.ground_truth:
        def gt(delta, steps):
            return cotan_flow(mesh, delta, steps, preserve_area=args.preserve_area)
    run = run_flow(mesh, cfg, ground_truth=gt, keep_states=args.stride > 0)
    out = _outdir(args)
    write_csv(out / "flow_metrics.csv", list(METRIC_COLUMNS), run.metrics, args)
    # wall-clock numbers are not reproducible, so they live in their own file
    write_csv(out / "flow_timing.csv", ["step", "solve_seconds"],
              list(enumerate(run.timings)), args)
    if args.stride > 0:
        for s in run.states:
            if s.step % args.stride == 0 or s.step == run.states[-1].step:
                write_ply(out / f"flow_{s.step:04d}.ply", mesh.replace(vertices=s.positions),
                          args)
    last = run.metrics[-1]
    print(f"{last['step']} steps of {run.delta:.6g}, sphericity {last['sphericity']:.6e}")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"surfgrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"surfgrid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshError, OSError, ValueError) as exc:
        print(f"surfgrid: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"surfgrid: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
