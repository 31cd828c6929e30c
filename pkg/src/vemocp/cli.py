"""Command-line entry point ``vemocp``.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import ErrorReport
from .experiments import (
    TEST2_MESHES,
    ExperimentSpec,
    RunSpec,
    run_convergence,
    run_config,
    run_sigma_sweep,
    run_stabfree_compare,
)
from .expr import ExpressionError
from .forms import STABFREE, STABILIZED
from .mesh import MeshError, TAG_PRESETS, generate_cartesian, generate_star, load_mesh, save_mesh, validate
from .ocp import SolveError
from .presets import PRESETS, SWEEP_SIGMAS
from .vemspace import ProjectorError

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _jobs(args) -> int:
    return 1 if args.deterministic else max(1, args.jobs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    if args.config:
        data = json.loads(Path(args.config).read_text())
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
    else:
        k_list = args.order or (1,)
        sig = args.sigma or (1.0,)
        if len(k_list) != 1 or len(sig) != 1:
            raise UsageError("solve takes a single --order and --sigma")
        run = RunSpec(args.preset, args.mesh, k_list[0], args.k_u, None if args.scheme == STABFREE else sig[0], args.scheme)
        data = run.config_dict()
    row = run_config(data, args.mesh, args.reference)
    report = ErrorReport([row], min_levels=1)
    text = report.to_csv(("mesh", "scheme", "k", "k_u", "sigma"))
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_convergence(args) -> int:
    family = args.family
    levels = args.levels or (8, 16, 32, 64)
    spec = ExperimentSpec(
        name=f"convergence_{args.preset}_{family}",
        preset=args.preset,
        meshes=tuple(f"{family}:{n}" for n in levels),
        orders=args.order or (1, 2, 3, 4),
        sigmas=args.sigma or (1.0,),
        k_u=args.k_u,
        out=args.out,
    )
    reports = run_convergence(spec, jobs=_jobs(args))
    for k, rep in reports.items():
        slopes = ", ".join(f"{c}={v:.3f}" if v is not None else f"{c}=n/a" for c, v in rep.slopes().items())
        print(f"k={k}: {slopes}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = ExperimentSpec(
        name="sigma_sweep",
        preset="test2",
        meshes=tuple(args.mesh.split(",")) if args.mesh else TEST2_MESHES,
        orders=args.order or (1, 2, 3, 4),
        sigmas=args.sigma or SWEEP_SIGMAS,
        out=args.out,
    )
    res = run_sigma_sweep(spec, args.reference, jobs=_jobs(args))
    for (mesh, k), am in res.argmin.items():
        print(f"{mesh} k={k}: argmin sigma " + ", ".join(f"{c}={v:g}" for c, v in am.items()))
    print(f"{len(res.rows)} runs")
    return EXIT_OK


def cmd_stabfree(args) -> int:
    meshes = tuple(args.mesh.split(",")) if args.mesh else TEST2_MESHES
    res = run_stabfree_compare(meshes, args.reference, factor=args.factor, out=args.out, jobs=_jobs(args))
    for mesh, ratios in res.ratios.items():
        flags = ", ".join(f"{c}={r:.3f}{'' if res.within[mesh][c] else '!'}" for c, r in ratios.items())
        print(f"{mesh}: stabfree/min-stabilized {flags}")
    return EXIT_OK


def _domain(text: str):
    vals = _floats(text)
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("domain needs x0,y0,x1,y1")
    return vals


def cmd_mesh_gen(args) -> int:
    rule = TAG_PRESETS[args.preset]
    obs = PRESETS["test2"].obs_rects if args.preset == "test2" else None
    domain = args.domain or (PRESETS["test2"].rect if args.preset == "test2" else (0.0, 0.0, 1.0, 1.0))
    if args.n < 1:
        raise UsageError("--n must be positive")
    if args.kind == "cartesian":
        ny = args.ny or args.n
        mesh = generate_cartesian(args.n, ny, rect=domain, tag_rule=rule, obs_rects=obs)
    else:
        mesh = generate_star(args.n, rect=domain, tag_rule=rule, indent=args.indent, obs_rects=obs)
    q = validate(mesh)
    if args.out:
        save_mesh(mesh, args.out)
    else:
        json.dump(mesh.to_json_dict(), sys.stdout)
        sys.stdout.write("\n")
    print(f"{mesh.n_cells} cells, kappa_star={q.kappa_star:.4f}, kappa_edge={q.kappa_edge:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_mesh_check(args) -> int:
    mesh = load_mesh(args.file)
    q = validate(mesh)
    print(f"{args.file}: {mesh.n_cells} cells, {mesh.n_vertices} vertices, h={mesh.h:.6g}")
    print(f"kappa_star={q.kappa_star:.6g} kappa_edge={q.kappa_edge:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vemocp", description="Virtual element solver for Neumann boundary control.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, mesh_required=False):
        sp.add_argument("--mesh", required=mesh_required, help="cartesian:N, star:N, data:NAME or a mesh JSON file")
        sp.add_argument("--order", type=_ints, help="polynomial order(s) k, comma separated")
        sp.add_argument("--sigma", type=_floats, help="stabilization parameter(s), comma separated")
        sp.add_argument("--out", help="output file or directory")
        sp.add_argument("--reference", help="reference solution path prefix (built and cached when missing)")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")
        sp.add_argument("--deterministic", action="store_true", help="force a single process")

    s = sub.add_parser("solve", help="solve one problem and report its errors")
    common(s, mesh_required=True)
    s.add_argument("--config", help="problem config JSON")
    s.add_argument("--preset", default="test1", choices=sorted(PRESETS))
    s.add_argument("--k-u", type=int, dest="k_u")
    s.add_argument("--scheme", default=STABILIZED, choices=(STABILIZED, STABFREE))
    s.set_defaults(func=cmd_solve)

    c = sub.add_parser("convergence", help="refinement study against the exact solution")
    common(c)
    c.add_argument("--preset", default="test1", choices=["test1"])
    c.add_argument("--family", default="cartesian", choices=("cartesian", "star"))
    c.add_argument("--levels", type=_ints, help="cells per unit length, e.g. 8,16,32,64")
    c.add_argument("--k-u", type=int, dest="k_u")
    c.set_defaults(func=cmd_convergence)

    w = sub.add_parser("sweep-sigma", help="stabilization sweep on the second benchmark")
    common(w)
    w.set_defaults(func=cmd_sweep)

    f = sub.add_parser("stabfree-compare", help="stabilization-free k=1 versus the best sigma")
    common(f)
    f.add_argument("--factor", type=float, default=2.0)
    f.set_defaults(func=cmd_stabfree)

    m = sub.add_parser("mesh", help="mesh utilities")
    msub = m.add_subparsers(dest="mesh_command", required=True)
    g = msub.add_parser("gen", help="generate a mesh")
    g.add_argument("kind", choices=("cartesian", "star"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--ny", type=int)
    g.add_argument("--domain", type=_domain)
    g.add_argument("--preset", "--tags", dest="preset", default="test1", choices=sorted(TAG_PRESETS))
    g.add_argument("--indent", type=float, default=0.2)
    g.add_argument("--out")
    g.set_defaults(func=cmd_mesh_gen)
    ck = msub.add_parser("check", help="validate a mesh file")
    ck.add_argument("file")
    ck.set_defaults(func=cmd_mesh_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SolveError, ProjectorError, ArithmeticError, LookupError) as exc:
        print(f"vemocp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, MeshError, ExpressionError, ValueError, KeyError, OSError) as exc:
        print(f"vemocp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
