"""Command-line interface ``denscoint``.

Exit codes: 0 on success, 2 for input errors, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DenscointError, FormatError
from .fpca import ClrSeries, estimate_attractor
from .grid_space import Grid
from .logdensity import MESH, default_bandwidth, estimate_logdensity, select_bandwidth
from .pipeline import (
    PipelineConfig,
    emit_outputs,
    ingest,
    read_matrix,
    restrict,
    run_pipeline,
    shared_grid,
    write_matrix,
)
from .rank_test import CriticalValueTable, sequential_rank, simulate_critical_values
from .simulate import PRESETS, RngSeed, simulate_arp_paths


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {s!r}")


def _range(s: str) -> list:
    """``"1..7"``, ``"2,4"`` or ``"3"``."""
    try:
        if ".." in s:
            a, b = s.split("..")
            return list(range(int(a), int(b) + 1))
        return [int(v) for v in s.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected e.g. 1..7 or 1,2,3, got {s!r}") from None


def _bandwidth(s: str):
    if s in ("auto", "rule"):
        return s
    try:
        h = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bandwidth must be auto, rule or a number, got {s!r}") from None
    if not h > 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return h


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_series(path) -> ClrSeries:
    grid, values = read_matrix(path)
    return ClrSeries(grid, values)


# --- subcommands -------------------------------------------------------------


def cmd_simulate(args) -> None:
    grid = Grid(-3.0, 3.0, args.grid_n)
    cfg = PRESETS[args.preset](T=args.T, m=args.m, scale=args.scale, grid=grid)
    paths = simulate_arp_paths(cfg, RngSeed(args.seed), reps=1)
    dens = np.array([f.values for f in paths.densities(0)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "density_matrix.csv", grid.nodes, dens)
    write_matrix(out / "clr_matrix.csv", grid.nodes, paths.clr_values(0))


def cmd_estimate(args) -> None:
    sections = ingest(args.input)
    if (args.grid_lower is None) != (args.grid_upper is None):
        raise ConfigError("give both --grid-lower and --grid-upper or neither")
    if args.grid_lower is None:
        grid = shared_grid(sections, n=args.grid_n)
    else:
        grid = Grid(args.grid_lower, args.grid_upper, args.grid_n)
    dens, clrs, log = [], [], []
    for cs in sections:
        cs = restrict(cs, grid)
        if args.bandwidth == "auto":
            choice = select_bandwidth(cs, grid, mesh=args.mesh)
            h, entry = choice.h, {"candidates": choice.candidates.tolist(), "gbic": choice.gbic.tolist()}
        else:
            h = default_bandwidth(cs) if args.bandwidth == "rule" else args.bandwidth
            entry = {}
        est = estimate_logdensity(cs, grid, h, mesh=args.mesh)
        dens.append(est.density.values)
        clrs.append(est.clr.values)
        log.append({"t": cs.t, "n": cs.n, "bandwidth": h, **entry})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix(out / "density_matrix.csv", grid.nodes, np.array(dens))
    write_matrix(out / "clr_matrix.csv", grid.nodes, np.array(clrs))
    _write_json(out / "bandwidths.json", {"grid": grid.to_dict(), "mode": str(args.bandwidth), "periods": log})


def cmd_fpca(args) -> None:
    S = _load_series(args.input)
    A = estimate_attractor(S, args.r, min(args.k, S.grid.n - 1), demean=args.demeaned)
    P = A.projector
    report = {
        "grid": S.grid.to_dict(),
        "r": args.r,
        "eigenvalues": A.eigensystem.eigenvalues.tolist(),
        "basis": A.basis.matrix.tolist(),
        "projector": {
            "norm": P.norm(),
            "idempotence_error": float(np.max(np.abs((P @ P).matrix - P.matrix))),
            "trace": float(np.trace(P.matrix)),
        },
    }
    _write_json(args.out, report)


def cmd_rank_test(args) -> None:
    S = _load_series(args.input)
    if args.cv == "builtin":
        if not args.demeaned:
            raise ConfigError("the built-in table is for the demeaned variant; use --cv simulate")
        table = CriticalValueTable.builtin()
    else:
        table = simulate_critical_values(
            range(1, args.rmax + 1), args.paths, args.steps, args.demeaned, args.seed, args.threads
        )
    rep = sequential_rank(S, args.rmax, args.level, table, args.demeaned)
    _write_json(args.out, {**rep.to_dict(), "table": table.to_dict()})


def cmd_critval(args) -> None:
    table = simulate_critical_values(args.R, args.paths, args.steps, args.demeaned, args.seed, args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("R,level,cv,mc_se\n")
        for row in table.rows():
            fh.write(f"{row['R']},{row['level']},{row['cv']!r},{row['mc_se']!r}\n")


PIPELINE_FLAGS = (
    "input", "deflator", "deflator_base", "lower", "upper", "grid_n", "grid_rule", "mesh",
    "bandwidth", "R_max", "level", "cv", "cv_paths", "cv_steps", "demeaned", "k", "c", "outdir",
)  # fmt: skip


def cmd_pipeline(args) -> None:
    base = PipelineConfig.from_json(args.config).to_dict() if args.config else {}
    for name in PIPELINE_FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if args.seed_given or "seed" not in base:
        base["seed"] = args.seed
    if args.threads_given or "threads" not in base:
        base["threads"] = args.threads
    cfg = PipelineConfig.from_dict(base)
    if cfg.outdir is None:
        raise ConfigError("an output directory is required (--outdir or config 'outdir')")
    report = run_pipeline(cfg)
    emit_outputs(report, cfg.outdir)
    print(f"r_hat = {report.r_hat}")


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # repeated on every subcommand so the flags work before or after it
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file mirroring PipelineConfig")

    p = argparse.ArgumentParser(prog="denscoint", description="Cointegrated density-valued time series")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file mirroring PipelineConfig")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a density process")
    s.add_argument("--preset", choices=sorted(PRESETS), default="paper-ar1")
    s.add_argument("--T", type=int, default=1000)
    s.add_argument("--grid-n", type=int, default=601)
    s.add_argument("--m", type=int, default=10)
    s.add_argument("--scale", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("estimate", parents=[common], help="estimate densities from samples")
    s.add_argument("--input", required=True)
    s.add_argument("--grid-lower", type=float)
    s.add_argument("--grid-upper", type=float)
    s.add_argument("--grid-n", type=int, default=601)
    s.add_argument("--mesh", type=int, default=MESH)
    s.add_argument("--bandwidth", type=_bandwidth, default="auto")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("fpca", parents=[common], help="eigenpairs and attractor estimate")
    s.add_argument("--input", required=True)
    s.add_argument("--k", type=int, default=25)
    s.add_argument("--r", type=int, required=True)
    s.add_argument("--demeaned", type=_bool, default=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fpca)

    s = sub.add_parser("rank-test", parents=[common], help="sequential rank test")
    s.add_argument("--input", required=True)
    s.add_argument("--rmax", type=int, default=5)
    s.add_argument("--level", type=float, default=0.05)
    s.add_argument("--cv", choices=("builtin", "simulate"), default="builtin")
    s.add_argument("--paths", type=int, default=100_000)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--demeaned", type=_bool, default=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rank_test)

    s = sub.add_parser("critval", parents=[common], help="simulate critical values")
    s.add_argument("--R", type=_range, default=list(range(1, 8)))
    s.add_argument("--paths", type=int, default=100_000)
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--demeaned", type=_bool, default=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_critval)

    s = sub.add_parser("pipeline", parents=[common], help="run the full analysis")
    s.add_argument("--input")
    s.add_argument("--deflator")
    s.add_argument("--deflator-base", dest="deflator_base", type=int)
    s.add_argument("--lower", type=float)
    s.add_argument("--upper", type=float)
    s.add_argument("--grid-n", dest="grid_n", type=int)
    s.add_argument("--grid-rule", dest="grid_rule", choices=("common", "pooled"))
    s.add_argument("--mesh", type=int)
    s.add_argument("--bandwidth", type=_bandwidth)
    s.add_argument("--rmax", dest="R_max", type=int)
    s.add_argument("--level", type=float)
    s.add_argument("--cv", choices=("builtin", "simulate"))
    s.add_argument("--paths", dest="cv_paths", type=int)
    s.add_argument("--steps", dest="cv_steps", type=int)
    s.add_argument("--demeaned", type=_bool)
    s.add_argument("--k", type=int)
    s.add_argument("--c", type=float)
    s.add_argument("--outdir")
    s.set_defaults(func=cmd_pipeline)
    return p


def parse_args(argv=None) -> argparse.Namespace:
    args = build_parser().parse_args(argv)
    args.seed_given = args.seed is not None
    args.threads_given = args.threads is not None
    if args.seed is None:
        args.seed = 0
    if args.threads is None:
        args.threads = 1
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.config is not None and args.command != "pipeline":
        raise ConfigError("--config applies to the pipeline subcommand only")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        args.func(args)
    except DenscointError as err:
        print(f"denscoint: error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"denscoint: error: {FormatError(err)}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
