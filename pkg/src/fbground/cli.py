"""Command line entry point: ``fbground {spectrum,solve,verify,sweep,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .continuation import ContinuationError
from .grid import read_field
from .pipeline import (
    ConfigError,
    RunConfig,
    build_problem,
    load_config,
    run_cell,
    run_solve,
    sweep_cells,
    to_json,
    verify_field,
    write_sweep_csv,
)
from .solver import SolverError
from .spectral import mpass_upper_bound

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

log = logging.getLogger("fbground")

SPECTRUM_NOTES = {
    "lambda1": "inverse iteration on the discrete Dirichlet Laplacian (DST-I Poisson solves)",
    "S": "continuum Aubin-Talenti bubble by radial quadrature, not a discrete minimum",
    "M_lambda": "mountain-pass bound along the eigenfunction ray at lambda_star = lambda_star_factor * lambda1",
    "kappa_star_upper": "compactness threshold from S, M_lambda and the box volume",
    "kappa_star_lower": "(1 - 4/N^2)^(N/(N-2)) times kappa_star_upper",
    "level_floor": "rho^2 / 3, the lower bound for every mountain-pass level",
    "M_at_lambda": "the same bound at the working lambda; 'inf' when lambda <= lambda1",
}


def _config(args) -> RunConfig:
    overrides = {}
    if args.allow_supercritical_kappa:
        overrides["allow_supercritical_kappa"] = True
    if args.config is None:
        raise ConfigError("--config is required")
    cfg = load_config(args.config, **overrides)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} not writable")
    return out


def cmd_spectrum(args) -> int:
    cfg = _config(args)
    problem = build_problem(cfg)
    sd = problem.spectral
    doc = sd.as_dict()
    bound = mpass_upper_bound(sd.lam, sd.lambda1, sd.phi1)
    doc["M_at_lambda"] = bound
    doc["M_at_lambda_finite"] = bool(np.isfinite(bound))
    doc["notes"] = SPECTRUM_NOTES
    doc["seed"] = args.seed
    text = to_json(doc)
    out = _out_dir(cfg)
    (out / "spectrum.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_solve(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    results = run_solve(cfg, out)
    results["seed"] = args.seed
    (out / "results.json").write_text(to_json(results))
    sys.stdout.write(to_json({"flags": results["flags"], "ok": results["ok"], "levels": results["levels"]}))
    return EXIT_OK if results["ok"] else EXIT_VERIFY


def cmd_verify(args) -> int:
    cfg = _config(args)
    problem = build_problem(cfg)
    try:
        u = read_field(args.field, problem.grids[0] if args.grid_index is None else problem.grids[args.grid_index])
    except (OSError, ValueError) as exc:
        # a field from a refined step lives on one of the other configured grids
        for g in problem.grids[1:]:
            try:
                u = read_field(args.field, g)
                break
            except (OSError, ValueError):
                continue
        else:
            raise ConfigError(f"cannot read field {args.field}: {exc}") from exc
    doc = verify_field(u, cfg, problem)
    doc["seed"] = args.seed
    text = to_json(doc)
    out = _out_dir(cfg)
    (out / "verify.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if doc["ok"] else EXIT_VERIFY


def _workers(n_cells: int) -> int:
    cap = os.environ.get("FBGROUND_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigError(f"FBGROUND_THREADS={cap!r} is not an integer") from exc
    return max(1, min(limit, n_cells))


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    cells = sweep_cells(cfg)
    workers = _workers(len(cells))
    if workers == 1:
        rows = [run_cell(c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    write_sweep_csv(out / "sweep.csv", rows)
    sys.stdout.write((out / "sweep.csv").read_text())
    return EXIT_OK


def cmd_report(args) -> int:
    """Plot-ready CSV tables from the artifacts of a finished ``solve``."""
    cfg = _config(args)
    out = Path(cfg.out)
    try:
        results = json.loads((out / "results.json").read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"no readable results.json in {out}: {exc}") from exc

    def table(name, header, rows):
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)

    conv = results.get("convergence", {})
    sups = [None] + list(conv.get("sup_distances", [None] * (len(results["levels"]) - 1)))
    h1s = [None] + list(conv.get("h1_distances", [None] * (len(results["levels"]) - 1)))
    lip = results.get("lipschitz", {}).get("values", [None] * len(results["levels"]))
    table(
        "levels.csv",
        ["step", "eps", "level", "iterations", "sup_distance", "h1_distance", "max_grad"],
        [
            [j, e, c, it, s, h, l]
            for j, (e, c, it, s, h, l) in enumerate(
                zip(results["schedule"], results["levels"], results["iterations"], sups, h1s, lip)
            )
        ],
    )
    fb = results.get("freeboundary", {})
    if "estimates" in fb.get("flux_jump", {}):
        table(
            "flux_jump.csv",
            ["delta", "mean", "spread", "matched", "unmatched"],
            [[e["delta"], e["mean"], e["spread"], e["matched"], e["unmatched"]] for e in fb["flux_jump"]["estimates"]],
        )
    if "fbc" in fb:
        table(
            "fbc.csv",
            ["delta_plus", "delta_minus", "plus_integral", "minus_integral", "defect"],
            [[r["delta_plus"], r["delta_minus"], r["plus_integral"], r["minus_integral"], r["defect"]] for r in fb["fbc"]["reports"]],
        )
    fields = sorted(out.glob("field_*.txt"))
    if fields:
        from .freeboundary import level_set, nondegeneracy_scan, write_surface_csv
        from .grid import build_grid

        problem_grids = [build_grid(cfg.dim, cfg.extents, n) for n in (cfg.nodes, *cfg.refine)]
        u = None
        for g in problem_grids:
            try:
                u = read_field(fields[-1], g)
                break
            except ValueError:
                continue
        if u is not None:
            write_surface_csv(out / "surface.csv", level_set(u, 1.0, "plus"))
            if cfg.r0 > 2 * u.grid.max_spacing:
                nd = nondegeneracy_scan(u, cfg.r0)
                table("nondegeneracy.csv", ["distance", "alpha"], [[float(r), float(a)] for r, a in zip(nd.distances, nd.alphas)])
    sys.stdout.write(f"report written to {out}\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbground", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--out", help="output directory (overrides [output] dir)")
    common.add_argument("--allow-supercritical-kappa", action="store_true",
                        help="accept kappa at or above the existence threshold")
    common.add_argument("--seed", type=int, default=0, help="recorded in outputs; the pipeline itself is deterministic")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, func, helptext in (
        ("spectrum", cmd_spectrum, "principal eigenpair and thresholds as JSON"),
        ("solve", cmd_solve, "eps-continuation of ground states plus verification"),
        ("verify", cmd_verify, "run all field checks on a stored field"),
        ("sweep", cmd_sweep, "lambda x kappa parameter sweep to CSV"),
        ("report", cmd_report, "plot-ready CSV tables from a solve output directory"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.set_defaults(func=func)
        if name == "verify":
            p.add_argument("field", help="field file in the grid text format")
            p.add_argument("--grid-index", type=int, default=None, help="which configured grid the field lives on")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"fbground: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ContinuationError) as exc:
        print(f"fbground: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
