"""Run configuration and the ground-state pipeline behind the command line."""

from __future__ import annotations

import configparser
import csv
import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path as FsPath

import numpy as np

from .continuation import (
    ContinuationTrace,
    barrier_check,
    convergence_report,
    linf_bound_check,
    lipschitz_diagnostic,
    run_continuation,
    write_trace,
)
from .energy import Nonlinearity, energy_J
from .freeboundary import admissible_delta, fbc_sweep, flux_jump, nondegeneracy_scan, wall_bump_field
from .grid import Field, Grid, build_grid
from .nehari import NehariError, level_identity, nehari_residual, project
from .solver import SolveConfig, ps_diagnostic, write_history_csv
from .spectral import SpectralData, spectral_data

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "parse_config",
    "Problem",
    "build_problem",
    "run_solve",
    "verify_field",
    "run_cell",
    "to_json",
]


class ConfigError(ValueError):
    """Malformed or inadmissible run configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


@dataclass(frozen=True)
class RunConfig:
    dim: int = 3
    extents: tuple[float, ...] = (1.0, 1.0, 1.0)
    nodes: tuple[int, ...] = (65, 65, 65)
    refine: tuple[tuple[int, ...], ...] = ()
    kind: str = "critical"
    lambda_factor: float | None = 1.5
    lam: float | None = None
    kappa_fraction: float | None = 0.5
    kappa: float | None = None
    p: float | None = None
    lambda_star_factor: float = 1.25
    M: float | None = None
    eps0: float = 0.4
    ratio: float = 0.5
    steps: int = 5
    solver: SolveConfig = SolveConfig()
    out: str = "out"
    dump_fields: bool = True
    check_fbc: bool = True
    check_nondegeneracy: bool = True
    check_bounds: bool = True
    check_sandwich: bool = True
    nehari_tol: float = 1e-6
    floor_tol: float = 1e-6
    fbc_tol: float = 0.1
    fbc_ramp: float = 0.02
    delta_multiples: tuple[float, ...] = (1.0, 1.25, 1.5)
    fbc_delta_cells: tuple[float, ...] = (4.0, 8.0, 16.0)
    jump_range: tuple[float, float] = (1.8, 2.2)
    r0: float = 0.1
    lipschitz_r: float = 0.25
    sweep_lambda_factors: tuple[float, ...] = ()
    sweep_kappa_fractions: tuple[float, ...] = ()
    allow_supercritical_kappa: bool = False

    @property
    def schedule(self) -> tuple[float, ...]:
        return tuple(self.eps0 * self.ratio**j for j in range(self.steps))

    def validate(self) -> RunConfig:
        if self.steps <= 0:
            raise ConfigError("empty schedule")
        if not (self.eps0 > 0 and 0 < self.ratio < 1):
            raise ConfigError("schedule needs eps0 > 0 and 0 < ratio < 1")
        if self.kind not in ("critical", "subcritical"):
            raise ConfigError(f"unknown nonlinearity kind {self.kind!r}")
        if (self.lambda_factor is None) == (self.lam is None):
            raise ConfigError("give exactly one of lambda_factor and lambda")
        if (self.kappa_fraction is None) == (self.kappa is None):
            raise ConfigError("give exactly one of kappa_fraction and kappa")
        if self.kind == "subcritical":
            if self.p is None:
                raise ConfigError("subcritical kind needs p")
            if self.kappa_fraction is not None:
                raise ConfigError("kappa_fraction is defined for the critical kind only")
        if self.kappa_fraction is not None:
            if not self.kappa_fraction > 0:
                raise ConfigError("kappa_fraction must be positive")
            if self.kappa_fraction >= 1 and not self.allow_supercritical_kappa:
                raise ConfigError(
                    f"kappa_fraction={self.kappa_fraction} puts kappa at or above the existence threshold; "
                    "pass --allow-supercritical-kappa to run anyway"
                )
        for f in self.sweep_kappa_fractions:
            if f >= 1 and not self.allow_supercritical_kappa:
                raise ConfigError(f"sweep kappa fraction {f} >= 1 needs --allow-supercritical-kappa")
        if len(self.extents) != self.dim or len(self.nodes) != self.dim:
            raise ConfigError("extents and nodes must have dim entries")
        return self


_BOOL = {"true": True, "yes": True, "1": True, "on": True, "false": False, "no": False, "0": False, "off": False}


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse ``key = value`` blocks ``[grid] [nonlinearity] [schedule] [solver] [output] [verify] [sweep]``."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    known = {"grid", "nonlinearity", "schedule", "solver", "output", "verify", "sweep"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    kw: dict = {}
    solver_kw: dict = {}

    def get(section, key, conv):
        if cp.has_option(section, key):
            raw = cp.get(section, key)
            try:
                return conv(raw)
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc
        return None

    def boolean(raw):
        return _BOOL[raw.strip().lower()]

    def put(name, value):
        if value is not None:
            kw[name] = value

    dim = get("grid", "dim", int) or 3
    put("dim", dim)
    ext = get("grid", "extents", _floats)
    if ext is not None:
        put("extents", ext * dim if len(ext) == 1 else ext)
    else:
        put("extents", (1.0,) * dim)
    nodes = get("grid", "nodes", _ints)
    if nodes is not None:
        put("nodes", nodes * dim if len(nodes) == 1 else nodes)
    else:
        put("nodes", (65,) * dim)
    refine = get("grid", "refine", _ints)
    if refine:
        put("refine", tuple((n,) * dim for n in refine))

    put("kind", get("nonlinearity", "kind", str.strip))
    lf, lam = get("nonlinearity", "lambda_factor", float), get("nonlinearity", "lambda", float)
    if lf is not None or lam is not None:
        kw["lambda_factor"], kw["lam"] = lf, lam
    kf, kap = get("nonlinearity", "kappa_fraction", float), get("nonlinearity", "kappa", float)
    if kf is not None or kap is not None:
        kw["kappa_fraction"], kw["kappa"] = kf, kap
    put("p", get("nonlinearity", "p", float))
    put("lambda_star_factor", get("nonlinearity", "lambda_star_factor", float))
    put("M", get("nonlinearity", "M", float))

    put("eps0", get("schedule", "eps0", float))
    put("ratio", get("schedule", "ratio", float))
    put("steps", get("schedule", "steps", int))

    for key, conv in (("tol", float), ("max_newton", int), ("backtrack", float), ("max_sweeps", int),
                      ("samples", int), ("sweep_tol", float), ("min_step", float), ("linear_rtol", float)):
        v = get("solver", key, conv)
        if v is not None:
            solver_kw[key] = v

    put("out", get("output", "dir", str.strip))
    put("dump_fields", get("output", "dump_fields", boolean))

    for key in ("fbc", "nondegeneracy", "bounds", "sandwich"):
        put(f"check_{key}", get("verify", key, boolean))
    for key in ("nehari_tol", "floor_tol", "fbc_tol", "fbc_ramp", "r0", "lipschitz_r"):
        put(key, get("verify", key, float))
    put("delta_multiples", get("verify", "delta_multiples", _floats))
    put("fbc_delta_cells", get("verify", "fbc_delta_cells", _floats))
    jr = get("verify", "jump_range", _floats)
    if jr is not None:
        if len(jr) != 2:
            raise ConfigError("[verify] jump_range needs two numbers")
        put("jump_range", jr)

    put("sweep_lambda_factors", get("sweep", "lambda_factors", _floats))
    put("sweep_kappa_fractions", get("sweep", "kappa_fractions", _floats))

    kw.update(overrides)
    try:
        if solver_kw:
            kw["solver"] = SolveConfig(**solver_kw)
        cfg = RunConfig(**kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def load_config(path: str | FsPath, **overrides) -> RunConfig:
    try:
        text = FsPath(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, **overrides)


@dataclass(frozen=True, eq=False)
class Problem:
    grids: tuple[Grid, ...]
    spectral: SpectralData
    nl: Nonlinearity


def build_problem(cfg: RunConfig) -> Problem:
    """Grids, thresholds and the nonlinearity for a configuration."""
    try:
        grids = (build_grid(cfg.dim, cfg.extents, cfg.nodes),) + tuple(
            build_grid(cfg.dim, cfg.extents, n) for n in cfg.refine
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    base = grids[0]
    if cfg.lam is not None:
        from .spectral import principal_eigen

        lambda1 = principal_eigen(base)[0]
        lambda_factor = cfg.lam / lambda1
    else:
        lambda_factor = cfg.lambda_factor
    sd = spectral_data(
        base,
        lambda_factor,
        kappa_fraction=cfg.kappa_fraction,
        kappa=cfg.kappa,
        lambda_star_factor=cfg.lambda_star_factor,
        M_override=cfg.M,
    )
    if cfg.kind == "critical":
        nl = Nonlinearity.critical(sd.lam, sd.kappa, cfg.dim)
    else:
        nl = Nonlinearity.subcritical(sd.lam, sd.kappa, cfg.p, cfg.dim)
    return Problem(grids, sd, nl)


def _finite(x: float):
    return x if math.isfinite(x) else str(x)


def to_json(doc) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as strings."""

    def clean(obj):
        if isinstance(obj, dict):
            return {str(k): clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        if isinstance(obj, (np.bool_, bool)):
            return bool(obj)
        if isinstance(obj, (np.integer, int)):
            return int(obj)
        if isinstance(obj, (np.floating, float)):
            return _finite(float(obj))
        if isinstance(obj, np.ndarray):
            return clean(obj.tolist())
        return obj

    return json.dumps(clean(doc), indent=2, sort_keys=True) + "\n"


def _nehari_block(u: Field, nl: Nonlinearity, tol: float) -> dict:
    if nl.kind != "critical":
        return {"applicable": False}
    res = nehari_residual(u, nl)
    block = {"residual": res, "tol": tol, "ok": bool(res <= tol), "J": energy_J(u, nl).total}
    try:
        pt = project(u, nl)
        block["projected_residual"] = pt.residual
        block["projected_level"] = pt.energy
        block["projected_identity_gap"] = abs(level_identity(pt.field, nl) - energy_J(pt.field, nl).total)
    except NehariError as exc:
        block["projection"] = f"unavailable: {exc}"
    return block


def _fbc_block(u: Field, cfg: RunConfig) -> dict:
    deltas = [c * u.grid.max_spacing for c in cfg.fbc_delta_cells]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        sweep = fbc_sweep(u, wall_bump_field(u.grid, cfg.fbc_ramp * min(u.grid.extents)), deltas)
    return {
        "deltas": deltas,
        "reports": [r.__dict__ for r in sweep.reports],
        "extrapolated_defect": sweep.extrapolated_defect,
        "extrapolated_plus": sweep.extrapolated_plus,
        "extrapolated_minus": sweep.extrapolated_minus,
        "relative_defect": sweep.relative_defect,
        "warnings": sorted({str(w.message) for w in caught}),
    }


def _jump_block(u: Field, cfg: RunConfig, d0: float) -> dict:
    deltas = [d for d in (m * d0 for m in cfg.delta_multiples) if d < 1.0]
    block = {"deltas": deltas, "range": list(cfg.jump_range)}
    if not deltas:
        # the band {|u - 1| <= delta} would reach u = 0: grid too coarse
        block.update(in_range=False, finest_mean=math.nan, warnings=[f"no admissible delta below 1 (smallest {d0:g})"])
        return block
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        jump = flux_jump(u, deltas)
    finest = jump.finest
    block.update(
        estimates=[e.__dict__ for e in jump.estimates],
        finest_mean=finest.mean if finest else math.nan,
        finest_delta=finest.delta if finest else math.nan,
        extrapolated_mean=jump.extrapolated_mean,
        in_range=bool(finest is not None and cfg.jump_range[0] <= finest.mean <= cfg.jump_range[1]),
        warnings=sorted({str(w.message) for w in caught}),
    )
    return block


def _freeboundary_block(u: Field, cfg: RunConfig) -> dict:
    d0 = admissible_delta(u)
    if d0 == 0.0:
        return {"empty": True, "fbc_ok": True, "min_alpha": None, "nondegenerate": False}
    fbc = _fbc_block(u, cfg)
    block: dict = {"fbc": fbc, "fbc_ok": bool(fbc["relative_defect"] <= cfg.fbc_tol)}
    block["flux_jump"] = _jump_block(u, cfg, d0)
    if cfg.r0 > 2 * u.grid.max_spacing:
        nd = nondegeneracy_scan(u, cfg.r0)
        block["min_alpha"] = None if nd.empty else nd.min_alpha
        block["nondegeneracy_samples"] = len(nd.alphas)
        block["nondegenerate"] = bool(not nd.empty and nd.min_alpha > 0)
    else:
        block["min_alpha"] = None
        block["nondegenerate"] = False
    return block


def verify_field(u: Field, cfg: RunConfig, problem: Problem) -> dict:
    """All field-level checks on a single (externally supplied) field."""
    nl = problem.nl
    out = {"nehari": _nehari_block(u, nl, cfg.nehari_tol)}
    out["energy"] = energy_J(u, nl).__dict__
    out["max_principle"] = {"min": float(u.values.min()), "ok": bool(u.values.min() >= -1e-12)}
    br = barrier_check(u, nl)
    out["barrier"] = {"A0": br.A0, "margin": br.margin, "ok": br.ok}
    fb = _freeboundary_block(u, cfg)
    out["freeboundary"] = fb
    flags = {
        "nehari": out["nehari"].get("ok", True),
        "max_principle": out["max_principle"]["ok"],
        "barrier": br.ok,
    }
    if cfg.check_fbc:
        flags["fbc"] = fb["fbc_ok"]
    out["flags"] = flags
    out["ok"] = all(flags.values())
    return out


def run_solve(cfg: RunConfig, out_dir: str | FsPath | None = None, problem: Problem | None = None) -> dict:
    """Continuation plus every enabled verification; writes artifacts to ``out_dir``.

    Raises ``ContinuationError`` (with partial artifacts written) when a step
    fails to converge.
    """
    from .continuation import ContinuationError

    problem = problem or build_problem(cfg)
    sd, nl = problem.spectral, problem.nl
    out = FsPath(out_dir) if out_dir is not None else None
    floor = sd.level_floor if nl.kind == "critical" else None
    try:
        trace = run_continuation(cfg.schedule, nl, cfg.solver, problem.grids, level_floor=floor, floor_tol=cfg.floor_tol)
    except ContinuationError as exc:
        if out is not None and exc.trace is not None and len(exc.trace):
            write_trace(exc.trace, out, {"error": str(exc), "spectral": sd.as_dict()}, cfg.dump_fields)
        raise
    results = summarize(trace, cfg, problem)
    if out is not None:
        write_trace(trace, out, {"spectral": sd.as_dict()}, cfg.dump_fields)
        for j, p in enumerate(trace.points):
            write_history_csv(out / f"residuals_{j:02d}.csv", p.history)
        (out / "results.json").write_text(to_json(results))
    return results


def summarize(trace: ContinuationTrace, cfg: RunConfig, problem: Problem) -> dict:
    sd, nl = problem.spectral, problem.nl
    u = trace.limit
    res: dict = {
        "spectral": sd.as_dict(),
        "schedule": list(trace.schedule),
        "levels": list(trace.levels),
        "iterations": list(trace.iterations),
        "minimax_level": trace.minimax_level,
        "first_step_work": trace.first_step_work,
        "grids": [list(p.field.grid.nodes) for p in trace.points],
    }
    flags: dict = {}
    history = [h for p in trace.points for h in p.history]
    ps = ps_diagnostic(history, nl.kappa, sd.kappa_star_upper)
    res["ps"] = ps.__dict__
    if nl.kind == "critical":
        tol = cfg.floor_tol
        lo, hi = sd.level_floor - tol, sd.M_lambda + tol
        res["bracket"] = {"low": lo, "high": hi, "ok": all(lo <= c <= hi for c in trace.levels)}
    res["limit"] = _nehari_block(u, nl, cfg.nehari_tol)
    res["limit"]["nontrivial"] = bool(energy_J(u, nl).total > 0 and np.any(u.values > 1.0))
    if cfg.check_sandwich and len(trace) >= 2:
        rep = convergence_report(trace, nl)
        res["convergence"] = rep.as_dict()
        flags["sandwich"] = rep.sandwich_ok
    if cfg.check_bounds:
        lip = lipschitz_diagnostic(trace.points, cfg.lipschitz_r)
        min_ok = all(p.min_value >= -1e-12 for p in trace.points)
        barrier_ok = all(barrier_check(p.field, nl).ok for p in trace.points)
        res["lipschitz"] = {"values": list(lip), "ratio": max(lip) / min(lip) if min(lip) > 0 else math.inf}
        res["lipschitz"]["ok"] = bool(res["lipschitz"]["ratio"] < 2.0)
        bounds = {"max_principle": min_ok, "barrier": barrier_ok, "lipschitz": res["lipschitz"]["ok"]}
        if nl.kind == "critical":
            br = linf_bound_check(trace, sd.M_lambda, nl, sd.kappa_star_lower)
            res["bounds"] = br.as_dict()
            bounds["energy_bound"] = br.energy_bound_ok
            bounds["uniform_linf"] = br.uniform_ok
            bounds["bracket"] = res["bracket"]["ok"]
        flags["bounds"] = all(bounds.values())
        res["bounds_flags"] = bounds
    if cfg.check_fbc or cfg.check_nondegeneracy:
        fb = _freeboundary_block(u, cfg)
        res["freeboundary"] = fb
        if cfg.check_fbc:
            flags["fbc"] = fb["fbc_ok"]
        if cfg.check_nondegeneracy:
            flags["nondegeneracy"] = fb["nondegenerate"]
    flags["nontrivial"] = res["limit"]["nontrivial"]
    res["flags"] = flags
    res["ok"] = all(flags.values())
    return res


def run_cell(args: tuple[int, RunConfig]) -> dict:
    """One sweep cell; failures are recorded in the row, never raised."""
    index, cfg = args
    row = {
        "index": index,
        "lambda_factor": cfg.lambda_factor,
        "kappa_fraction": cfg.kappa_fraction,
    }
    try:
        problem = build_problem(cfg)
        row["kappa"] = problem.nl.kappa
        row["ps_warning"] = bool(problem.nl.kappa >= problem.spectral.kappa_star_upper)
        res = run_solve(cfg, None, problem)
        fb = res.get("freeboundary", {})
        row.update(
            level=res["levels"][-1],
            min_alpha=fb.get("min_alpha"),
            flux_jump_mean=fb.get("flux_jump", {}).get("finest_mean"),
            ok=res["ok"],
            status="ok",
        )
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        row.update(status=f"{type(exc).__name__}: {exc}", ok=False)
    return row


SWEEP_COLUMNS = ("index", "lambda_factor", "kappa_fraction", "kappa", "level", "min_alpha", "flux_jump_mean", "ps_warning", "ok", "status")


def sweep_cells(cfg: RunConfig) -> list[tuple[int, RunConfig]]:
    lfs = cfg.sweep_lambda_factors or (cfg.lambda_factor,)
    kfs = cfg.sweep_kappa_fractions or (cfg.kappa_fraction,)
    cells = []
    for lf in lfs:
        for kf in kfs:
            cells.append((len(cells), replace(cfg, lambda_factor=lf, lam=None, kappa_fraction=kf, kappa=None)))
    return cells


def write_sweep_csv(path: str | FsPath, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in sorted(rows, key=lambda r: r["index"]):
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r.get(c), float) else r[c]) for c in SWEEP_COLUMNS])
