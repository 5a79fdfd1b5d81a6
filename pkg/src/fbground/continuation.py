"""The eps -> 0 continuation loop and the diagnostics of its limit."""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path as FsPath

import numpy as np

from .energy import Nonlinearity, energy_J
from .grid import Field, Grid, dirichlet_form, gradient, integrate, interpolate, poisson_solve, write_field
from .solver import CriticalPoint, SolveConfig, SolverError, estimate_c_eps, solve_critical_point

__all__ = [
    "ContinuationError",
    "ContinuationTrace",
    "ConvergenceReport",
    "BarrierReport",
    "BoundsReport",
    "grid_for_eps",
    "field_distances",
    "run_continuation",
    "convergence_report",
    "lipschitz_diagnostic",
    "barrier_check",
    "linf_bound_check",
    "write_trace",
    "CONTACT_TOL",
]

log = logging.getLogger(__name__)

CONTACT_TOL = 1e-12


class ContinuationError(RuntimeError):
    """A continuation step failed; ``trace`` holds the steps completed so far."""

    def __init__(self, message: str, trace: ContinuationTrace | None = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True, eq=False)
class ContinuationTrace:
    schedule: tuple[float, ...]
    points: tuple[CriticalPoint, ...]
    sup_distances: tuple[float, ...] = ()
    h1_distances: tuple[float, ...] = ()
    first_step_work: int = 0
    minimax_level: float = math.nan
    sweep_levels: tuple[float, ...] = ()

    def __post_init__(self):
        s = np.asarray(self.schedule, dtype=float)
        if len(s) == 0 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("schedule must be positive and strictly decreasing")
        if len(self.points) > len(s):
            raise ValueError("more points than schedule entries")
        for p, e in zip(self.points, s):
            if p.eps != e:
                raise ValueError("points[j].eps must equal schedule[j]")
        n = max(len(self.points) - 1, 0)
        if len(self.sup_distances) != n or len(self.h1_distances) != n:
            raise ValueError("metric lengths inconsistent with the number of points")

    @property
    def limit(self) -> Field:
        return self.points[-1].field

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(p.level for p in self.points)

    @property
    def iterations(self) -> tuple[int, ...]:
        return tuple(p.iterations for p in self.points)

    def __len__(self) -> int:
        return len(self.points)


def grid_for_eps(eps: float, grids: Sequence[Grid]) -> Grid:
    """Coarsest grid whose spacing resolves the transition layer (``eps >= 2 h``)."""
    ok = [g for g in grids if eps >= 2.0 * g.max_spacing]
    if not ok:
        raise ValueError(f"no grid resolves eps={eps}: need eps >= 2*max(h)")
    return min(ok, key=lambda g: g.n_interior)


def field_distances(a: Field, b: Field) -> tuple[float, float]:
    """Sup-norm and H^1-seminorm distance, compared on the coarser of the two grids."""
    if a.grid != b.grid:
        if a.grid.n_interior <= b.grid.n_interior:
            b = interpolate(b, a.grid)
        else:
            a = interpolate(a, b.grid)
    diff = a.values - b.values
    return float(np.abs(diff).max()), math.sqrt(max(dirichlet_form(a.grid, diff, diff), 0.0))


def run_continuation(
    schedule: Sequence[float],
    nl: Nonlinearity,
    cfg: SolveConfig,
    grids: Grid | Sequence[Grid],
    level_floor: float | None = None,
    floor_tol: float = 1e-6,
    seed: Field | None = None,
    direction: Field | None = None,
) -> ContinuationTrace:
    """Solve for critical points along a decreasing eps schedule with warm starts.

    The first step is seeded by the minimax estimate (or by ``seed`` if
    given); later steps start from the previous field, interpolated when the
    layer forces a finer grid.  A step whose level falls below
    ``level_floor - floor_tol`` is rejected as trivial.
    """
    schedule = tuple(float(e) for e in schedule)
    grids = (grids,) if isinstance(grids, Grid) else tuple(grids)
    # validates the schedule before any work
    ContinuationTrace(schedule, ())
    chosen = [grid_for_eps(e, grids) for e in schedule]

    points: list[CriticalPoint] = []
    sups: list[float] = []
    h1s: list[float] = []
    work = 0
    mm_level = math.nan
    sweeps: tuple[float, ...] = ()

    def partial():
        return ContinuationTrace(schedule, tuple(points), tuple(sups), tuple(h1s), work, mm_level, sweeps)

    for j, (eps, grid) in enumerate(zip(schedule, chosen)):
        try:
            if j == 0 and seed is None:
                est = estimate_c_eps(nl, eps, grid, cfg, direction=direction)
                point = est.candidate
                mm_level = est.level
                sweeps = est.sweep_levels
                work = len(est.sweep_levels) - 1 + point.iterations
            else:
                start = seed if j == 0 else points[-1].field
                if start.grid != grid:
                    start = interpolate(start, grid)
                point = solve_critical_point(start, eps, nl, cfg)
                if j == 0:
                    work = point.iterations
        except SolverError as exc:
            raise ContinuationError(f"step {j} (eps={eps}) failed: {exc}", partial()) from exc
        if level_floor is not None and point.level < level_floor - floor_tol:
            raise ContinuationError(
                f"step {j} (eps={eps}) reached level {point.level:.6g} below the mountain-pass floor "
                f"{level_floor:.6g}: trivial critical point rejected",
                partial(),
            )
        if points:
            sup, h1 = field_distances(points[-1].field, point.field)
            sups.append(sup)
            h1s.append(h1)
        points.append(point)
        log.info("eps=%g grid=%s level=%.10g newton=%d", eps, grid.nodes, point.level, point.iterations)
    return partial()


@dataclass(frozen=True)
class ConvergenceReport:
    sup_distances: tuple[float, ...]
    h1_distances: tuple[float, ...]
    levels: tuple[float, ...]
    limit_energy: float
    contact_measure: float
    tol: float
    sandwich_lower: bool
    sandwich_upper: bool
    oscillating: bool

    @property
    def sandwich_ok(self) -> bool:
        return self.sandwich_lower and self.sandwich_upper

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["sandwich_ok"] = self.sandwich_ok
        return d


def convergence_report(trace: ContinuationTrace, nl: Nonlinearity, tol_factor: float = 5e-3, tail: int = 3) -> ConvergenceReport:
    """Distances between iterates, the levels, and the energy sandwich of the tail.

    Checks ``J(u) - tol <= min c_j`` and ``max c_j <= J(u) + |{u = 1}| + tol``
    over the last ``tail`` levels, with ``tol = tol_factor * |c_last|``.
    Non-monotone sup distances are reported as oscillation; no subsequence is
    selected.
    """
    if len(trace) < 2:
        raise ValueError("convergence_report needs at least two points")
    u = trace.limit
    limit_energy = energy_J(u, nl).total
    contact = integrate(np.abs(u.values - 1.0) <= CONTACT_TOL, u.grid)
    levels = np.asarray(trace.levels)
    tol = tol_factor * abs(levels[-1])
    last = levels[-tail:]
    lower = bool(limit_energy - tol <= last.min())
    upper = bool(last.max() <= limit_energy + contact + tol)
    osc = bool(np.any(np.diff(trace.sup_distances) > 0))
    return ConvergenceReport(
        tuple(trace.sup_distances), tuple(trace.h1_distances), tuple(float(c) for c in levels),
        float(limit_energy), float(contact), float(tol), lower, upper, osc,
    )


def _interior_distance_mask(grid: Grid, r: float) -> np.ndarray:
    mask = np.ones(grid.shape, dtype=bool)
    for ax, x in enumerate(grid.coords()):
        ext = grid.extents[ax]
        mask &= (np.minimum(x, ext - x) >= r / 2.0)
    return mask


def lipschitz_diagnostic(points: Sequence[CriticalPoint | Field], r: float = 0.25) -> tuple[float, ...]:
    """Max ``|grad u_j|`` over nodes at distance at least ``r/2`` from the boundary."""
    out = []
    for p in points:
        u = p.field if isinstance(p, CriticalPoint) else p
        mask = _interior_distance_mask(u.grid, r)
        if not mask.any():
            raise ValueError(f"no nodes at distance {r / 2} from the boundary")
        out.append(float(gradient(u).magnitude()[mask].max()))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class BarrierReport:
    A0: float
    barrier: Field
    ok: bool
    margin: float


def barrier_check(u: Field, nl: Nonlinearity, tol: float = 1e-10) -> BarrierReport:
    """Check ``0 <= u <= phi0`` where ``-Lap phi0 = A0`` and ``A0 = max |f(u - 1)|``."""
    A0 = float(np.abs(nl.f(u.values - 1.0)).max())
    phi0 = poisson_solve(u.grid, np.full(u.grid.shape, A0)[u.grid.interior])
    if not np.all(np.isfinite(phi0)):
        raise RuntimeError("Poisson solve for the barrier failed")
    margin = float(min((phi0 - u.values).min(), u.values.min()))
    return BarrierReport(A0, Field(u.grid, phi0), margin >= -tol, margin)


@dataclass(frozen=True)
class BoundsReport:
    linf: float
    lipschitz: float
    barrier_ok: bool
    linf_bound_predicted: float | None
    energy_bound_ok: bool
    uniform_ok: bool
    applicable: bool | None
    checked: int

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["linf_bound_predicted"] = "not computed" if self.linf_bound_predicted is None else self.linf_bound_predicted
        return d


def linf_bound_check(
    trace: ContinuationTrace | Sequence[CriticalPoint],
    M: float,
    nl: Nonlinearity,
    kappa_lower: float | None = None,
    rel_tol: float = 1e-8,
    r: float = 0.25,
) -> BoundsReport:
    """Uniform bounds over a trace of critical points with level at most ``M``.

    (a) ``int (u-1)_+^{2*} <= N (M + |Omega|) / kappa`` at every such point;
    (b) the ratio of the largest to the smallest ``||u_j||_inf`` is at most 10.
    ``applicable`` records whether ``kappa < kappa_lower``, the regime in which
    the bound is asserted; the checks run regardless.
    """
    if nl.kind != "critical":
        raise ValueError("linf_bound_check needs the critical nonlinearity")
    points = trace.points if isinstance(trace, ContinuationTrace) else tuple(trace)
    if not points:
        raise ValueError("no points to check")
    N = nl.dim
    two_star = nl.two_star
    energy_ok = True
    checked = 0
    linfs = []
    barrier_ok = True
    for p in points:
        u = p.field
        linfs.append(float(np.abs(u.values).max()))
        barrier_ok &= barrier_check(u, nl).ok
        if p.level <= M:
            checked += 1
            lhs = integrate(np.maximum(u.values - 1.0, 0.0) ** two_star, u.grid)
            rhs = N * (M + u.grid.volume) / nl.kappa
            energy_ok &= lhs <= rhs * (1.0 + rel_tol)
    linfs = np.asarray(linfs)
    uniform = bool(linfs.min() > 0 and linfs.max() / linfs.min() <= 10.0) or bool(linfs.max() == 0)
    applicable = None if kappa_lower is None else bool(nl.kappa < kappa_lower)
    lip = max(lipschitz_diagnostic(points, r))
    return BoundsReport(float(linfs.max()), lip, bool(barrier_ok), None, bool(energy_ok), uniform, applicable, checked)


def write_trace(trace: ContinuationTrace, out_dir: str | FsPath, extra: dict | None = None, dump_fields: bool = True) -> FsPath:
    """Write ``trace.json`` (and per-step field dumps) into ``out_dir``."""
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = []
    for j, p in enumerate(trace.points):
        entry = {
            "eps": p.eps,
            "level": p.level,
            "residual_norm": p.residual_norm,
            "iterations": p.iterations,
            "nodes": list(p.field.grid.nodes),
        }
        if dump_fields:
            name = f"field_{j:02d}.txt"
            write_field(out / name, p.field)
            entry["field"] = name
        steps.append(entry)
    doc = {
        "schedule": list(trace.schedule),
        "levels": list(trace.levels),
        "minimax_level": trace.minimax_level,
        "first_step_work": trace.first_step_work,
        "metrics": {"sup_distances": list(trace.sup_distances), "h1_distances": list(trace.h1_distances)},
        "steps": steps,
    }
    if extra:
        doc.update(extra)
    path = out / "trace.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")
