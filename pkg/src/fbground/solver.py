"""Critical points of J_eps: damped Newton on the Euler-Lagrange residual and a
minimax search for the mountain-pass level."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.sparse.linalg import LinearOperator, gmres

from .energy import KERNEL, Nonlinearity, energy_Jeps, grad_Jeps
from .grid import Field, Grid, dirichlet_form, neg_laplacian_interior, poisson_solve
from .nehari import Path

__all__ = [
    "SolveConfig",
    "SolverError",
    "CriticalPoint",
    "MountainPassEstimate",
    "PSReport",
    "el_residual",
    "apply_jacobian",
    "solve_critical_point",
    "estimate_c_eps",
    "ps_diagnostic",
    "write_history_csv",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolveConfig:
    tol: float = 1e-9
    max_newton: int = 60
    backtrack: float = 0.5
    max_sweeps: int = 400
    samples: int = 16
    sweep_tol: float = 1e-8
    min_step: float = 1e-6
    linear_rtol: float = 1e-10

    def __post_init__(self):
        for name in ("tol", "max_newton", "max_sweeps", "samples", "sweep_tol", "min_step", "linear_rtol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"SolveConfig.{name} must be positive")
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("SolveConfig.backtrack must lie in (0, 1)")
        if self.samples < 8:
            raise ValueError("SolveConfig.samples must be at least 8")


class SolverError(RuntimeError):
    """Raised on non-convergence; carries the last iterate and residual history."""

    def __init__(self, message: str, last: Field | None = None, history: Sequence[tuple[float, float]] = ()):
        super().__init__(message)
        self.last = last
        self.history = list(history)


@dataclass(frozen=True, eq=False)
class CriticalPoint:
    field: Field
    eps: float
    level: float
    residual_norm: float
    iterations: int
    history: tuple[tuple[float, float], ...] = ()

    @property
    def min_value(self) -> float:
        return float(self.field.values.min())


def el_residual(u: Field, eps: float, nl: Nonlinearity) -> Field:
    """Residual of ``-Lap u = -beta((u-1)/eps)/eps + f(u-1)`` (the gradient of J_eps)."""
    return grad_Jeps(u, eps, nl)


def _jacobian_diagonal(inner: np.ndarray, eps: float, nl: Nonlinearity) -> np.ndarray:
    return KERNEL.dbeta((inner - 1.0) / eps) / eps**2 - nl.df(inner - 1.0)


def apply_jacobian(u: Field, eps: float, nl: Nonlinearity, v: Field) -> Field:
    """Derivative of :func:`el_residual` at ``u`` applied to ``v``."""
    diag = _jacobian_diagonal(u.interior, eps, nl)
    out = neg_laplacian_interior(v.values, u.grid.spacing) + diag * v.interior
    return Field.from_interior(u.grid, out)


def _l2(grid: Grid, interior: np.ndarray) -> float:
    return math.sqrt(float(np.sum(interior**2)) * grid.cell_volume)


def _newton_direction(grid: Grid, diag: np.ndarray, rhs: np.ndarray, rtol: float) -> np.ndarray:
    shape = rhs.shape
    n = rhs.size
    full = np.zeros(grid.shape)

    def matvec(x):
        full[grid.interior] = x.reshape(shape)
        return (neg_laplacian_interior(full, grid.spacing) + diag * x.reshape(shape)).ravel()

    def precond(x):
        return poisson_solve(grid, x.reshape(shape))[grid.interior].ravel()

    A = LinearOperator((n, n), matvec=matvec, dtype=float)
    M = LinearOperator((n, n), matvec=precond, dtype=float)
    sol, info = gmres(A, rhs.ravel(), M=M, rtol=rtol, atol=0.0, restart=80, maxiter=10)
    if info < 0:
        raise SolverError("linear solve broke down")
    return sol.reshape(shape)


def solve_critical_point(init: Field, eps: float, nl: Nonlinearity, cfg: SolveConfig = SolveConfig()) -> CriticalPoint:
    """Damped Newton iteration for ``el_residual(u) = 0`` started at ``init``.

    Steps are GMRES solves of the Jacobian system preconditioned by the exact
    Poisson solver; the line search backtracks on the residual L^2 norm.
    Raises :class:`SolverError` on non-convergence or if the converged field
    dips below ``-1e-12`` (the maximum principle is checked, never enforced).
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grid = init.grid
    u = init
    history: list[tuple[float, float]] = []
    res = el_residual(u, eps, nl).interior
    rn = _l2(grid, res)
    for it in range(cfg.max_newton + 1):
        history.append((energy_Jeps(u, eps, nl).total, rn))
        log.debug("newton eps=%g it=%d level=%.12g residual=%.3e", eps, it, history[-1][0], rn)
        if rn <= cfg.tol:
            break
        if it == cfg.max_newton:
            raise SolverError(f"Newton did not converge in {cfg.max_newton} iterations (residual {rn:.3e})", u, history)
        diag = _jacobian_diagonal(u.interior, eps, nl)
        rtol = max(cfg.linear_rtol, min(1e-4, 0.1 * rn))
        step = _newton_direction(grid, diag, -res, rtol)
        s = 1.0
        best = None
        while s >= cfg.min_step:
            trial = Field.from_interior(grid, u.interior + s * step)
            tres = el_residual(trial, eps, nl).interior
            tn = _l2(grid, tres)
            if best is None or tn < best[2]:
                best = (trial, tres, tn)
            if tn <= (1.0 - 1e-4 * s) * rn:
                break
            s *= cfg.backtrack
        if best is None or not best[2] < rn:
            raise SolverError(f"line search stalled at residual {rn:.3e}", u, history)
        u, res, rn = best
    if float(u.values.min()) < -1e-12:
        raise SolverError(f"maximum principle violated: min u = {u.values.min():.3e}", u, history)
    return CriticalPoint(u, float(eps), history[-1][0], rn, len(history) - 1, tuple(history))


@dataclass(frozen=True, eq=False)
class MountainPassEstimate:
    """Outcome of :func:`estimate_c_eps`.

    ``level`` is the minimax value over the deformed path family; ``gap`` is
    ``level - candidate.level`` (any discrete path family only bounds the
    true mountain-pass level from above).
    """

    path: Path
    level: float
    candidate: CriticalPoint
    sweep_levels: tuple[float, ...]
    direction: Field

    @property
    def gap(self) -> float:
        return self.level - self.candidate.level

    def __iter__(self):
        return iter((self.path, self.level, self.candidate))


def _h1(grid: Grid, values: np.ndarray) -> float:
    return math.sqrt(max(dirichlet_form(grid, values, values), 0.0))


def _ray_end(v: Field, eps: float, nl: Nonlinearity, max_doublings: int = 60) -> float:
    t = 1.0
    for _ in range(max_doublings):
        if energy_Jeps(t * v, eps, nl).total < 0.0:
            return t
        t *= 2.0
    raise SolverError("lambda too small: no negative energy found along the ray")


def _ray_max(v: Field, eps: float, nl: Nonlinearity, scan: int = 40) -> tuple[float, float, float]:
    """``(t*, J_eps(t* v), t_end)`` with ``J_eps(t_end v) < 0``."""
    t_end = _ray_end(v, eps, nl)
    ts = np.linspace(0.0, t_end, scan + 1)
    levels = [energy_Jeps(t * v, eps, nl).total for t in ts]
    i = int(np.argmax(levels))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, scan)]
    res = minimize_scalar(lambda t: -energy_Jeps(t * v, eps, nl).total, bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-11 * t_end})
    if -res.fun >= levels[i]:
        return float(res.x), float(-res.fun), t_end
    return float(ts[i]), float(levels[i]), t_end


def estimate_c_eps(
    nl: Nonlinearity,
    eps: float,
    grid: Grid,
    cfg: SolveConfig = SolveConfig(),
    direction: Field | None = None,
) -> MountainPassEstimate:
    """Mountain-pass level of J_eps over deformed rays ``t -> t v``.

    Starts from the ray through ``direction`` (default: the principal
    eigenfunction), then deforms the ray direction by Sobolev-gradient descent
    of ``v -> max_t J_eps(t v)``: at the ray maximum ``w`` the H^1 gradient is
    orthogonal to the ray, so each sweep lowers the path maximum while the
    endpoint stays in ``{J_eps < 0}``.  The final maximiser is refined by
    :func:`solve_critical_point`.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if direction is None:
        from .spectral import principal_eigen

        direction = principal_eigen(grid)[1]
    v = direction * (1.0 / _h1(grid, direction.values))
    t, level, _ = _ray_max(v, eps, nl)
    sweep_levels = [level]
    step = 1.0
    for sweep in range(cfg.max_sweeps):
        w = t * v
        d = poisson_solve(grid, grad_Jeps(w, eps, nl).values)
        dn2 = dirichlet_form(grid, d, d)
        if math.sqrt(max(dn2, 0.0)) <= cfg.tol:
            break
        while True:
            trial = v.values - (step / t) * d
            trial = trial / _h1(grid, trial)
            vt = Field(grid, trial)
            tt, lt, _ = _ray_max(vt, eps, nl)
            if lt <= level - 1e-4 * step * dn2 or step < 1e-10:
                break
            step *= 0.5
        change = level - lt
        v, t, level = vt, tt, min(lt, level)
        sweep_levels.append(level)
        log.debug("sweep %d level=%.12g |d|=%.3e step=%g", sweep, level, math.sqrt(dn2), step)
        step = min(1.0, 2.0 * step)
        if 0.0 <= change < cfg.sweep_tol:
            break
    t_end = _ray_end(v, eps, nl)
    times = np.union1d(np.linspace(0.0, 1.0, cfg.samples + 1), [t / t_end])
    samples = tuple((tau * t_end) * v for tau in times)
    levels = np.array([energy_Jeps(s, eps, nl).total for s in samples])
    path = Path(times, samples, levels)
    candidate = solve_critical_point(t * v, eps, nl, cfg)
    return MountainPassEstimate(path, float(path.max_level), candidate, tuple(sweep_levels), v)


@dataclass(frozen=True)
class PSReport:
    stalled: bool
    message: str
    kappa_below_threshold: bool | None
    warnings: tuple[str, ...] = ()


def ps_diagnostic(
    history: Sequence[tuple[float, float]],
    kappa: float | None = None,
    kappa_upper: float | None = None,
    window: int = 50,
    stall_ratio: float = 0.9,
) -> PSReport:
    """Flag residuals that stagnate at bounded levels (a numerical Palais-Smale failure).

    A window of ``window`` consecutive entries whose best residual is not
    below ``stall_ratio`` times the residual entering the window counts as a
    stall.  With ``kappa`` and ``kappa_upper`` given, also reports whether the
    compactness threshold is respected.
    """
    levels = np.array([h[0] for h in history], dtype=float)
    res = np.array([h[1] for h in history], dtype=float)
    stalled = False
    if len(res) >= window and np.all(np.isfinite(levels)):
        for i in range(len(res) - window + 1):
            if res[i + 1 : i + window].min(initial=res[i]) >= stall_ratio * res[i]:
                stalled = True
                break
    warnings = []
    below = None
    if kappa is not None and kappa_upper is not None:
        below = kappa < kappa_upper
        if not below:
            warnings.append("compactness threshold exceeded")
    msg = "residual stagnation at bounded level" if stalled else "no PS obstruction observed"
    return PSReport(stalled, msg, below, tuple(warnings))


def write_history_csv(path, history: Sequence[tuple[float, float]]) -> None:
    """Write ``(level, residual_norm)`` pairs as CSV with an iteration column."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "level", "residual_norm"])
        for i, (level, res) in enumerate(history):
            w.writerow([i, repr(float(level)), repr(float(res))])
