"""Splitting at level 1, fibering curves, the Nehari-type manifold and its projection.

On the grid, ``u+`` and ``u-`` share difference stencils on edges that cross
the level 1, so the Dirichlet form picks up a cross term
``X = <grad u+, grad u->`` (nonnegative, O(h)).  The region integrals are
taken in their weak form::

    int_{u>1} |grad u|^2  :=  <grad u, grad u+>  = D(u+) + X
    int_{u<1} |grad u|^2  :=  <grad u, grad u->  = D(u-) + X

which add up to the full Dirichlet energy and make every fibering identity
exact on the grid.  With ``X = 0`` all formulas reduce to their continuum
closed forms.
"""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .energy import Nonlinearity, energy_J
from .grid import Field, dirichlet_form, integrate

__all__ = [
    "NehariError",
    "SplitField",
    "SplitIntegrals",
    "NehariPoint",
    "Path",
    "split",
    "split_integrals",
    "zeta",
    "fiber_energy",
    "s_star",
    "project",
    "fiber_profile",
    "mountain_path",
    "nehari_residual",
    "level_identity",
    "MEMBERSHIP_TOL",
]

MEMBERSHIP_TOL = 1e-8


class NehariError(ValueError):
    """The fibering curve has no interior maximum or ``u+`` vanishes."""


@dataclass(frozen=True, eq=False)
class SplitField:
    plus: Field
    minus: Field

    def reconstruct(self) -> Field:
        return self.plus + self.minus


def split(u: Field) -> SplitField:
    """``u+ = (u - 1)_+`` and ``u- = min(u, 1)``; they sum back to ``u``."""
    plus = np.maximum(u.values - 1.0, 0.0)
    # u - 1 is exact for u >= 1, so plus + minus reproduces u bit for bit
    minus = np.minimum(u.values, 1.0)
    return SplitField(Field(u.grid, plus), Field(u.grid, minus))


@dataclass(frozen=True)
class SplitIntegrals:
    """Integrals of a field's split parts that determine its whole fibering curve."""

    dirichlet_minus: float  # D(u-)
    cross: float  # X = <grad u+, grad u->
    dirichlet_plus: float  # D(u+)
    l2_plus: float  # int (u+)^2
    power_plus: float  # int (u+)^(2*)
    phase_volume: float  # |{u > 1}|
    dim: int

    @property
    def grad_below(self) -> float:
        return self.dirichlet_minus + self.cross

    @property
    def grad_above(self) -> float:
        return self.dirichlet_plus + self.cross

    def numerator(self, lam: float) -> float:
        """``int_{u>1} [|grad u|^2 - lam (u-1)^2]``."""
        return self.grad_above - lam * self.l2_plus


def split_integrals(u: Field, power: float | None = None) -> SplitIntegrals:
    g = u.grid
    parts = split(u)
    plus, minus = parts.plus.values, parts.minus.values
    power = 2.0 * g.dim / (g.dim - 2) if power is None else power
    return SplitIntegrals(
        dirichlet_minus=dirichlet_form(g, minus, minus),
        cross=dirichlet_form(g, plus, minus),
        dirichlet_plus=dirichlet_form(g, plus, plus),
        l2_plus=integrate(plus**2, g),
        power_plus=integrate(plus**power, g),
        phase_volume=integrate(np.ones(g.shape), g, u.values > 1.0),
        dim=g.dim,
    )


def zeta(u: Field, s: float) -> Field:
    """Fibering curve: ``(1+s) u-`` on ``[-1, 0]``, ``u- + s u+`` for ``s > 0``."""
    if s < -1.0:
        raise ValueError(f"zeta is defined for s >= -1, got {s}")
    parts = split(u)
    if s <= 0.0:
        return (1.0 + s) * parts.minus
    return Field(u.grid, parts.minus.values + s * parts.plus.values)


def _require_critical(nl: Nonlinearity) -> None:
    if nl.kind != "critical":
        raise ValueError("the Nehari construction needs the critical nonlinearity")


def fiber_energy(si: SplitIntegrals, s: float, nl: Nonlinearity) -> float:
    """``J(zeta_u(s))`` from the split integrals of ``u`` (no field evaluation)."""
    _require_critical(nl)
    if s < -1.0:
        raise ValueError(f"zeta is defined for s >= -1, got {s}")
    if s <= 0.0:
        return 0.5 * (1.0 + s) ** 2 * si.dirichlet_minus
    q = nl.two_star
    return (
        0.5 * si.dirichlet_minus
        + s * si.cross
        + 0.5 * s**2 * (si.dirichlet_plus - nl.lam * si.l2_plus)
        - nl.kappa * s**q / q * si.power_plus
        + si.phase_volume
    )


def _fiber_slope(si: SplitIntegrals, nl: Nonlinearity):
    """``d/ds J(zeta_u(s))`` for ``s > 0``."""
    q = nl.two_star
    p2 = si.dirichlet_plus - nl.lam * si.l2_plus
    kq = nl.kappa * si.power_plus
    return lambda s: si.cross + s * p2 - kq * s ** (q - 1.0)


def _s_star_from(si: SplitIntegrals, nl: Nonlinearity) -> float:
    kq = nl.kappa * si.power_plus
    if not kq > 0.0:
        raise NehariError("u+ vanishes: no phase region {u > 1}")
    if si.numerator(nl.lam) <= 0.0:
        raise NehariError("fiber has no interior maximum (nonpositive numerator)")
    p2 = si.dirichlet_plus - nl.lam * si.l2_plus
    if si.cross <= 0.0:
        return (p2 / kq) ** ((nl.dim - 2) / 4.0)
    slope = _fiber_slope(si, nl)
    # concave in s with slope(0) = X > 0: a single positive root
    hi = max(1.0, (max(p2, 0.0) / kq) ** ((nl.dim - 2) / 4.0) if p2 > 0 else 1.0)
    while slope(hi) > 0.0:
        hi *= 2.0
    lo = hi / 2.0
    while lo > 1e-300 and slope(lo) < 0.0:
        lo /= 2.0
    return brentq(slope, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def s_star(u: Field, nl: Nonlinearity) -> float:
    """Scale ``s_u`` at which ``s -> J(zeta_u(s))`` peaks (``s_u = 1`` on the manifold).

    Closed form ``[numerator / (kappa int (u+)^(2*))]^((N-2)/4)`` when the
    cross term vanishes; otherwise the unique positive root of the fiber slope.
    """
    _require_critical(nl)
    return _s_star_from(split_integrals(u, nl.two_star), nl)


@dataclass(frozen=True, eq=False)
class NehariPoint:
    field: Field
    residual: float
    energy: float

    @property
    def on_manifold(self) -> bool:
        return self.residual <= MEMBERSHIP_TOL


def nehari_residual(u: Field, nl: Nonlinearity) -> float:
    """Normalised defect ``|num - kappa int (u+)^(2*)| / max(1, kappa int (u+)^(2*))``.

    Returns ``inf`` when ``{u > 1}`` is empty (not on the manifold).
    """
    _require_critical(nl)
    si = split_integrals(u, nl.two_star)
    kq = nl.kappa * si.power_plus
    if not kq > 0.0:
        return math.inf
    return abs(si.numerator(nl.lam) - kq) / max(1.0, kq)


def level_identity(u: Field, nl: Nonlinearity) -> float:
    """Right side of ``J(u) = 1/2 int_{u<1}|grad u|^2 + (1/N) num + |{u>1}|`` (valid on M)."""
    _require_critical(nl)
    si = split_integrals(u, nl.two_star)
    return 0.5 * si.grad_below + si.numerator(nl.lam) / si.dim + si.phase_volume


def projected_level(si: SplitIntegrals, s: float, nl: Nonlinearity) -> float:
    """``J(pi(u))`` written through the split integrals of ``u`` and ``s = s_u``."""
    p2 = si.dirichlet_plus - nl.lam * si.l2_plus
    return 0.5 * (si.dirichlet_minus + s * si.cross) + (s * si.cross + s**2 * p2) / si.dim + si.phase_volume


def project(u: Field, nl: Nonlinearity) -> NehariPoint:
    """``pi(u) = u- + s_u u+``."""
    s = s_star(u, nl)
    v = zeta(u, s)
    return NehariPoint(v, nehari_residual(v, nl), energy_J(v, nl).total)


def fiber_profile(u: Field, nl: Nonlinearity, s_grid: Sequence[float]) -> list[tuple[float, float]]:
    si = split_integrals(u, nl.two_star)
    return [(float(s), fiber_energy(si, float(s), nl)) for s in s_grid]


@dataclass(frozen=True, eq=False)
class Path:
    times: np.ndarray
    samples: tuple[Field, ...]
    levels: np.ndarray

    def __post_init__(self):
        if len(self.samples) != len(self.times) or len(self.levels) != len(self.times):
            raise ValueError("path arrays must have equal length")
        if self.times[0] != 0.0 or self.times[-1] != 1.0:
            raise ValueError("path must be parametrised on [0, 1]")

    @property
    def max_level(self) -> float:
        return float(np.max(self.levels))

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.levels))


def mountain_path(point: NehariPoint | Field, nl: Nonlinearity, samples: int = 16, max_doublings: int = 60) -> Path:
    """Path ``t -> zeta_u((s0 + 1) t - 1)`` from 0 through ``u`` to negative energy.

    ``s0`` doubles from 2 until ``J(zeta_u(s0)) < 0``.  The sample at
    ``t = 2 / (s0 + 1)`` is ``u`` itself, where the path attains its maximum.
    """
    u = point.field if isinstance(point, NehariPoint) else point
    si = split_integrals(u, nl.two_star)
    s0 = 2.0
    for _ in range(max_doublings):
        if fiber_energy(si, s0, nl) < 0.0:
            break
        s0 *= 2.0
    else:
        raise NehariError(f"no negative fiber energy found up to s = {s0}")
    t_u = 2.0 / (s0 + 1.0)
    times = np.union1d(np.linspace(0.0, 1.0, samples + 1), [t_u])
    fields = []
    levels = []
    for t in times:
        s = (s0 + 1.0) * t - 1.0
        v = u if t == t_u else zeta(u, max(s, -1.0))
        fields.append(v)
        levels.append(energy_J(v, nl).total)
    return Path(times, tuple(fields), np.asarray(levels))
