"""Smoothing kernel, admissible nonlinearities and the energies J, J_eps."""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .grid import Field, dirichlet_form, integrate, neg_laplacian_interior

__all__ = [
    "SmoothingKernel",
    "KERNEL",
    "beta_eval",
    "bigB_eval",
    "Nonlinearity",
    "EnergyReport",
    "critical_exponent",
    "energy_J",
    "energy_Jeps",
    "grad_Jeps",
    "energy_gap",
]


def critical_exponent(dim: int) -> float:
    """``2* = 2N / (N - 2)``."""
    return 2.0 * dim / (dim - 2)


class SmoothingKernel:
    """``beta(t) = 30 t^2 (1-t)^2`` on ``[0, 1]``; ``B`` is its primitive from 0.

    ``beta`` peaks at 1.875, integrates to 1 and is C^1, so ``B`` is the
    closed-form quintic ``t^3 (10 - 15 t + 6 t^2)`` clamped to ``[0, 1]``.
    """

    peak = 1.875

    @staticmethod
    def beta(t):
        t = np.asarray(t, dtype=float)
        inside = (t > 0.0) & (t < 1.0)
        return np.where(inside, 30.0 * t**2 * (1.0 - t) ** 2, 0.0)

    @staticmethod
    def dbeta(t):
        t = np.asarray(t, dtype=float)
        inside = (t > 0.0) & (t < 1.0)
        return np.where(inside, 60.0 * t * (1.0 - t) * (1.0 - 2.0 * t), 0.0)

    @staticmethod
    def B(t):
        tc = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
        return tc**3 * (10.0 - 15.0 * tc + 6.0 * tc**2)


KERNEL = SmoothingKernel()


def beta_eval(t):
    out = KERNEL.beta(t)
    return float(out) if np.ndim(out) == 0 else out


def bigB_eval(t):
    out = KERNEL.B(t)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class Nonlinearity:
    """Right-hand side ``f`` with primitive ``F`` (both vanish for ``t <= 0``).

    Build with :meth:`critical`, :meth:`subcritical` or :meth:`custom`.
    ``C`` is a growth constant with ``|f(t)| <= C (t^(2*-1) + 1)``.
    """

    kind: str
    dim: int
    lam: float = 0.0
    kappa: float = 0.0
    p: float | None = None
    C: float = 0.0
    _f: Callable | None = field(default=None, repr=False, compare=False)
    _F: Callable | None = field(default=None, repr=False, compare=False)
    _df: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 3:
            raise ValueError("nonlinearities are defined for dim >= 3")
        if self.kind == "critical":
            if not (self.lam > 0 and self.kappa > 0):
                raise ValueError("critical nonlinearity needs lambda > 0 and kappa > 0")
        elif self.kind == "subcritical":
            if self.p is None or not (2.0 < self.p < critical_exponent(self.dim)):
                raise ValueError(f"subcritical exponent must lie in (2, 2*), got {self.p}")
        elif self.kind == "custom":
            if self._f is None or self._F is None:
                raise ValueError("custom nonlinearity needs f and F")
        else:
            raise ValueError(f"unknown nonlinearity kind {self.kind!r}")
        self._validate()

    @classmethod
    def critical(cls, lam: float, kappa: float, dim: int = 3) -> "Nonlinearity":
        return cls("critical", dim, float(lam), float(kappa), C=max(lam, kappa) + lam)

    @classmethod
    def subcritical(cls, lam: float, kappa: float, p: float, dim: int = 3) -> "Nonlinearity":
        return cls("subcritical", dim, float(lam), float(kappa), float(p), C=abs(lam) + abs(kappa))

    @classmethod
    def custom(cls, f: Callable, F: Callable, C: float, dim: int = 3, df: Callable | None = None) -> "Nonlinearity":
        return cls("custom", dim, C=float(C), _f=f, _F=F, _df=df)

    @property
    def two_star(self) -> float:
        return critical_exponent(self.dim)

    @property
    def power(self) -> float:
        """Exponent of the ``kappa`` term in ``F`` (``2*`` or ``p``)."""
        return self.two_star if self.kind == "critical" else float(self.p)

    def f(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "custom":
            return np.where(t > 0.0, self._f(np.maximum(t, 0.0)), 0.0)
        tp = np.maximum(t, 0.0)
        return self.lam * tp + self.kappa * tp ** (self.power - 1.0)

    def F(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind == "custom":
            return np.where(t > 0.0, self._F(np.maximum(t, 0.0)), 0.0)
        tp = np.maximum(t, 0.0)
        return 0.5 * self.lam * tp**2 + self.kappa * tp**self.power / self.power

    def df(self, t):
        """Derivative of ``f``; one-sided (left) value 0 at ``t = 0``."""
        t = np.asarray(t, dtype=float)
        pos = t > 0.0
        tp = np.maximum(t, 0.0)
        if self.kind == "custom":
            if self._df is not None:
                return np.where(pos, self._df(tp), 0.0)
            step = 1e-7 * np.maximum(1.0, tp)
            return np.where(pos, (self._f(tp + step) - self._f(np.maximum(tp - step, 0.0))) / (tp + step - np.maximum(tp - step, 0.0)), 0.0)
        q = self.power - 1.0
        return np.where(pos, self.lam + self.kappa * q * tp ** (q - 1.0), 0.0)

    def _validate(self):
        neg = -np.logspace(-6, 3, 200)
        if np.any(self.f(neg) != 0.0) or np.any(self.F(neg) != 0.0):
            raise ValueError("(f1) violated: f must vanish for t <= 0")
        pos = np.logspace(-6, 3, 400)
        ratio = np.abs(self.f(pos)) / (pos ** (self.two_star - 1.0) + 1.0)
        if np.any(ratio > self.C * (1 + 1e-12)):
            raise ValueError(f"(f2) violated: growth exceeds C = {self.C}")


@dataclass(frozen=True)
class EnergyReport:
    total: float
    dirichlet: float
    phase: float
    potential: float


def energy_J(u: Field, nl: Nonlinearity) -> EnergyReport:
    """``int 1/2 |grad u|^2 + chi{u > 1} - F(u - 1)`` (strict node predicate)."""
    g = u.grid
    dirichlet = 0.5 * dirichlet_form(g, u.values, u.values)
    phase = integrate(np.ones(g.shape), g, u.values > 1.0)
    potential = integrate(nl.F(u.values - 1.0), g)
    return EnergyReport(dirichlet + phase - potential, dirichlet, phase, potential)


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")


def energy_Jeps(u: Field, eps: float, nl: Nonlinearity) -> EnergyReport:
    _check_eps(eps)
    g = u.grid
    dirichlet = 0.5 * dirichlet_form(g, u.values, u.values)
    phase = integrate(KERNEL.B((u.values - 1.0) / eps), g)
    potential = integrate(nl.F(u.values - 1.0), g)
    return EnergyReport(dirichlet + phase - potential, dirichlet, phase, potential)


def grad_Jeps(u: Field, eps: float, nl: Nonlinearity) -> Field:
    """Strong-form residual ``-Lap u + beta((u-1)/eps)/eps - f(u-1)`` at interior nodes.

    Its trapezoid pairing with a boundary-vanishing ``v`` is exactly the
    directional derivative of :func:`energy_Jeps`.
    """
    _check_eps(eps)
    g = u.grid
    inner = u.interior
    res = neg_laplacian_interior(u.values, g.spacing)
    res += KERNEL.beta((inner - 1.0) / eps) / eps - nl.f(inner - 1.0)
    return Field.from_interior(g, res)


def energy_gap(u: Field, eps: float, nl: Nonlinearity) -> float:
    """``J_eps(u) - J_eps'(u) u+ / 2 + |Omega| - (kappa/N) int (u+)^(2*)``.

    Nonnegative for every field; on the grid the bound holds exactly because
    the edge form satisfies ``(Du)(Du+) <= (Du)^2`` edgewise.
    """
    if nl.kind != "critical":
        raise ValueError("the bound is specific to the critical nonlinearity")
    g = u.grid
    uplus = np.maximum(u.values - 1.0, 0.0)
    jeps = energy_Jeps(u, eps, nl).total
    dj_uplus = integrate(grad_Jeps(u, eps, nl).values * uplus, g)
    lhs = nl.kappa / nl.dim * integrate(uplus**nl.two_star, g)
    return jeps - 0.5 * dj_uplus + g.volume - lhs


def f2_ratio_max(nl: Nonlinearity, t_max: float = 1e3) -> float:
    """Largest sampled ``|f(t)| / (t^(2*-1) + 1)`` on ``(0, t_max]``."""
    t = np.logspace(-6, math.log10(t_max), 400)
    return float(np.max(np.abs(nl.f(t)) / (t ** (nl.two_star - 1.0) + 1.0)))
