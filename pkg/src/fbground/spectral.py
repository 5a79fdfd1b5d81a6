"""Principal Dirichlet eigenpair, Sobolev constant and the derived thresholds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate as quad_integrate
from scipy.optimize import minimize_scalar
from scipy.special import gammaln

from .grid import Field, Grid, dirichlet_form, integrate, neg_laplacian_interior, poisson_solve

__all__ = [
    "SpectralData",
    "principal_eigen",
    "sobolev_constant",
    "kappa_thresholds",
    "rho_radius",
    "mpass_upper_bound",
    "mpass_integrand",
    "spectral_data",
]


def principal_eigen(grid: Grid, tol: float = 1e-10, maxiter: int = 2000) -> tuple[float, Field]:
    """First eigenpair of the discrete Dirichlet ``-Laplacian`` by inverse iteration.

    Stops once ``|-Lap phi - lambda phi|_2 <= tol |phi|_2``; ``phi`` is
    positive inside and L^2-normalised.
    """
    phi = np.zeros(grid.shape)
    phi[grid.interior] = 1.0
    for _ in range(maxiter):
        phi = poisson_solve(grid, phi)
        phi /= math.sqrt(integrate(phi**2, grid))
        lam = dirichlet_form(grid, phi, phi)
        res = neg_laplacian_interior(phi, grid.spacing) - lam * phi[grid.interior]
        if math.sqrt(np.sum(res**2) * grid.cell_volume) <= tol:
            break
    else:
        raise RuntimeError(f"inverse iteration did not converge in {maxiter} steps")
    phi = phi * np.sign(phi[grid.interior].sum())
    return float(lam), Field(grid, phi)


def sobolev_constant(dim: int, rtol: float = 1e-10) -> float:
    """Best constant of ``|grad u|_2^2 >= S |u|_{2*}^2`` via the Aubin-Talenti bubble.

    Evaluates the Rayleigh quotient of ``(1 + r^2)^(-(N-2)/2)`` by radial
    quadrature over ``[0, inf)``.
    """
    if dim < 3:
        raise ValueError("the Sobolev constant is defined here for dim >= 3")
    n = dim
    q = 2.0 * n / (n - 2)
    log_sphere = math.log(2.0) + 0.5 * n * math.log(math.pi) - gammaln(0.5 * n)

    def grad_sq(r):
        # U'(r) = -(N-2) r (1 + r^2)^(-N/2)
        return (n - 2) ** 2 * r**2 * (1.0 + r * r) ** (-n) * r ** (n - 1)

    def power(r):
        return (1.0 + r * r) ** (-n) * r ** (n - 1)

    kw = dict(epsabs=0.0, epsrel=rtol, limit=500)
    num = sum(quad_integrate.quad(grad_sq, a, b, **kw)[0] for a, b in ((0, 1), (1, math.inf)))
    den = sum(quad_integrate.quad(power, a, b, **kw)[0] for a, b in ((0, 1), (1, math.inf)))
    sphere = math.exp(log_sphere)
    return sphere * num / (sphere * den) ** (2.0 / q)


def kappa_thresholds(M: float, volume: float, dim: int, S: float) -> tuple[float, float]:
    """``kappa^* = [S^(N/2) / (N (M + |Omega|))]^(2/(N-2))`` and ``kappa_* = (1 - 4/N^2)^(N/(N-2)) kappa^*``."""
    if not (M > 0 and volume > 0 and S > 0):
        raise ValueError("kappa thresholds need positive M, volume and S")
    if dim < 3:
        raise ValueError("dim must be >= 3")
    upper = (S ** (dim / 2) / (dim * (M + volume))) ** (2.0 / (dim - 2))
    lower = (1.0 - 4.0 / dim**2) ** (dim / (dim - 2)) * upper
    return upper, lower


def rho_radius(dim: int, lam: float, kappa: float, S: float) -> tuple[float, float]:
    """Radius below which ``J_eps(u) >= |u|^2 / 3``, and the floor ``rho^2 / 3``.

    ``rho`` solves ``rho^2/2 - (lam/2 + kappa/2*) S^(-N/(N-2)) rho^(2*) = rho^2/3``.
    """
    q = 2.0 * dim / (dim - 2)
    coef = lam / 2.0 + kappa / q
    rho = (S ** (dim / (dim - 2)) / (6.0 * coef)) ** ((dim - 2) / 4.0)
    return rho, rho**2 / 3.0


def mpass_integrand(t: float, lam: float, lambda1: float, phi1: Field) -> float:
    """``int [lambda1 t^2 phi1^2 / 2 + 1 - lam (t phi1 - 1)_+^2 / 2]``."""
    g = phi1.grid
    v = phi1.values
    return integrate(0.5 * lambda1 * t * t * v * v + 1.0 - 0.5 * lam * np.maximum(t * v - 1.0, 0.0) ** 2, g)


def mpass_upper_bound(lam: float, lambda1: float, phi1: Field, tol: float = 1e-12) -> float:
    """``M_lam = sup_{t >= 0}`` of :func:`mpass_integrand`; ``inf`` when ``lam <= lambda1``."""
    if lam <= lambda1:
        return math.inf
    m = lambda t: mpass_integrand(t, lam, lambda1, phi1)
    # bracket: the integrand is a quadratic for t <= 1/max(phi1) and eventually decreasing
    t_lo = 0.0
    t_hi = 1.0 / float(phi1.values.max())
    while m(2.0 * t_hi) >= m(t_hi):
        t_lo = t_hi
        t_hi *= 2.0
        if t_hi > 1e12:
            raise RuntimeError("failed to bracket the maximum of the mountain-pass integrand")
    t_top = 2.0 * t_hi
    res = minimize_scalar(lambda t: -m(t), bracket=(t_lo, t_hi, t_top), method="golden", tol=tol)
    if not res.success and res.nit == 0:
        raise RuntimeError("golden-section search failed")
    return max(float(-res.fun), m(0.0))


@dataclass(frozen=True, eq=False)
class SpectralData:
    lambda1: float
    phi1: Field
    S: float
    kappa_star_upper: float
    kappa_star_lower: float
    rho: float
    M_lambda: float
    lam: float
    kappa: float
    lambda_star: float

    @property
    def level_floor(self) -> float:
        return self.rho**2 / 3.0

    def as_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "S": self.S,
            "kappa_star_upper": self.kappa_star_upper,
            "kappa_star_lower": self.kappa_star_lower,
            "rho": self.rho,
            "level_floor": self.level_floor,
            "M_lambda": self.M_lambda if math.isfinite(self.M_lambda) else None,
            "M_lambda_finite": math.isfinite(self.M_lambda),
            "lambda": self.lam,
            "kappa": self.kappa,
            "lambda_star": self.lambda_star,
        }


def spectral_data(
    grid: Grid,
    lambda_factor: float,
    kappa_fraction: float | None = None,
    kappa: float | None = None,
    lambda_star_factor: float = 1.25,
    M_override: float | None = None,
) -> SpectralData:
    """Assemble the constants for ``lam = lambda_factor * lambda1``.

    ``M`` in the kappa thresholds is ``M_{lambda*}`` with
    ``lambda* = lambda_star_factor * lambda1`` unless overridden.  Exactly one
    of ``kappa_fraction`` (of ``kappa_*``) or ``kappa`` must be given.
    """
    if (kappa_fraction is None) == (kappa is None):
        raise ValueError("give exactly one of kappa_fraction or kappa")
    lambda1, phi1 = principal_eigen(grid)
    S = sobolev_constant(grid.dim)
    lam = lambda_factor * lambda1
    lam_star = lambda_star_factor * lambda1
    M = M_override if M_override is not None else mpass_upper_bound(lam_star, lambda1, phi1)
    if math.isfinite(M):
        upper, lower = kappa_thresholds(M, grid.volume, grid.dim, S)
    else:
        upper = lower = 0.0
    if kappa is None:
        kappa = kappa_fraction * lower
    rho, _ = rho_radius(grid.dim, lam, kappa, S) if kappa > 0 else (math.nan, math.nan)
    return SpectralData(lambda1, phi1, S, upper, lower, rho, M, lam, kappa, lam_star)
