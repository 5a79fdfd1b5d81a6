"""Ground states of a critical two-phase free boundary problem by
regularisation, mountain-pass minimax and eps-continuation."""

from __future__ import annotations

from .continuation import ContinuationTrace, run_continuation
from .energy import Nonlinearity, energy_J, energy_Jeps, grad_Jeps
from .grid import Field, Grid, VectorField, build_grid
from .solver import CriticalPoint, SolveConfig, estimate_c_eps, solve_critical_point
from .spectral import SpectralData, spectral_data

__all__ = [
    "ContinuationTrace",
    "CriticalPoint",
    "Field",
    "Grid",
    "Nonlinearity",
    "SolveConfig",
    "SpectralData",
    "VectorField",
    "build_grid",
    "energy_J",
    "energy_Jeps",
    "estimate_c_eps",
    "grad_Jeps",
    "run_continuation",
    "solve_critical_point",
    "spectral_data",
]
