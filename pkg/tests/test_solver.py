from __future__ import annotations

import csv

import numpy as np
import pytest

from conftest import bump_field, random_field, unit_grid
from fbground.energy import Nonlinearity, energy_J, energy_Jeps
from fbground.grid import Field, laplacian, poisson_solve
from fbground.nehari import project
from fbground.solver import (
    CriticalPoint,
    SolveConfig,
    SolverError,
    apply_jacobian,
    el_residual,
    estimate_c_eps,
    ps_diagnostic,
    solve_critical_point,
    write_history_csv,
)
from fbground.spectral import spectral_data

EPS = 0.1


@pytest.fixture(scope="module")
def problem():
    g = unit_grid(33)
    sd = spectral_data(g, 1.5, kappa_fraction=0.5)
    nl = Nonlinearity.critical(sd.lam, sd.kappa, 3)
    return g, sd, nl


@pytest.fixture(scope="module")
def estimate(problem):
    g, sd, nl = problem
    return estimate_c_eps(nl, EPS, g)


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(samples=4)
    with pytest.raises(ValueError):
        SolveConfig(tol=0.0)
    with pytest.raises(ValueError):
        SolveConfig(backtrack=1.5)
    assert SolveConfig().tol == 1e-9 and SolveConfig().samples >= 8


def test_residual_of_zero_field(problem):
    g, _, nl = problem
    assert np.all(el_residual(g.zeros(), EPS, nl).values == 0.0)


def test_residual_is_laplacian_below_the_layer(problem):
    g, _, nl = problem
    u = Field(g, 0.5 * poisson_solve(g, np.ones(g.shape)) / poisson_solve(g, np.ones(g.shape)).max())
    assert u.values.max() <= 1 - EPS
    assert np.allclose(el_residual(u, EPS, nl).values, -laplacian(u).values, atol=1e-12)


def test_trivial_initial_guess_is_a_critical_point(problem):
    g, _, nl = problem
    cp = solve_critical_point(g.zeros(), EPS, nl)
    assert cp.level == 0.0 and cp.residual_norm == 0.0 and cp.iterations == 0
    assert np.all(cp.field.values == 0.0)


def test_projected_bump_converges_to_nontrivial_point(problem):
    g, sd, nl = problem
    init = project(bump_field(g, 4.0), nl).field
    cp = solve_critical_point(init, EPS, nl)
    assert isinstance(cp, CriticalPoint)
    assert cp.residual_norm <= SolveConfig().tol
    assert cp.min_value >= -1e-12
    assert cp.level == pytest.approx(energy_Jeps(cp.field, EPS, nl).total, rel=1e-14)
    assert sd.level_floor - 1e-6 < cp.level < sd.M_lambda + 1e-6
    assert cp.field.values.max() > 1.0


def test_newton_residuals_decrease_monotonically(estimate):
    res = [r for _, r in estimate.candidate.history]
    assert all(b < a for a, b in zip(res, res[1:]))


def test_jacobian_matches_finite_differences(estimate, problem):
    g, _, nl = problem
    u = estimate.candidate.field
    rng = np.random.default_rng(3)
    tau = 1e-6
    for _ in range(10):
        v = random_field(g, rng, offset=-0.5, scale=1.0)
        fd = (el_residual(u + tau * v, EPS, nl).values - el_residual(u - tau * v, EPS, nl).values) / (2 * tau)
        an = apply_jacobian(u, EPS, nl, v).values
        assert np.linalg.norm(fd - an) <= 1e-4 * np.linalg.norm(an)


def test_minimax_estimate_brackets_and_monotone(estimate, problem):
    g, sd, nl = problem
    path, level, cand = estimate
    assert sd.level_floor - 1e-6 <= level <= sd.M_lambda + 1e-6
    assert np.all(np.diff(estimate.sweep_levels) <= 0.0)
    assert np.all(path.samples[0].values == 0.0)
    assert path.levels[-1] < 0.0
    assert len(path.samples) >= SolveConfig().samples + 1
    assert level <= max(energy_J(s, nl).total for s in path.samples)
    assert cand.residual_norm <= SolveConfig().tol
    # any discrete family only bounds the minimax level from above
    assert estimate.gap >= -1e-8


def test_solution_is_symmetric_under_axis_permutations(estimate):
    u = estimate.candidate.field.values
    for perm in ((1, 0, 2), (2, 1, 0), (0, 2, 1), (1, 2, 0)):
        assert np.abs(u - np.transpose(u, perm)).max() < 1e-8


def test_warm_started_halving_changes_level_less(problem, estimate):
    g, _, nl = problem
    cp2 = solve_critical_point(estimate.candidate.field, EPS / 2, nl)
    cp4 = solve_critical_point(cp2.field, EPS / 4, nl) if EPS / 4 >= 2 * g.max_spacing else None
    assert cp2.iterations <= estimate.candidate.iterations + len(estimate.sweep_levels)
    assert abs(cp2.level - estimate.candidate.level) < 0.05 * abs(estimate.candidate.level)
    if cp4 is not None:
        assert abs(cp4.level - cp2.level) < abs(cp2.level - estimate.candidate.level)


def test_positive_energy_ray_reports_small_lambda():
    g = unit_grid(9)
    lam = 5.0  # well below the first eigenvalue (about 29.6)
    linear = Nonlinearity.custom(lambda t: lam * t, lambda t: 0.5 * lam * t * t, C=lam, df=lambda t: lam + 0 * t)
    with pytest.raises(SolverError, match="lambda too small"):
        estimate_c_eps(linear, 0.5, g)


def test_nonconvergence_carries_last_iterate(problem):
    g, _, nl = problem
    init = project(bump_field(g, 4.0), nl).field
    with pytest.raises(SolverError) as info:
        solve_critical_point(init, EPS, nl, SolveConfig(max_newton=1))
    assert isinstance(info.value.last, Field)
    assert len(info.value.history) == 2


def test_ps_diagnostic():
    falling = [(1.0, 0.5**k) for k in range(60)]
    rep = ps_diagnostic(falling)
    assert not rep.stalled and rep.message == "no PS obstruction observed"
    stuck = [(1.0, 0.1)] * 50
    assert ps_diagnostic(stuck).stalled
    warn = ps_diagnostic(falling, kappa=2.0, kappa_upper=1.0)
    assert warn.kappa_below_threshold is False
    assert "compactness threshold exceeded" in warn.warnings
    assert ps_diagnostic(falling, kappa=0.5, kappa_upper=1.0).kappa_below_threshold is True


def test_history_csv(tmp_path, estimate):
    path = tmp_path / "h.csv"
    write_history_csv(path, estimate.candidate.history)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["iteration", "level", "residual_norm"]
    assert len(rows) == len(estimate.candidate.history) + 1
    assert float(rows[-1][2]) == estimate.candidate.residual_norm
