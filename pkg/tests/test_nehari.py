from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import bump_field, random_field, unit_grid
from fbground.energy import Nonlinearity, energy_J
from fbground.grid import Field
from fbground.nehari import (
    MEMBERSHIP_TOL,
    NehariError,
    Path,
    fiber_energy,
    fiber_profile,
    level_identity,
    mountain_path,
    nehari_residual,
    project,
    s_star,
    split,
    split_integrals,
    zeta,
)

NL = Nonlinearity.critical(15.0, 0.3, 3)


@pytest.fixture(scope="module")
def bump():
    return bump_field(unit_grid(17), 3.0)


def scaled_plus(u: Field, t: float) -> Field:
    parts = split(u)
    return Field(u.grid, parts.minus.values + t * parts.plus.values)


def test_split_examples():
    g = unit_grid(5)
    z = split(g.zeros())
    assert np.all(z.plus.values == 0) and np.all(z.minus.values == 0)
    vals = np.zeros(g.shape)
    vals[1, 1, 1], vals[2, 2, 2] = 1.7, 0.3
    s = split(Field(g, vals))
    assert s.plus.values[1, 1, 1] == pytest.approx(0.7) and s.minus.values[1, 1, 1] == 1.0
    assert s.plus.values[2, 2, 2] == 0.0 and s.minus.values[2, 2, 2] == 0.3


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_reconstructs_bit_exactly(seed):
    u = random_field(unit_grid(7), np.random.default_rng(seed), scale=4.0)
    s = split(u)
    assert np.array_equal(s.reconstruct().values, u.values)
    assert np.all(s.plus.values >= 0) and np.all(s.minus.values <= 1)
    assert np.all(s.plus.values * (s.minus.values - 1.0) == 0.0)


def test_zeta_endpoints(bump):
    assert np.array_equal(zeta(bump, 1.0).values, bump.values)
    assert np.all(zeta(bump, -1.0).values == 0.0)
    with pytest.raises(ValueError):
        zeta(bump, -1.5)


def test_zeta_jump_at_zero_is_phase_volume(bump):
    si = split_integrals(bump)
    below = fiber_energy(si, 0.0, NL)
    above = fiber_energy(si, 1e-14, NL)
    assert above - below == pytest.approx(si.phase_volume, rel=1e-9)
    assert np.array_equal(zeta(bump, 1e-6).values != zeta(bump, 0.0).values, bump.values > 1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), s=st.floats(-1.0, 0.0) | st.floats(1e-6, 5.0))
def test_fiber_formula_matches_direct_energy(seed, s):
    # below s ~ 1e-16 the scaled excess rounds away and {zeta > 1} empties in floating point
    u = random_field(unit_grid(7), np.random.default_rng(seed), scale=3.0)
    direct = energy_J(zeta(u, s), NL).total
    formula = fiber_energy(split_integrals(u), s, NL)
    assert formula == pytest.approx(direct, rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("t", [0.5, 2.0, 10.0])
def test_scale_homogeneity(bump, t):
    s0 = s_star(bump, NL)
    assert s_star(scaled_plus(bump, t), NL) * t == pytest.approx(s0, rel=1e-10)


def test_scale_matches_golden_section_maximum(bump):
    s0 = s_star(bump, NL)
    res = minimize_scalar(lambda s: -energy_J(zeta(bump, s), NL).total, bracket=(0.1 * s0, s0 * 1.1, 10 * s0),
                          method="golden", tol=1e-10)
    assert abs(res.x - s0) <= 1e-6 * max(1.0, s0)


def test_scale_closed_form_without_cross_term():
    g = unit_grid(17)
    # the phase is surrounded by nodes equal to exactly 1, so no edge crosses the level
    vals = np.zeros(g.shape)
    vals[4:13, 4:13, 4:13] = 1.0
    vals[6:11, 6:11, 6:11] = 3.0
    u = Field(g, vals)
    si = split_integrals(u)
    assert si.cross == 0.0
    num = si.numerator(NL.lam)
    expected = (num / (NL.kappa * si.power_plus)) ** 0.25
    assert s_star(u, NL) == pytest.approx(expected, rel=1e-14)


def test_scale_errors():
    g = unit_grid(9)
    with pytest.raises(NehariError, match="vanishes"):
        s_star(bump_field(g, 0.9), NL)
    with pytest.raises(NehariError, match="no interior maximum"):
        s_star(bump_field(g, 3.0), Nonlinearity.critical(1e6, 0.3))


def test_projection_lands_on_manifold(bump):
    pt = project(bump, NL)
    assert pt.residual <= MEMBERSHIP_TOL and pt.on_manifold
    assert s_star(pt.field, NL) == pytest.approx(1.0, abs=1e-8)
    again = project(pt.field, NL)
    assert np.abs(again.field.values - pt.field.values).max() < 1e-10
    assert pt.energy == pytest.approx(energy_J(zeta(bump, s_star(bump, NL)), NL).total, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), height=st.floats(1.5, 6.0))
def test_projection_idempotent_and_level_identity(seed, height):
    rng = np.random.default_rng(seed)
    g = unit_grid(9)
    u = Field(g, bump_field(g, height).values * (1 + 0.2 * random_field(g, rng, scale=1.0).values))
    try:
        pt = project(u, NL)
    except NehariError:
        return
    assert pt.residual <= 1e-8
    assert np.abs(project(pt.field, NL).field.values - pt.field.values).max() < 1e-10
    assert level_identity(pt.field, NL) == pytest.approx(pt.energy, rel=1e-6)


def test_residual_sentinel_below_one():
    assert nehari_residual(bump_field(unit_grid(9), 0.99), NL) == np.inf


def test_fiber_profile_negative_branch(bump):
    si = split_integrals(bump)
    ss = np.linspace(-1, 0, 11)
    prof = fiber_profile(bump, NL, ss)
    vals = np.array([v for _, v in prof])
    assert np.allclose(vals, 0.5 * (1 + ss) ** 2 * si.dirichlet_minus, rtol=1e-13)
    assert np.all(np.diff(vals) > 0)


def test_fiber_profile_unimodal_with_argmax_at_scale(bump):
    s0 = s_star(bump, NL)
    ss = np.linspace(1e-3, 20 * s0, 20001)
    vals = np.array([v for _, v in fiber_profile(bump, NL, ss)])
    d = np.sign(np.diff(vals))
    assert np.count_nonzero(d[1:] != d[:-1]) == 1
    assert abs(ss[np.argmax(vals)] - s0) <= ss[1] - ss[0]
    assert vals[-1] < 0.0


def test_mountain_path_peaks_at_the_manifold_point(bump):
    pt = project(bump, NL)
    path = mountain_path(pt, NL)
    assert isinstance(path, Path)
    assert np.all(path.samples[0].values == 0.0)
    assert path.levels[-1] < 0.0
    assert path.max_level == pytest.approx(pt.energy, abs=1e-8)
    assert np.array_equal(path.samples[path.argmax].values, pt.field.values)
