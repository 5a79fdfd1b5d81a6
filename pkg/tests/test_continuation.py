from __future__ import annotations

import json
import math

import numpy as np
import pytest

from conftest import unit_grid
from fbground.continuation import (
    ContinuationError,
    ContinuationTrace,
    barrier_check,
    convergence_report,
    field_distances,
    grid_for_eps,
    linf_bound_check,
    lipschitz_diagnostic,
    run_continuation,
    write_trace,
)
from fbground.energy import Nonlinearity, energy_J
from fbground.grid import dirichlet_form, gradient, interpolate, read_field
from fbground.solver import CriticalPoint, SolveConfig
from fbground.spectral import spectral_data


@pytest.fixture(scope="module")
def setup():
    g = unit_grid(33)
    sd = spectral_data(g, 1.5, kappa_fraction=0.5)
    nl = Nonlinearity.critical(sd.lam, sd.kappa, 3)
    return g, sd, nl


@pytest.fixture(scope="module")
def trace(setup):
    g, sd, nl = setup
    return run_continuation((0.4, 0.2, 0.1), nl, SolveConfig(), g, level_floor=sd.level_floor)


def test_trace_structure(trace, setup):
    g, sd, nl = setup
    assert len(trace) == 3
    assert [p.eps for p in trace.points] == [0.4, 0.2, 0.1]
    assert len(trace.sup_distances) == len(trace.h1_distances) == 2
    assert trace.limit is trace.points[-1].field
    assert all(sd.level_floor <= c <= sd.M_lambda for c in trace.levels)
    assert all(p.min_value >= -1e-12 for p in trace.points)


def test_schedule_validation(setup):
    g, _, nl = setup
    with pytest.raises(ValueError):
        run_continuation((0.2, 0.4), nl, SolveConfig(), g)
    with pytest.raises(ValueError):
        run_continuation((0.2, -0.1), nl, SolveConfig(), g)
    with pytest.raises(ValueError, match="resolves"):
        run_continuation((0.05,), nl, SolveConfig(), g)


def test_grid_choice_respects_layer_resolution():
    coarse, fine = unit_grid(33), unit_grid(65)
    assert grid_for_eps(0.1, [fine, coarse]) is coarse
    assert grid_for_eps(0.05, [coarse, fine]) is fine
    with pytest.raises(ValueError):
        grid_for_eps(0.01, [coarse, fine])


def test_single_step_trace(setup):
    g, sd, nl = setup
    tr = run_continuation((0.4,), nl, SolveConfig(), g, level_floor=sd.level_floor)
    assert len(tr) == 1 and tr.sup_distances == () and tr.h1_distances == ()
    assert tr.first_step_work >= tr.points[0].iterations


def test_trivial_seed_rejected(setup):
    g, sd, nl = setup
    with pytest.raises(ContinuationError, match="trivial") as info:
        run_continuation((0.4, 0.2), nl, SolveConfig(), g, level_floor=sd.level_floor, seed=g.zeros())
    assert len(info.value.trace) == 0


def test_constant_trace_report(trace, setup):
    _, _, nl = setup
    p = trace.points[-1]
    twin = ContinuationTrace((0.2, 0.1), (CriticalPoint(p.field, 0.2, p.level, 0.0, 0), CriticalPoint(p.field, 0.1, p.level, 0.0, 0)), (0.0,), (0.0,))
    rep = convergence_report(twin, nl)
    assert rep.sup_distances == (0.0,) and rep.h1_distances == (0.0,)
    assert rep.limit_energy == pytest.approx(energy_J(p.field, nl).total)
    assert rep.contact_measure == 0.0
    with pytest.raises(ValueError):
        convergence_report(ContinuationTrace((0.1,), (trace.points[-1],)), nl)


def test_sandwich_on_short_trace(trace, setup):
    _, _, nl = setup
    rep = convergence_report(trace, nl)
    assert rep.sandwich_ok
    assert rep.contact_measure == 0.0


def test_trace_invariants_enforced(trace):
    p = trace.points[0]
    with pytest.raises(ValueError):
        ContinuationTrace((0.1,), (p,))  # eps mismatch
    with pytest.raises(ValueError):
        ContinuationTrace((0.4, 0.2), (p, trace.points[1]), (), ())


def test_lipschitz_constant_for_repeated_field(trace):
    u = trace.limit
    vals = lipschitz_diagnostic([u, u, u])
    assert vals[0] == vals[1] == vals[2] > 0


def test_lipschitz_bounded_along_trace(trace):
    vals = lipschitz_diagnostic(trace.points)
    assert max(vals) < 2 * vals[0]


def test_gradient_difference_bounded_by_sup_distance(trace):
    a, b = trace.points[-2].field, trace.points[-1].field
    sup, _ = field_distances(a, b)
    diff = (gradient(a).components - gradient(b).components)[(slice(None),) + a.grid.interior]
    bound = math.sqrt(a.grid.dim) * sup / min(a.grid.spacing)
    assert np.sqrt((diff**2).sum(axis=0)).max() <= bound * (1 + 1e-12)


def test_barrier(trace, setup):
    g, _, nl = setup
    zero = barrier_check(g.zeros(), nl)
    assert zero.A0 == 0.0 and np.all(zero.barrier.values == 0.0) and zero.ok
    for p in trace.points:
        assert barrier_check(p.field, nl).ok
    assert not barrier_check(-trace.limit, nl).ok


def test_linf_bound_checks(trace, setup):
    g, sd, nl = setup
    rep = linf_bound_check(trace, sd.M_lambda, nl, sd.kappa_star_lower)
    assert rep.energy_bound_ok and rep.uniform_ok and rep.barrier_ok and rep.applicable
    assert rep.checked == 3 and rep.linf > 1.0 and rep.lipschitz > 0
    assert rep.linf_bound_predicted is None and rep.as_dict()["linf_bound_predicted"] == "not computed"
    trivial = CriticalPoint(g.zeros(), 0.1, 0.0, 0.0, 0)
    assert linf_bound_check([trivial], sd.M_lambda, nl).energy_bound_ok
    strong = Nonlinearity.critical(sd.lam, 2.0 * sd.kappa_star_upper, 3)
    rep2 = linf_bound_check(trace, sd.M_lambda, strong, sd.kappa_star_lower)
    assert rep2.applicable is False
    assert isinstance(rep2.energy_bound_ok, bool)


def test_trace_json_and_dumps(tmp_path, trace):
    path = write_trace(trace, tmp_path, {"note": "unit"})
    doc = json.loads(path.read_text())
    assert doc["schedule"] == [0.4, 0.2, 0.1]
    assert len(doc["steps"]) == 3 and doc["note"] == "unit"
    u = read_field(tmp_path / doc["steps"][-1]["field"])
    assert np.array_equal(u.values, trace.limit.values)
    again = write_trace(trace, tmp_path / "b", {"note": "unit"})
    assert again.read_text() == path.read_text()


# examples on the five-step acceptance run (shared session fixture)


def test_ground_state_uniform_distances_decrease(ground_state):
    sups = ground_state["results"]["convergence"]["sup_distances"]
    assert all(b < a for a, b in zip(sups, sups[1:])), sups


def test_ground_state_h1_distance_bounded_by_uniform_distance(ground_state):
    conv = ground_state["results"]["convergence"]
    u = ground_state["fields"][-1]
    scale = math.sqrt(dirichlet_form(u.grid, u.values, u.values))
    assert conv["h1_distances"][-1] < 10 * conv["sup_distances"][-1] * scale


def test_ground_state_h1_distances_decrease_over_final_steps(ground_state):
    h1 = ground_state["results"]["convergence"]["h1_distances"][-3:]
    assert all(b < a for a, b in zip(h1, h1[1:])), h1


def test_ground_state_sandwich(ground_state):
    conv = ground_state["results"]["convergence"]
    assert conv["sandwich_ok"]
    assert conv["tol"] == pytest.approx(5e-3 * abs(ground_state["results"]["levels"][-1]))
    assert conv["contact_measure"] == 0.0


def test_ground_state_warm_start_efficiency(ground_state):
    res = ground_state["results"]
    later = res["iterations"][1:]
    cheap = sum(1 for k in later if k <= res["first_step_work"])
    assert cheap >= 0.8 * len(later)


def test_ground_state_bounds_and_barrier(ground_state):
    res = ground_state["results"]
    assert res["bounds"]["energy_bound_ok"] and res["bounds"]["uniform_ok"] and res["bounds"]["applicable"]
    assert res["bounds_flags"]["barrier"] and res["bounds_flags"]["max_principle"]


def test_ground_state_lipschitz_within_factor_two(ground_state):
    vals = ground_state["results"]["lipschitz"]["values"]
    assert len(vals) == 5 and max(vals) < 2 * vals[0]


def test_ground_state_gradient_consistency(ground_state):
    a, b = ground_state["fields"][-2], ground_state["fields"][-1]
    sup, _ = field_distances(a, b)
    coarse = a if a.grid.max_spacing >= b.grid.max_spacing else b
    fine = b if coarse is a else a
    diff = (gradient(coarse).components - gradient(interpolate(fine, coarse.grid)).components)
    diff = diff[(slice(None),) + coarse.grid.interior]
    bound = math.sqrt(3) * sup / coarse.grid.max_spacing
    assert np.sqrt((diff**2).sum(axis=0)).max() <= bound * (1 + 1e-12)
