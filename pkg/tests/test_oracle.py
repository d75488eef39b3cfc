import ast
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import netfreq.oracle as oracle_mod
from helpers import CONGESTION_REF, NOMINAL_REF, brute_force_two_node, two_node_scenario
from netfreq.network import with_updates
from netfreq.oracle import (
    NboInfeasible,
    assemble_nbo,
    compare_equilibrium,
    edge_stationarity,
    kkt_residuals,
    lagrangian,
    solution_to_dict,
    solve_nbo,
    with_duals,
)
from netfreq.simulator import SystemState


def test_problem_counts(nominal):
    prob = assemble_nbo(nominal)
    assert prob.n_eq == 8
    assert prob.n_box == 8 and prob.n_interval == 4
    assert len(prob.h) == 16 + 8  # two-sided boxes plus two-sided line limits
    assert np.all(np.linalg.eigvalsh(prob.H) > -1e-9)


def test_zero_disturbance_origin(nominal):
    prob = assemble_nbo(nominal, p=np.zeros(4))
    x = np.zeros(prob.n_var)
    np.testing.assert_array_equal(prob.A @ x - prob.b, 0)
    assert np.all(prob.G @ x <= prob.h)
    sol = solve_nbo(prob)
    assert np.abs(sol.x).max() < 1e-12


def test_infeasible_flagged(nominal):
    md = nominal.model
    total = md.pg_hi.sum() - md.pl_lo.sum() + 1
    p = np.full(4, total / 4)
    with pytest.raises(NboInfeasible):
        solve_nbo(assemble_nbo(nominal, p=p))


def test_nominal_against_reference(nominal_run):
    sol, md = nominal_run.sol, nominal_run.scenario.model
    np.testing.assert_allclose(sol.pg + md.base_pg, NOMINAL_REF["pg_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.pl + md.base_pl, NOMINAL_REF["pl_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.flows + md.base_flow, NOMINAL_REF["flow_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.lam, NOMINAL_REF["lam"], atol=1e-9)
    np.testing.assert_array_equal(sol.eta_p, 0)
    np.testing.assert_array_equal(sol.eta_m, 0)


def test_congestion_against_reference(congestion_run):
    sol, md = congestion_run.sol, congestion_run.scenario.model
    np.testing.assert_allclose(sol.pg + md.base_pg, CONGESTION_REF["pg_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.pl + md.base_pl, CONGESTION_REF["pl_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.flows + md.base_flow, CONGESTION_REF["flow_abs"], atol=1e-9)
    np.testing.assert_allclose(sol.lam, CONGESTION_REF["lam"], atol=1e-9)
    assert sol.eta_m[3] == pytest.approx(CONGESTION_REF["eta_m_edge3"], rel=1e-10)
    assert sol.active["phi_lo"] == [3]


def test_case_study_tables_within_one_mw(nominal_run, congestion_run):
    md = nominal_run.scenario.model
    np.testing.assert_allclose(nominal_run.sol.pg + md.base_pg, (620, 596, 660, 580), atol=1.0)
    np.testing.assert_allclose(nominal_run.sol.pl + md.base_pl, (23.6, 59.8, 23.6, 39.7), atol=1.0)
    md = congestion_run.scenario.model
    np.testing.assert_allclose(congestion_run.sol.pg + md.base_pg, (618, 595, 658, 585), atol=1.0)
    np.testing.assert_allclose(congestion_run.sol.pl + md.base_pl, (25.1, 60.7, 25.1, 34.9), atol=1.0)


def test_kkt_small(nominal_run, congestion_run):
    for r in (nominal_run, congestion_run):
        rep = kkt_residuals(r.sol)
        assert max(rep.values()) < 1e-8
        assert edge_stationarity(r.sol) < 1e-8


def test_kkt_detects_perturbation(nominal_run):
    sol = nominal_run.sol
    bad = with_duals(sol, lam=sol.lam + 1.0)
    assert kkt_residuals(bad)["stationarity"] > 0.5
    bad = with_duals(sol, eta_p=np.array([-1.0, 0, 0, 0]))
    assert kkt_residuals(bad)["dual_feas"] == 1.0


def test_strong_duality(nominal_run, congestion_run):
    for r in (nominal_run, congestion_run):
        assert abs(lagrangian(r.sol) - r.sol.objective) < 1e-8 * max(1.0, abs(r.sol.objective))


def test_virtual_angles_match(nominal_run, congestion_run):
    for r in (nominal_run, congestion_run):
        assert np.abs(r.sol.theta_t - r.sol.phi_t).max() < 1e-9
        np.testing.assert_allclose(r.sol.omega, 0, atol=1e-12)
        np.testing.assert_allclose(r.sol.mu, r.sol.omega, atol=1e-9)


def test_tightening_never_helps(nominal):
    objs = []
    for lim in (80.0, 65.0, 55.0, 50.0, 45.0):
        md = nominal.model
        s = with_updates(nominal, theta_lo=(-lim - md.base_flow) / md.B, theta_hi=(lim - md.base_flow) / md.B)
        objs.append(solve_nbo(assemble_nbo(s)).objective)
    assert all(b >= a - 1e-9 for a, b in zip(objs, objs[1:]))


def test_unbounded_lines_reproduce_uncongested(nominal_run, congestion):
    s = with_updates(congestion, theta_lo=np.full(4, -np.inf), theta_hi=np.full(4, np.inf))
    sol = solve_nbo(assemble_nbo(s))
    np.testing.assert_allclose(sol.pg, nominal_run.sol.pg, atol=1e-9)
    np.testing.assert_allclose(sol.pl, nominal_run.sol.pl, atol=1e-9)


def test_two_node_uncongested():
    sol = solve_nbo(assemble_nbo(two_node_scenario()))
    np.testing.assert_allclose(sol.pg, (5, 5), atol=1e-10)
    assert sol.flows[0] == pytest.approx(5.0, abs=1e-10)
    assert max(kkt_residuals(sol).values()) < 1e-8


def test_two_node_congested():
    sol = solve_nbo(assemble_nbo(two_node_scenario(limit=3.0)))
    np.testing.assert_allclose(sol.pg, (3, 7), atol=1e-10)
    assert sol.eta_p[0] > 0
    assert max(kkt_residuals(sol).values()) < 1e-8


@settings(max_examples=40, deadline=None)
@given(a0=st.floats(0.5, 3.0), a1=st.floats(0.5, 3.0), p1=st.floats(1.0, 40.0), lim=st.floats(0.5, 30.0))
def test_two_node_grid_search(a0, a1, p1, lim):
    s = two_node_scenario(limit=lim, p=(0.0, p1), alpha=(a0, a1))
    sol = solve_nbo(assemble_nbo(s))
    x, y = brute_force_two_node((a0, a1), p1, lim)
    assert abs(sol.pg[0] - x) <= 2e-3 and abs(sol.pg[1] - y) <= 2e-3


def test_compare_equilibrium(nominal_run, congestion_run):
    for r in (nominal_run, congestion_run):
        rep = compare_equilibrium(r.eq, r.sol)
        assert rep["ok"], rep
        assert rep["omega_max"] < 1e-4
        assert rep["theta_phi_gap_sim"] < 1e-6
    r = congestion_run
    assert r.eq.eta_m[3] > 0 and r.sol.eta_m[3] > 0


def test_compare_zero_disturbance(nominal):
    s = replace(nominal, p=np.zeros(4))
    sol = solve_nbo(assemble_nbo(s))
    zero = SystemState.from_vector(np.zeros(32), s.model)
    rep = compare_equilibrium(zero, sol)
    assert rep["ok"] and rep["pg_gap"] < 1e-12


def test_solution_document(congestion_run):
    doc = solution_to_dict(congestion_run.sol)
    assert set(doc) >= {"primal", "dual", "objective", "kkt", "active"}
    assert doc["dual"]["eta_m"][3] > 0
    assert math.isfinite(doc["objective"])


def test_oracle_is_independent():
    tree = ast.parse(Path(oracle_mod.__file__).read_text())
    names = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            names.add(node.module or "")
            names.update(a.name for a in node.names)
        elif isinstance(node, ast.Import):
            names.update(a.name for a in node.names)
    assert not names & {"plant", "controller", "simulator", "netfreq.plant", "netfreq.controller",
                        "netfreq.simulator"}
