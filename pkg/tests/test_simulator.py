from dataclasses import replace

import numpy as np
import pytest

from helpers import small_model, small_scenario
from netfreq.network import SimSettings, with_updates
from netfreq.simulator import (
    SimulationDiverged,
    SystemState,
    _field_into,
    closed_loop_field,
    closed_loop_rhs,
    csv_header,
    detect_equilibrium,
    kernel_params,
    monitor_constraints,
    read_trajectory_csv,
    simulate,
    state_dim,
    state_slices,
    step,
    write_trajectory_csv,
)


def test_layout(nominal):
    md = nominal.model
    sl = state_slices(md)
    assert list(sl) == ["theta_t", "omega", "pg", "pl", "eta_p", "eta_m", "lambda", "phi_t"]
    assert state_dim(md) == 32
    w = np.arange(32.0)
    x = SystemState.from_vector(w, md)
    np.testing.assert_array_equal(x.to_vector(), w)
    np.testing.assert_array_equal(x.lam, w[sl["lambda"]])


def test_fused_kernel_matches_composed(nominal, congestion):
    rng = np.random.default_rng(0)
    for s in (nominal, congestion):
        P = kernel_params(s)
        for _ in range(50):
            w = rng.normal(size=32)
            w[12:24] = np.abs(w[12:24]) * (rng.random(12) < 0.5)  # eta >= 0, some zero
            w[4:12] *= 30
            out = np.empty(32)
            _field_into(w, out, 4, 4, P, np.empty(4), np.empty(4))
            ref = closed_loop_field(w, 4, 4, P)
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-10)


def test_step_fixed_point(nominal_run, congestion_run):
    for r in (nominal_run, congestion_run):
        w = SystemState.from_blocks(r.sol.state_blocks()).to_vector()
        w1 = step(w, r.scenario, 1e-3)
        np.testing.assert_allclose(w1, w, rtol=0, atol=1e-10 * max(1.0, np.abs(w).max()))


def test_step_zero(nominal):
    s = replace(nominal, p=np.zeros(4))
    w1 = step(np.zeros(32), s, 1e-3)
    np.testing.assert_array_equal(w1, 0)


def test_step_first_order(nominal):
    """From rest, omega drops by p dt / M; every block moves with its initial derivative."""
    s = nominal
    dt = 1e-3
    w1 = step(np.zeros(32), s, dt)
    sl = state_slices(s.model)
    np.testing.assert_allclose(w1[sl["omega"]], -s.p * dt / s.model.M, rtol=0.05)
    f0 = closed_loop_rhs(np.zeros(32), s)
    # theta_t only moves at second order; all other blocks agree with dt * f(0) to O(dt^2)
    assert np.abs(w1[sl["theta_t"]]).max() <= dt ** 2 * np.abs(f0[sl["omega"]]).max()
    err = np.abs(w1 - dt * f0)
    scale = np.abs(f0).max()
    assert err.max() < 50 * scale * dt ** 2


def test_zero_disturbance(nominal):
    s = replace(nominal, p=np.zeros(4), sim=replace(nominal.sim, horizon=5.0))
    tr = simulate(s)
    assert np.all(tr.states == 0)
    eq = detect_equilibrium(tr)
    assert eq is not None and np.all(eq.to_vector() == 0)


def test_short_horizon_no_equilibrium(nominal):
    tr = simulate(nominal, horizon=0.1)
    assert detect_equilibrium(tr) is None


def test_nominal_equilibrium(nominal_run):
    r = nominal_run
    assert r.eq is not None
    dev = r.eq.pg
    np.testing.assert_allclose(dev, (59.1, 47.3, 78.8, 39.4), atol=1.0)
    assert np.abs(r.eq.omega).max() < 1e-4


def test_trajectory_is_immutable(nominal_run):
    tr = nominal_run.traj
    assert np.all(np.diff(tr.times) > 0)
    with pytest.raises(ValueError):
        tr.states[0, 0] = 1.0


def test_monitor(nominal_run, congestion_run):
    rep = monitor_constraints(nominal_run.traj)
    assert rep["capacity_ok_all_t"] and rep["max_box_violation"] == 0
    rep = monitor_constraints(congestion_run.traj)
    assert rep["line_limit_ok_at_eq"]
    md = congestion_run.scenario.model
    flows = md.B * congestion_run.eq.theta_t + md.base_flow
    assert abs(flows[2] - 50) < 1.0  # edge (3,2) close to its limit


def test_eta_nonnegative(congestion_run):
    tr = congestion_run.traj
    assert np.all(tr.block("eta_p") >= 0) and np.all(tr.block("eta_m") >= 0)


def test_divergence_reported(nominal):
    s = replace(nominal, sim=replace(nominal.sim, dt=0.2, horizon=50.0))
    with pytest.raises(SimulationDiverged) as exc:
        simulate(s)
    assert exc.value.step is not None and exc.value.step > 0


def test_box_outside_rejected(nominal):
    x0 = dict(nominal.x0)
    x0["pl"] = nominal.model.pl_lo - 1.0
    from netfreq.network import ScenarioError

    with pytest.raises(ScenarioError, match="A3"):
        with_updates(nominal, x0=x0)


def test_record_every_and_final_sample(nominal):
    tr = simulate(nominal, horizon=1.05, record_every=100)
    assert tr.times[-1] == pytest.approx(1.05)
    assert tr.times[1] == pytest.approx(0.1)


def test_csv_round_trip(tmp_path, nominal_run):
    tr = nominal_run.traj
    path = tmp_path / "t.csv"
    write_trajectory_csv(tr, path)
    header, rows = read_trajectory_csv(path)
    assert header == csv_header(nominal_run.scenario.model)
    assert header[0] == "t" and header[-1] == "V2"
    assert "lambda[0]" in header and "flow[3]" in header
    np.testing.assert_array_equal(rows[:, 0], tr.times)
    np.testing.assert_array_equal(rows[:, 1:33], tr.states)
    np.testing.assert_array_equal(rows[:, -1], tr.v2)


def test_small_network_converges():
    md = small_model(n=3, edges=((0, 1), (1, 2)), alpha=(1.0, 2.0, 3.0), beta=(2.0, 2.0, 2.0), line=20.0, M=0.2)
    s = small_scenario(md, [5.0, 10.0, 30.0], horizon=400.0, record_every=200)
    tr = simulate(s)
    eq = detect_equilibrium(tr)
    assert eq is not None
    assert abs((eq.pg - eq.pl - s.p).sum()) < 1e-6


def test_settings_defaults():
    d = SimSettings()
    assert d.dt == 1e-3 and d.eq_tol == 1e-4
