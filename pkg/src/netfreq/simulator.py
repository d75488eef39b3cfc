"""Closed-loop integration, trajectory recording, equilibrium detection.

The closed loop is integrated with fixed-step RK4.  After every step the line
multipliers are clamped at zero and (Pg, Pl) are clamped to the capacity box;
how far the raw RK4 update reached past either limit is recorded so the
clamps can be audited.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .controller import controller_field, inputs_field, z_field
from .network import STATE_BLOCKS, NetworkModel, Scenario
from .plant import plant_field


class SimulationError(RuntimeError):
    def __init__(self, message, step=None, t=None):
        super().__init__(message)
        self.step = step
        self.t = t


class SimulationDiverged(SimulationError):
    pass


def block_sizes(model: NetworkModel) -> dict:
    n, m = model.n_nodes, model.m
    return dict(zip(STATE_BLOCKS, (m, n, n, n, m, m, n, m)))


def state_slices(model: NetworkModel) -> dict:
    """Slices of the canonical state vector (theta_t, omega, pg, pl, eta_p, eta_m, lambda, phi_t)."""
    out, start = {}, 0
    for name, size in block_sizes(model).items():
        out[name] = slice(start, start + size)
        start += size
    return out


def state_dim(model: NetworkModel) -> int:
    return 4 * model.m + 4 * model.n_nodes


@dataclass
class SystemState:
    theta_t: np.ndarray
    omega: np.ndarray
    pg: np.ndarray
    pl: np.ndarray
    eta_p: np.ndarray
    eta_m: np.ndarray
    lam: np.ndarray
    phi_t: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(getattr(self, a), float) for a in _ATTRS])

    @classmethod
    def from_vector(cls, w, model: NetworkModel) -> "SystemState":
        w = np.asarray(w, dtype=float)
        if w.shape != (state_dim(model),):
            raise ValueError(f"state vector has shape {w.shape}, expected ({state_dim(model)},)")
        sl = state_slices(model)
        return cls(*(w[sl[b]].copy() for b in STATE_BLOCKS))

    @classmethod
    def from_blocks(cls, blocks: dict) -> "SystemState":
        return cls(*(np.asarray(blocks[b], float).copy() for b in STATE_BLOCKS))

    def as_dict(self) -> dict:
        return {b: getattr(self, a) for b, a in zip(STATE_BLOCKS, _ATTRS)}


_ATTRS = ("theta_t", "omega", "pg", "pl", "eta_p", "eta_m", "lam", "phi_t")


def kernel_params(s: Scenario):
    """Tuple of arrays consumed by the compiled closed-loop kernels."""
    md, g = s.model, s.gains
    f = lambda v: np.ascontiguousarray(v, dtype=np.float64)  # noqa: E731
    return (
        md.src, md.dst, f(md.B), f(md.M), f(md.D), f(md.R), f(md.Tg), f(md.Tl),
        f(md.alpha), f(md.beta), f(md.pg_lo), f(md.pg_hi), f(md.pl_lo), f(md.pl_hi),
        f(md.theta_lo), f(md.theta_hi), f(s.p),
        f(g.lam), f(g.eta), f(g.phi), f(g.g), f(g.l),
    )


@njit(cache=True)
def closed_loop_field(w, n, m, P):
    (src, dst, B, M, D, R, Tg, Tl, alpha, beta, pg_lo, pg_hi, pl_lo, pl_hi,
     th_lo, th_hi, p, g_lam, g_eta, g_phi, g_g, g_l) = P
    th = w[0:m]
    om = w[m:m + n]
    pg = w[m + n:m + 2 * n]
    pl = w[m + 2 * n:m + 3 * n]
    ep = w[m + 3 * n:2 * m + 3 * n]
    em = w[2 * m + 3 * n:3 * m + 3 * n]
    lam = w[3 * m + 3 * n:3 * m + 4 * n]
    ph = w[3 * m + 4 * n:4 * m + 4 * n]
    z = z_field(pg, pl, p, ph, src, dst, B)
    ug, ul = inputs_field(pg, pl, om, lam, z, alpha, beta, R, g_g, g_l, pg_lo, pg_hi, pl_lo, pl_hi)
    d_th, d_om, d_pg, d_pl = plant_field(th, om, pg, pl, ug, ul, p, src, dst, B, M, D, R, Tg, Tl)
    d_lam, d_ep, d_em, d_ph = controller_field(lam, ep, em, ph, z, src, dst, B, th_lo, th_hi, g_lam, g_eta, g_phi)
    out = np.empty_like(w)
    out[0:m] = d_th
    out[m:m + n] = d_om
    out[m + n:m + 2 * n] = d_pg
    out[m + 2 * n:m + 3 * n] = d_pl
    out[m + 3 * n:2 * m + 3 * n] = d_ep
    out[2 * m + 3 * n:3 * m + 3 * n] = d_em
    out[3 * m + 3 * n:3 * m + 4 * n] = d_lam
    out[3 * m + 4 * n:4 * m + 4 * n] = d_ph
    return out


@njit(cache=True)
def _field_into(w, out, n, m, P, z, flow):
    """Allocation-free closed-loop field; must agree with closed_loop_field."""
    (src, dst, B, M, D, R, Tg, Tl, alpha, beta, pg_lo, pg_hi, pl_lo, pl_hi,
     th_lo, th_hi, p, g_lam, g_eta, g_phi, g_g, g_l) = P
    o_om, o_pg, o_pl = m, m + n, m + 2 * n
    o_ep, o_em = m + 3 * n, 2 * m + 3 * n
    o_lam, o_ph = 3 * m + 3 * n, 3 * m + 4 * n
    for j in range(n):
        z[j] = w[o_pg + j] - w[o_pl + j] - p[j]
        flow[j] = 0.0
    for k in range(m):
        i, j = src[k], dst[k]
        bp = B[k] * w[o_ph + k]
        z[i] -= bp
        z[j] += bp
        bt = B[k] * w[k]
        flow[i] += bt
        flow[j] -= bt
    for j in range(n):
        om = w[o_om + j]
        pg = w[o_pg + j]
        pl = w[o_pl + j]
        lam = w[o_lam + j]
        a = pg - g_g[j] * (alpha[j] * pg + om + z[j] + lam)
        a = min(pg_hi[j], max(pg_lo[j], a))
        b = pl - g_l[j] * (beta[j] * pl - om - z[j] - lam)
        b = min(pl_hi[j], max(pl_lo[j], b))
        out[o_om + j] = (pg - pl - p[j] - D[j] * om - flow[j]) / M[j]
        out[o_pg + j] = (a - pg) / Tg[j]
        out[o_pl + j] = (b - pl) / Tl[j]
        out[o_lam + j] = g_lam[j] * z[j]
    for k in range(m):
        i, j = src[k], dst[k]
        out[k] = w[o_om + i] - w[o_om + j]
        ph = w[o_ph + k]
        ep = w[o_ep + k]
        em = w[o_em + k]
        x = ph - th_hi[k]
        out[o_ep + k] = g_eta[k] * x if (ep > 0.0 or x > 0.0) else 0.0
        x = th_lo[k] - ph
        out[o_em + k] = g_eta[k] * x if (em > 0.0 or x > 0.0) else 0.0
        out[o_ph + k] = g_phi[k] * (B[k] * (w[o_lam + i] + z[i] - w[o_lam + j] - z[j]) + em - ep)


@njit(cache=True)
def _rk4_step(w, n, m, P, dt):
    """One RK4 step plus clamps; returns (w', box excess, eta undershoot)."""
    N = w.shape[0]
    k1, k2, k3, k4, tmp = np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N)
    z, flow = np.empty(n), np.empty(n)
    wn = np.empty(N)
    return _rk4_into(w, wn, n, m, P, dt, k1, k2, k3, k4, tmp, z, flow)


@njit(cache=True)
def _rk4_into(w, wn, n, m, P, dt, k1, k2, k3, k4, tmp, z, flow):
    N = w.shape[0]
    _field_into(w, k1, n, m, P, z, flow)
    for i in range(N):
        tmp[i] = w[i] + 0.5 * dt * k1[i]
    _field_into(tmp, k2, n, m, P, z, flow)
    for i in range(N):
        tmp[i] = w[i] + 0.5 * dt * k2[i]
    _field_into(tmp, k3, n, m, P, z, flow)
    for i in range(N):
        tmp[i] = w[i] + dt * k3[i]
    _field_into(tmp, k4, n, m, P, z, flow)
    for i in range(N):
        wn[i] = w[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    pg_lo, pg_hi, pl_lo, pl_hi = P[10], P[11], P[12], P[13]
    excess = 0.0
    for j in range(n):
        i = m + n + j
        excess = max(excess, wn[i] - pg_hi[j], pg_lo[j] - wn[i])
        wn[i] = min(pg_hi[j], max(pg_lo[j], wn[i]))
        i = m + 2 * n + j
        excess = max(excess, wn[i] - pl_hi[j], pl_lo[j] - wn[i])
        wn[i] = min(pl_hi[j], max(pl_lo[j], wn[i]))
    under = 0.0
    for i in range(m + 3 * n, 3 * m + 3 * n):
        if wn[i] < 0.0:
            under = max(under, -wn[i])
            wn[i] = 0.0
    return wn, excess, under


@njit(cache=True)
def _integrate(w0, n, m, P, dt, n_steps, record_every, bound):
    n_rec = n_steps // record_every + 1
    if n_steps % record_every != 0:
        n_rec += 1
    samples = np.empty((n_rec, w0.shape[0]))
    steps = np.empty(n_rec, dtype=np.int64)
    samples[0] = w0
    steps[0] = 0
    r = 1
    N = w0.shape[0]
    w = w0.copy()
    wn = np.empty(N)
    k1, k2, k3, k4, tmp = np.empty(N), np.empty(N), np.empty(N), np.empty(N), np.empty(N)
    z, flow = np.empty(n), np.empty(n)
    max_excess = 0.0
    max_under = 0.0
    for k in range(1, n_steps + 1):
        wn, ex, un = _rk4_into(w, wn, n, m, P, dt, k1, k2, k3, k4, tmp, z, flow)
        w, wn = wn, w
        max_excess = max(max_excess, ex)
        max_under = max(max_under, un)
        norm = 0.0
        for i in range(w.shape[0]):
            norm += w[i] * w[i]
        if not np.isfinite(norm):
            return samples[:r], steps[:r], max_excess, max_under, 2, k
        if math.sqrt(norm) > bound:
            return samples[:r], steps[:r], max_excess, max_under, 1, k
        if k % record_every == 0 or k == n_steps:
            samples[r] = w
            steps[r] = k
            r += 1
    return samples, steps, max_excess, max_under, 0, n_steps


@njit(cache=True)
def _derive(samples, n, m, P):
    K = samples.shape[0]
    fnorm = np.empty(K)
    zs = np.empty((K, n))
    ugs = np.empty((K, n))
    uls = np.empty((K, n))
    (src, dst, B, M, D, R, Tg, Tl, alpha, beta, pg_lo, pg_hi, pl_lo, pl_hi,
     th_lo, th_hi, p, g_lam, g_eta, g_phi, g_g, g_l) = P
    for k in range(K):
        w = samples[k]
        f = closed_loop_field(w, n, m, P)
        fnorm[k] = math.sqrt(np.sum(f * f))
        om = w[m:m + n]
        pg = w[m + n:m + 2 * n]
        pl = w[m + 2 * n:m + 3 * n]
        lam = w[3 * m + 3 * n:3 * m + 4 * n]
        ph = w[3 * m + 4 * n:4 * m + 4 * n]
        z = z_field(pg, pl, p, ph, src, dst, B)
        ug, ul = inputs_field(pg, pl, om, lam, z, alpha, beta, R, g_g, g_l, pg_lo, pg_hi, pl_lo, pl_hi)
        zs[k] = z
        ugs[k] = ug
        uls[k] = ul
    return fnorm, zs, ugs, uls


def _as_vector(w, model) -> np.ndarray:
    if isinstance(w, SystemState):
        return w.to_vector()
    return np.asarray(w, dtype=float)


def closed_loop_rhs(w, s: Scenario) -> np.ndarray:
    """Closed-loop vector field at ``w`` (state object or canonical vector)."""
    return closed_loop_field(_as_vector(w, s.model), s.model.n_nodes, s.model.m, kernel_params(s))


def step(w, s: Scenario, dt: float):
    """One RK4 step of the closed loop followed by the multiplier and box clamps."""
    vec = _as_vector(w, s.model)
    if vec.shape != (state_dim(s.model),):
        raise ValueError("state has wrong dimension")
    wn, _, _ = _rk4_step(vec, s.model.n_nodes, s.model.m, kernel_params(s), float(dt))
    if not np.all(np.isfinite(wn)):
        raise SimulationError("non-finite state after step 1", step=1, t=dt)
    return SystemState.from_vector(wn, s.model) if isinstance(w, SystemState) else wn


@dataclass(frozen=True, eq=False)
class Trajectory:
    scenario: Scenario
    times: np.ndarray
    states: np.ndarray
    dt: float
    horizon: float
    field_norm: np.ndarray
    z: np.ndarray
    ug: np.ndarray
    ul: np.ndarray
    flows: np.ndarray
    sigma_p: np.ndarray
    sigma_m: np.ndarray
    box_violation: np.ndarray
    max_preclamp_box_excess: float
    max_preclamp_eta_undershoot: float
    phi_cycle_residual: np.ndarray
    v2: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    @property
    def slices(self) -> dict:
        return state_slices(self.scenario.model)

    def block(self, name: str) -> np.ndarray:
        return self.states[:, self.slices[name]]

    def state(self, k: int) -> SystemState:
        return SystemState.from_vector(self.states[k], self.scenario.model)

    @property
    def final(self) -> SystemState:
        return self.state(-1)

    @property
    def flows_abs(self) -> np.ndarray:
        return self.flows + self.scenario.model.base_flow

    def with_v2(self, v2) -> "Trajectory":
        v2 = np.asarray(v2, dtype=float).copy()
        v2.setflags(write=False)
        return replace(self, v2=v2)


def sigma_sets(phi_t, eta_p, eta_m, model: NetworkModel):
    """Boolean masks of edges with a closed multiplier gate on each side."""
    sp = (np.asarray(eta_p) == 0) & (np.asarray(phi_t) - model.theta_hi < 0)
    sm = (np.asarray(eta_m) == 0) & (model.theta_lo - np.asarray(phi_t) < 0)
    return sp, sm


def _cycle_projector(model: NetworkModel) -> np.ndarray:
    from .network import build_incidence

    Ct = build_incidence(model).T
    if Ct.size == 0:
        return np.zeros((0, 0))
    # projector onto the orthogonal complement of col(C^T), i.e. the cycle space
    return np.eye(model.m) - Ct @ np.linalg.pinv(Ct)


def simulate(s: Scenario, *, dt=None, horizon=None, record_every=None) -> Trajectory:
    """Integrate the closed loop from ``s.x0`` over the scenario horizon."""
    model = s.model
    dt = float(s.sim.dt if dt is None else dt)
    horizon = float(s.sim.horizon if horizon is None else horizon)
    record_every = int(s.sim.record_every if record_every is None else record_every)
    if dt <= 0 or horizon < 0 or record_every < 1:
        raise ValueError("dt must be positive, horizon nonnegative, record_every >= 1")
    n_steps = int(round(horizon / dt))
    n, m = model.n_nodes, model.m
    P = kernel_params(s)
    w0 = SystemState.from_blocks(s.x0).to_vector()
    samples, steps, excess, under, status, k = _integrate(
        w0, n, m, P, dt, n_steps, record_every, float(s.sim.divergence_bound))
    if status == 2:
        raise SimulationError(f"non-finite state at step {k} (t = {k * dt:g} s)", step=k, t=k * dt)
    if status == 1:
        raise SimulationDiverged(
            f"state norm exceeded {s.sim.divergence_bound:g} at step {k} (t = {k * dt:g} s)", step=k, t=k * dt)

    fnorm, zs, ugs, uls = _derive(samples, n, m, P)
    sl = state_slices(model)
    pg, pl = samples[:, sl["pg"]], samples[:, sl["pl"]]
    box = np.maximum.reduce([
        np.zeros(len(samples)),
        (pg - model.pg_hi).max(axis=1, initial=0.0), (model.pg_lo - pg).max(axis=1, initial=0.0),
        (pl - model.pl_hi).max(axis=1, initial=0.0), (model.pl_lo - pl).max(axis=1, initial=0.0),
    ])
    phi = samples[:, sl["phi_t"]]
    sp, sm = sigma_sets(phi, samples[:, sl["eta_p"]], samples[:, sl["eta_m"]], model)
    proj = _cycle_projector(model)
    cyc = np.linalg.norm(phi @ proj.T, axis=1) if m else np.zeros(len(samples))

    arrays = dict(
        times=steps * dt, states=samples, field_norm=fnorm, z=zs, ug=ugs, ul=uls,
        flows=samples[:, sl["theta_t"]] * model.B, sigma_p=sp, sigma_m=sm,
        box_violation=box, phi_cycle_residual=cyc,
    )
    for a in arrays.values():
        a.setflags(write=False)
    return Trajectory(
        scenario=s, dt=dt, horizon=n_steps * dt,
        max_preclamp_box_excess=float(excess), max_preclamp_eta_undershoot=float(under),
        **arrays,
    )


def detect_equilibrium(traj: Trajectory, eq_tol=None):
    """Last recorded state if the field norm stayed below ``eq_tol`` over the trailing 5% of the run."""
    tol = traj.scenario.sim.eq_tol if eq_tol is None else eq_tol
    if len(traj.times) == 0:
        return None
    t_end = traj.times[-1]
    window = traj.times >= t_end - 0.05 * traj.horizon
    if not np.all(traj.field_norm[window] < tol):
        return None
    return traj.state(-1)


def monitor_constraints(traj: Trajectory, model: NetworkModel | None = None, *, line_tol=1e-3, eq_tol=None) -> dict:
    """Capacity box at every sample; line limits judged at the equilibrium only (MW tolerance)."""
    model = traj.scenario.model if model is None else model
    lo = model.theta_lo * model.B
    hi = model.theta_hi * model.B
    flows = traj.flows
    excess = np.maximum(flows - hi, lo - flows).max(initial=0.0)
    eq = detect_equilibrium(traj, eq_tol)
    report = {
        "capacity_ok_all_t": bool(np.all(traj.box_violation == 0)),
        "max_box_violation": float(traj.box_violation.max(initial=0.0)),
        "max_preclamp_box_excess": traj.max_preclamp_box_excess,
        "max_preclamp_eta_undershoot": traj.max_preclamp_eta_undershoot,
        "eta_nonnegative_all_t": bool(np.all(traj.block("eta_p") >= 0) and np.all(traj.block("eta_m") >= 0)),
        "max_line_excess_transient": float(max(excess, 0.0)),
        "line_limit_ok_at_eq": None,
        "max_line_excess_at_eq": None,
    }
    if eq is not None:
        f_eq = tie_flows_of(eq, model)
        ex = float(np.maximum(f_eq - hi, lo - f_eq).max(initial=0.0))
        report["max_line_excess_at_eq"] = max(ex, 0.0)
        report["line_limit_ok_at_eq"] = bool(ex <= line_tol)
    return report


def tie_flows_of(w: SystemState, model: NetworkModel) -> np.ndarray:
    return model.B * w.theta_t


def csv_header(model: NetworkModel) -> list:
    cols = ["t"]
    for b in STATE_BLOCKS:
        size = block_sizes(model)[b]
        cols += [f"{b}[{i}]" for i in range(size)]
    cols += [f"flow[{i}]" for i in range(model.m)]
    cols.append("V2")
    return cols


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """One row per recorded sample; floats use shortest round-trip repr."""
    model = traj.scenario.model
    v2 = traj.v2 if traj.v2 is not None else np.full(len(traj.times), np.nan)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(csv_header(model))
        for k in range(len(traj.times)):
            row = [traj.times[k], *traj.states[k], *traj.flows[k], v2[k]]
            wr.writerow([repr(float(x)) for x in row])


def read_trajectory_csv(path):
    """Inverse of write_trajectory_csv: (header, rows as float array)."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = np.array([[float(x) for x in r] for r in rd])
    return header, rows
