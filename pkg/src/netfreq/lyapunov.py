"""Lyapunov machinery for the closed loop: Gamma_2, F(w), H(w), V_2, Q and trajectory audits.

Everything uses the canonical state order (theta_t, omega, pg, pl, eta_p,
eta_m, lambda, phi_t).  The Pg / Pl blocks of F carry the controller gains
(gamma_g, gamma_l) in place of 1/Tg, 1/Tl, so Gamma_2 (H(w) - w) reproduces
the closed loop for any positive gains; the two coincide at the default
gains gamma_g = 1/Tg, gamma_l = 1/Tl.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Scenario, build_incidence
from .oracle import assemble_nbo, solve_nbo
from .simulator import SystemState, Trajectory, state_slices


@dataclass(frozen=True)
class SigmaSets:
    sigma_p: frozenset
    sigma_m: frozenset

    @classmethod
    def of_state(cls, w, s: Scenario) -> "SigmaSets":
        sl = state_slices(s.model)
        w = np.asarray(w, float)
        phi, ep, em = w[sl["phi_t"]], w[sl["eta_p"]], w[sl["eta_m"]]
        md = s.model
        sp = np.flatnonzero((ep == 0) & (phi - md.theta_hi < 0))
        sm = np.flatnonzero((em == 0) & (md.theta_lo - phi < 0))
        return cls(frozenset(int(i) for i in sp), frozenset(int(i) for i in sm))

    @classmethod
    def empty(cls) -> "SigmaSets":
        return cls(frozenset(), frozenset())

    @classmethod
    def full(cls, m: int) -> "SigmaSets":
        return cls(frozenset(range(m)), frozenset(range(m)))

    def key(self) -> tuple:
        return tuple(sorted(self.sigma_p)), tuple(sorted(self.sigma_m))


@dataclass(frozen=True, eq=False)
class LyapunovConfig:
    k: float
    w_star: np.ndarray

    def check(self, s: Scenario) -> None:
        g2 = gamma2(s) ** 2
        if not (self.k > 0 and g2.min() > self.k):
            raise ValueError("k must satisfy 0 < k < min diag(Gamma_2^2)")


def _vec(w) -> np.ndarray:
    return w.to_vector() if isinstance(w, SystemState) else np.asarray(w, dtype=float)


def gamma2(s: Scenario) -> np.ndarray:
    """Diagonal of Gamma_2 in canonical state order."""
    md, g = s.model, s.gains
    parts = [md.B ** -0.5, md.M ** -0.5, 1.0 / md.Tg, 1.0 / md.Tl,
             np.sqrt(g.eta), np.sqrt(g.eta), np.sqrt(g.lam), np.sqrt(g.phi)]
    d = np.concatenate([np.asarray(x, float) for x in parts])
    if not np.all(d > 0) or not np.all(np.isfinite(d)):
        raise ValueError("Gamma_2 needs strictly positive parameters and gains")
    return d


def default_config(s: Scenario, w_star=None) -> LyapunovConfig:
    """k = 0.5 min diag(Gamma_2^2); w* from the optimization oracle unless given."""
    if w_star is None:
        sol = solve_nbo(assemble_nbo(s))
        w_star = SystemState.from_blocks(sol.state_blocks()).to_vector()
    return LyapunovConfig(k=0.5 * float((gamma2(s) ** 2).min()), w_star=_vec(w_star))


def field_F(w, s: Scenario, sigma: SigmaSets | None = None) -> np.ndarray:
    """F(w); the eta blocks use the positivity gates, or the given sigma sets."""
    w = _vec(w)
    md, g = s.model, s.gains
    sl = state_slices(md)
    C = build_incidence(md)
    th, om, pg, pl = (w[sl[b]] for b in ("theta_t", "omega", "pg", "pl"))
    ep, em, lam, ph = (w[sl[b]] for b in ("eta_p", "eta_m", "lambda", "phi_t"))
    z = pg - pl - s.p - C @ (md.B * ph)
    xp = ph - md.theta_hi
    xm = md.theta_lo - ph
    if sigma is None:
        gp = (ep > 0) | (xp > 0)
        gm = (em > 0) | (xm > 0)
    else:
        gp = np.ones(md.m, bool)
        gm = np.ones(md.m, bool)
        gp[list(sigma.sigma_p)] = False
        gm[list(sigma.sigma_m)] = False
    F = np.empty_like(w)
    F[sl["theta_t"]] = -np.sqrt(md.B) * (C.T @ om)
    F[sl["omega"]] = -(pg - pl - s.p - md.D * om - C @ (md.B * th)) / np.sqrt(md.M)
    F[sl["pg"]] = g.g * (md.alpha * pg + om + z + lam)
    F[sl["pl"]] = g.l * (md.beta * pl - om - z - lam)
    F[sl["eta_p"]] = -np.sqrt(g.eta) * np.where(gp, xp, 0.0)
    F[sl["eta_m"]] = -np.sqrt(g.eta) * np.where(gm, xm, 0.0)
    F[sl["lambda"]] = -np.sqrt(g.lam) * z
    F[sl["phi_t"]] = -np.sqrt(g.phi) * (md.B * (C.T @ (lam + z)) + em - ep)
    return F


def project_H(w, s: Scenario, F=None) -> np.ndarray:
    """Proj_S(w - F(w)): clamps only the Pg and Pl blocks to the capacity box."""
    w = _vec(w)
    F = field_F(w, s) if F is None else F
    md = s.model
    sl = state_slices(md)
    h = w - F
    h[sl["pg"]] = np.clip(h[sl["pg"]], md.pg_lo, md.pg_hi)
    h[sl["pl"]] = np.clip(h[sl["pl"]], md.pl_lo, md.pl_hi)
    return h


def projected_field(w, s: Scenario) -> np.ndarray:
    """Gamma_2 (H(w) - w)."""
    w = _vec(w)
    return gamma2(s) * (project_H(w, s) - w)


def lyapunov_value(w, cfg: LyapunovConfig, s: Scenario, sigma: SigmaSets | None = None) -> float:
    """V_2(w) = -(H - w)^T F - |H - w|^2 / 2 + k/2 (w - w*)^T Gamma_2^-2 (w - w*).

    F uses the gates of ``w`` itself unless ``sigma`` is given.
    """
    w = _vec(w)
    F = field_F(w, s, sigma)
    d = project_H(w, s, F) - w
    e = (w - cfg.w_star) / gamma2(s)
    return float(-d @ F - 0.5 * d @ d + 0.5 * cfg.k * e @ e)


def lyapunov_series(traj: Trajectory, cfg: LyapunovConfig) -> np.ndarray:
    s = traj.scenario
    return np.array([lyapunov_value(w, cfg, s) for w in traj.states])


def _reduced_index(s: Scenario, sigma: SigmaSets) -> np.ndarray:
    """Canonical indices kept after removing eta coordinates of sigma edges."""
    sl = state_slices(s.model)
    drop = [sl["eta_p"].start + k for k in sigma.sigma_p] + [sl["eta_m"].start + k for k in sigma.sigma_m]
    keep = np.ones(sl["phi_t"].stop, bool)
    keep[drop] = False
    return np.flatnonzero(keep)


@dataclass(frozen=True, eq=False)
class QReport:
    sigma: SigmaSets
    Q: np.ndarray
    index: np.ndarray  # canonical state index of each reduced coordinate
    min_eig_sym: float

    @property
    def psd_ok(self) -> bool:
        return self.min_eig_sym >= -1e-9


def q_matrix(sigma: SigmaSets, s: Scenario) -> QReport:
    """Q = Gamma_2^-1 dF/dw on the reduced coordinates for fixed sigma sets.

    Built block by block; the Pg / Pl rows include the lambda column
    (+I and -I) together with the other entries of the true Jacobian.
    """
    md, g = s.model, s.gains
    n, m = md.n_nodes, md.m
    sl = state_slices(md)
    N = sl["phi_t"].stop
    C = build_incidence(md)
    CB = C * md.B
    BCt = CB.T
    I = np.eye(n)
    J = np.zeros((N, N))

    def put(r, c, blk):
        J[sl[r], sl[c]] += blk

    # rows of Gamma_2^-1 dF/dw, one block row per state block
    put("theta_t", "omega", -BCt)
    put("omega", "theta_t", CB)
    put("omega", "omega", np.diag(md.D))
    put("omega", "pg", -I)
    put("omega", "pl", I)
    tg = np.diag(md.Tg * g.g)
    put("pg", "pg", tg @ (np.diag(md.alpha) + I))
    put("pg", "omega", tg)
    put("pg", "pl", -tg)
    put("pg", "phi_t", -tg @ CB)
    put("pg", "lambda", tg)
    tl = np.diag(md.Tl * g.l)
    put("pl", "pl", tl @ (np.diag(md.beta) + I))
    put("pl", "omega", -tl)
    put("pl", "pg", -tl)
    put("pl", "phi_t", tl @ CB)
    put("pl", "lambda", -tl)
    Ip = np.diag([0.0 if k in sigma.sigma_p else 1.0 for k in range(m)])
    Im = np.diag([0.0 if k in sigma.sigma_m else 1.0 for k in range(m)])
    put("eta_p", "phi_t", -Ip)
    put("eta_m", "phi_t", Im)
    put("lambda", "pg", -I)
    put("lambda", "pl", I)
    put("lambda", "phi_t", CB)
    put("phi_t", "lambda", -BCt)
    put("phi_t", "pg", -BCt)
    put("phi_t", "pl", BCt)
    put("phi_t", "phi_t", BCt @ CB)
    put("phi_t", "eta_m", -np.eye(m))
    put("phi_t", "eta_p", np.eye(m))
    idx = _reduced_index(s, sigma)
    Q = J[np.ix_(idx, idx)]
    min_eig = float(np.linalg.eigvalsh(0.5 * (Q + Q.T)).min()) if len(idx) else 0.0
    return QReport(sigma=sigma, Q=Q, index=idx, min_eig_sym=min_eig)


def interior_state(s: Scenario, sigma: SigmaSets, rng: np.random.Generator) -> np.ndarray:
    """Random state strictly inside the region where the gates match ``sigma``."""
    md = s.model
    sl = state_slices(md)
    w = np.zeros(sl["phi_t"].stop)
    n, m = md.n_nodes, md.m
    w[sl["theta_t"]] = rng.normal(size=m) * 0.1
    w[sl["omega"]] = rng.normal(size=n) * 0.1
    w[sl["pg"]] = md.pg_lo + (md.pg_hi - md.pg_lo) * rng.uniform(0.1, 0.9, n)
    w[sl["pl"]] = md.pl_lo + (md.pl_hi - md.pl_lo) * rng.uniform(0.1, 0.9, n)
    w[sl["lambda"]] = rng.normal(size=n) * 50
    lo = np.where(np.isfinite(md.theta_lo), md.theta_lo, -1.0)
    hi = np.where(np.isfinite(md.theta_hi), md.theta_hi, 1.0)
    for k in range(m):
        in_p, in_m = k in sigma.sigma_p, k in sigma.sigma_m
        if in_p and in_m:
            w[sl["phi_t"].start + k] = lo[k] + (hi[k] - lo[k]) * rng.uniform(0.1, 0.9)
        elif in_p:
            w[sl["phi_t"].start + k] = hi[k] - rng.uniform(0.05, 0.5)
        elif in_m:
            w[sl["phi_t"].start + k] = lo[k] + rng.uniform(0.05, 0.5)
        else:
            w[sl["phi_t"].start + k] = rng.uniform(lo[k], hi[k])
        w[sl["eta_p"].start + k] = 0.0 if in_p else rng.uniform(1.0, 100.0)
        w[sl["eta_m"].start + k] = 0.0 if in_m else rng.uniform(1.0, 100.0)
    return w


def jacobian_gap(q: QReport, s: Scenario, w, h: float = 1e-3) -> float:
    """max |Gamma_2 Q - dF/dw| with the Jacobian by central differences at ``w``."""
    w = _vec(w)
    g2 = gamma2(s)[q.index]
    Jfd = np.empty((len(q.index), len(q.index)))
    for c, i in enumerate(q.index):
        wp, wm = w.copy(), w.copy()
        wp[i] += h
        wm[i] -= h
        Jfd[:, c] = (field_F(wp, s, q.sigma) - field_F(wm, s, q.sigma))[q.index] / (2 * h)
    return float(np.max(np.abs(g2[:, None] * q.Q - Jfd), initial=0.0))


def q_check(sigma: SigmaSets, s: Scenario, n_states: int = 5, seed: int = 0) -> dict:
    q = q_matrix(sigma, s)
    rng = np.random.default_rng(seed)
    gaps = [jacobian_gap(q, s, interior_state(s, sigma, rng)) for _ in range(n_states)]
    return {
        "sigma_p": sorted(sigma.sigma_p), "sigma_m": sorted(sigma.sigma_m),
        "min_eig_sym": q.min_eig_sym, "psd_ok": q.psd_ok,
        "max_jacobian_gap": max(gaps, default=0.0), "jacobian_ok": max(gaps, default=0.0) < 1e-6,
    }


def monotonicity_audit(traj: Trajectory, cfg: LyapunovConfig, s: Scenario | None = None,
                       rel_tol: float = 1e-6) -> dict:
    """Sample-level audit of V_2 along a trajectory.

    A sample is a switch sample when its sigma sets differ from the previous
    one.  Between switches V_2 must not increase by more than
    rel_tol * max(1, V_2); at switches only downward jumps are allowed.
    """
    s = traj.scenario if s is None else s
    v = traj.v2 if traj.v2 is not None else lyapunov_series(traj, cfg)
    t = traj.times
    sig = [SigmaSets.of_state(w, s) for w in traj.states]
    violations, switches = [], []
    for k in range(1, len(v)):
        switched = sig[k] != sig[k - 1]
        if switched:
            switches.append({"t": float(t[k]), "jump": float(v[k] - v[k - 1]),
                             "sigma_p": sorted(sig[k].sigma_p), "sigma_m": sorted(sig[k].sigma_m)})
        inc = v[k] - v[k - 1]
        if inc > rel_tol * max(1.0, abs(v[k - 1])):
            violations.append({"t": float(t[k]), "increase": float(inc), "at_switch": bool(switched)})
    neg = [float(t[k]) for k in range(len(v)) if v[k] < -1e-12 * max(1.0, float(np.abs(v).max()))]

    # where V_2 has stopped moving, Pg, Pl and omega must be at rest
    sl = state_slices(s.model)
    tail = t >= t[-1] - 0.05 * traj.horizon
    rates = []
    for w in traj.states[tail]:
        f = projected_field(w, s)
        rates.append(max(np.abs(f[sl[b]]).max(initial=0.0) for b in ("omega", "pg", "pl")))
    tol = s.sim.eq_tol
    # V_2 >= |H - w|^2 / 2 on S, so |w'| <= max(Gamma_2) sqrt(2 V_2) at every sample
    gmax = float(gamma2(s).max())
    bound = gmax * np.sqrt(2.0 * np.maximum(v, 0.0))
    bound_ok = bool(np.all(traj.field_norm <= bound * (1 + 1e-9) + 1e-12))
    small_v = v < 1e-8
    literal = bool(np.all(traj.field_norm[small_v] < 1e-4))
    configs = sorted({x.key() for x in sig})
    return {
        "n_samples": int(len(v)),
        "v2_initial": float(v[0]),
        "v2_final": float(v[-1]),
        "v2_min": float(v.min()),
        "nonnegative": not neg,
        "negative_times": neg,
        "violations": violations,
        "switches": switches,
        "n_segments": len(switches) + 1,
        "sigma_configs": [{"sigma_p": list(a), "sigma_m": list(b)} for a, b in configs],
        "tail_max_rate": float(max(rates, default=0.0)),
        "tail_at_rest": bool(max(rates, default=0.0) < tol),
        "field_bound_ok": bound_ok,
        "small_v2_field_below_1e-4": literal,
        "converged": bool(v[-1] < 1e-6),
        "ok": bool(not violations and not neg and v[-1] < 1e-6 and bound_ok),
    }


def audit(traj: Trajectory, cfg: LyapunovConfig | None = None, n_states: int = 5) -> dict:
    """Monotonicity audit plus Q checks for every sigma configuration seen and both extremes."""
    s = traj.scenario
    cfg = default_config(s) if cfg is None else cfg
    if traj.v2 is None:
        traj = traj.with_v2(lyapunov_series(traj, cfg))
    mono = monotonicity_audit(traj, cfg, s)
    keys = {(tuple(c["sigma_p"]), tuple(c["sigma_m"])) for c in mono["sigma_configs"]}
    keys |= {SigmaSets.empty().key(), SigmaSets.full(s.model.m).key()}
    qs = [q_check(SigmaSets(frozenset(a), frozenset(b)), s, n_states) for a, b in sorted(keys)]
    return {
        "k": cfg.k,
        "monotonicity": mono,
        "q_checks": qs,
        "ok": bool(mono["ok"] and all(q["psd_ok"] and q["jacobian_ok"] for q in qs)),
    }
