"""Network-balance optimization problem and an independent active-set QP solver.

Variables are (theta[1:], phi[1:], omega, Pg, Pl) with the reference angles
theta_0 = phi_0 = 0, so edge quantities are theta_t = C^T theta and
phi_t = C^T phi.  The Lagrangian convention is L = f + y^T (A x - b) +
eta^T (G x - h), which makes y the (mu, lambda) multipliers with the same sign
as the controller states.  Nothing in here touches the plant, controller or
simulator code.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .network import NetworkModel, Scenario, build_incidence


class NboError(RuntimeError):
    pass


class NboInfeasible(NboError):
    pass


@dataclass(frozen=True, eq=False)
class NboProblem:
    model: NetworkModel
    p: np.ndarray
    H: np.ndarray
    c: np.ndarray
    const: float
    A: np.ndarray  # rows 0..n-1: physical balance (mu); rows n..2n-1: virtual balance (lambda)
    b: np.ndarray
    G: np.ndarray
    h: np.ndarray
    labels: tuple  # (kind, index) per row of G
    Ct: np.ndarray  # C^T restricted to non-reference node columns
    L: np.ndarray  # C B C^T restricted to non-reference node columns

    @property
    def n(self) -> int:
        return self.model.n_nodes

    @property
    def m(self) -> int:
        return self.model.m

    @property
    def n_var(self) -> int:
        return 2 * (self.n - 1) + 3 * self.n

    def var_slices(self) -> dict:
        n = self.n
        r = n - 1
        return {
            "theta": slice(0, r), "phi": slice(r, 2 * r), "omega": slice(2 * r, 2 * r + n),
            "pg": slice(2 * r + n, 2 * r + 2 * n), "pl": slice(2 * r + 2 * n, 2 * r + 3 * n),
        }

    @property
    def n_eq(self) -> int:
        return self.A.shape[0]

    @property
    def n_box(self) -> int:
        return 2 * self.n

    @property
    def n_interval(self) -> int:
        return self.m

    def objective(self, x) -> float:
        return float(0.5 * x @ self.H @ x + self.c @ x + self.const)


@dataclass(frozen=True, eq=False)
class NboSolution:
    problem: NboProblem
    x: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    theta_t: np.ndarray
    phi_t: np.ndarray
    omega: np.ndarray
    pg: np.ndarray
    pl: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    eta_p: np.ndarray
    eta_m: np.ndarray
    objective: float
    iterations: int
    active: dict = field(default_factory=dict)

    def state_blocks(self) -> dict:
        """Closed-loop equilibrium implied by the optimum, keyed by state block."""
        return {
            "theta_t": self.theta_t, "omega": self.omega, "pg": self.pg, "pl": self.pl,
            "eta_p": self.eta_p, "eta_m": self.eta_m, "lambda": self.lam, "phi_t": self.phi_t,
        }

    @property
    def flows(self) -> np.ndarray:
        return self.problem.model.B * self.theta_t


def assemble_nbo(s: Scenario | NetworkModel, p=None) -> NboProblem:
    """Build the QP for a scenario (or a model plus disturbance ``p``)."""
    if isinstance(s, Scenario):
        model, p = s.model, s.p if p is None else p
    else:
        model = s
    p = np.asarray(p, dtype=float)
    n, m = model.n_nodes, model.m
    if p.shape != (n,):
        raise ValueError("disturbance needs one entry per node")
    C = build_incidence(model)
    Ct = C.T[:, 1:]
    L = (C * model.B) @ Ct
    r = n - 1
    nv = 2 * r + 3 * n
    th, ph = slice(0, r), slice(r, 2 * r)
    om, pg, pl = slice(2 * r, 2 * r + n), slice(2 * r + n, 2 * r + 2 * n), slice(2 * r + 2 * n, nv)

    # z = S x - p with S x = Pg - Pl - L phi
    S = np.zeros((n, nv))
    S[:, pg] = np.eye(n)
    S[:, pl] = -np.eye(n)
    S[:, ph] = -L
    H = S.T @ S
    H[om, om] += np.diag(model.D)
    H[pg, pg] += np.diag(model.alpha)
    H[pl, pl] += np.diag(model.beta)
    c = -S.T @ p
    const = 0.5 * float(p @ p)

    A = np.zeros((2 * n, nv))
    A[:n, pg] = np.eye(n)
    A[:n, pl] = -np.eye(n)
    A[:n, om] = -np.diag(model.D)
    A[:n, th] = -L
    A[n:] = S
    b = np.concatenate([p, p])

    rows, rhs, labels = [], [], []

    def add(kind, idx, g, hval):
        if math.isfinite(hval):
            rows.append(g)
            rhs.append(hval)
            labels.append((kind, idx))

    for j in range(n):
        e = np.zeros(nv)
        e[pg.start + j] = 1.0
        add("pg_hi", j, e, model.pg_hi[j])
        add("pg_lo", j, -e, -model.pg_lo[j])
    for j in range(n):
        e = np.zeros(nv)
        e[pl.start + j] = 1.0
        add("pl_hi", j, e, model.pl_hi[j])
        add("pl_lo", j, -e, -model.pl_lo[j])
    for k in range(m):
        g = np.zeros(nv)
        g[ph] = Ct[k]
        add("phi_hi", k, g, model.theta_hi[k])
        add("phi_lo", k, -g, -model.theta_lo[k])
    G = np.array(rows).reshape(len(rows), nv)
    return NboProblem(model=model, p=p, H=H, c=c, const=const, A=A, b=b, G=G,
                      h=np.array(rhs, dtype=float), labels=tuple(labels), Ct=Ct, L=L)


def _feasible_point(prob: NboProblem) -> np.ndarray:
    res = linprog(np.zeros(prob.n_var), A_ub=prob.G if len(prob.h) else None,
                  b_ub=prob.h if len(prob.h) else None, A_eq=prob.A, b_eq=prob.b,
                  bounds=[(None, None)] * prob.n_var, method="highs")
    if res.status == 2:
        raise NboInfeasible("no point satisfies the balance, capacity and line constraints")
    if res.status != 0:
        raise NboError(f"feasibility phase failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def _eqp(prob: NboProblem, W: list):
    """Minimize the objective with equalities plus working-set rows held tight."""
    Aw = np.vstack([prob.A, prob.G[W]]) if W else prob.A
    bw = np.concatenate([prob.b, prob.h[W]]) if W else prob.b
    nv, k = prob.n_var, Aw.shape[0]
    K = np.zeros((nv + k, nv + k))
    K[:nv, :nv] = prob.H
    K[:nv, nv:] = Aw.T
    K[nv:, :nv] = Aw
    rhs = np.concatenate([-prob.c, bw])
    sol = np.linalg.solve(K, rhs)
    for _ in range(2):  # iterative refinement
        sol += np.linalg.solve(K, rhs - K @ sol)
    return sol[:nv], sol[nv:nv + prob.n_eq], sol[nv + prob.n_eq:]


def _independent(prob: NboProblem, W: list, i: int) -> bool:
    M = np.vstack([prob.A, prob.G[W + [i]]])
    return np.linalg.matrix_rank(M) == M.shape[0]


def solve_nbo(prob: NboProblem, *, max_iter: int = 500, tol: float = 1e-10) -> NboSolution:
    """Primal active-set method; ties are broken by lowest constraint index."""
    x = _feasible_point(prob)
    G, h = prob.G, prob.h
    scale = max(1.0, float(np.abs(h).max(initial=0.0)))
    W: list = []
    for i in range(len(h)):
        if G[i] @ x - h[i] > -1e-9 * scale and _independent(prob, W, i):
            W.append(i)
    for it in range(1, max_iter + 1):
        xn, y, nu = _eqp(prob, W)
        d = xn - x
        if np.max(np.abs(d), initial=0.0) <= tol * max(1.0, np.max(np.abs(x))):
            x = xn
            if not W or nu.min() >= -tol * max(1.0, np.abs(nu).max()):
                return _package(prob, x, y, W, nu, it)
            W.pop(int(np.argmin(nu)))  # argmin returns the lowest index on ties
            continue
        alpha, block = 1.0, None
        for i in range(len(h)):
            if i in W:
                continue
            gd = G[i] @ d
            if gd > 1e-14 * max(1.0, np.abs(G[i]).max() * np.abs(d).max()):
                a = (h[i] - G[i] @ x) / gd
                if a < alpha:
                    alpha, block = max(a, 0.0), i
        x = x + alpha * d
        if block is not None:
            W.append(block)
    raise NboError(f"active-set method did not terminate in {max_iter} iterations")


def _package(prob: NboProblem, x, y, W, nu, iterations) -> NboSolution:
    n, m = prob.n, prob.m
    sl = prob.var_slices()
    eta_p, eta_m = np.zeros(m), np.zeros(m)
    active = {k: [] for k in ("pg_lo", "pg_hi", "pl_lo", "pl_hi", "phi_lo", "phi_hi")}
    for i, v in zip(W, nu):
        kind, idx = prob.labels[i]
        active[kind].append(idx)
        if kind == "phi_hi":
            eta_p[idx] = max(v, 0.0)
        elif kind == "phi_lo":
            eta_m[idx] = max(v, 0.0)
    active = {k: sorted(v) for k, v in active.items()}
    theta = np.concatenate([[0.0], x[sl["theta"]]])
    phi = np.concatenate([[0.0], x[sl["phi"]]])
    return NboSolution(
        problem=prob, x=x, theta=theta, phi=phi,
        theta_t=prob.Ct @ x[sl["theta"]], phi_t=prob.Ct @ x[sl["phi"]],
        omega=x[sl["omega"]].copy(), pg=x[sl["pg"]].copy(), pl=x[sl["pl"]].copy(),
        lam=y[n:].copy(), mu=y[:n].copy(), eta_p=eta_p, eta_m=eta_m,
        objective=prob.objective(x), iterations=iterations, active=active,
    )


def _lagrangian_grad(prob: NboProblem, x, mu, lam, eta_p, eta_m) -> np.ndarray:
    y = np.concatenate([mu, lam])
    g = prob.H @ x + prob.c + prob.A.T @ y
    sl = prob.var_slices()
    g[sl["phi"]] += prob.Ct.T @ (np.asarray(eta_p) - np.asarray(eta_m))
    return g


def lagrangian(sol: NboSolution, prob: NboProblem | None = None) -> float:
    """L = f + mu^T(5a) + lambda^T(5b) + eta+^T(phi_t - th_hi) + eta-^T(th_lo - phi_t)."""
    prob = sol.problem if prob is None else prob
    md = prob.model
    x = sol.x
    val = prob.objective(x) + np.concatenate([sol.mu, sol.lam]) @ (prob.A @ x - prob.b)
    for eta, gap in ((sol.eta_p, sol.phi_t - md.theta_hi), (sol.eta_m, md.theta_lo - sol.phi_t)):
        on = eta != 0
        val += float(eta[on] @ gap[on])
    return float(val)


def kkt_residuals(sol: NboSolution, prob: NboProblem | None = None) -> dict:
    """Stationarity, primal and dual feasibility, complementarity (max-abs norms).

    Pg and Pl stationarity uses the projected-gradient form
    |x - clip(x - grad)|, which absorbs the capacity-box multipliers.
    """
    prob = sol.problem if prob is None else prob
    md = prob.model
    sl = prob.var_slices()
    x = sol.x
    g = _lagrangian_grad(prob, x, sol.mu, sol.lam, sol.eta_p, sol.eta_m)
    pg, pl = x[sl["pg"]], x[sl["pl"]]
    st = np.concatenate([
        g[sl["theta"]], g[sl["phi"]], g[sl["omega"]],
        pg - np.clip(pg - g[sl["pg"]], md.pg_lo, md.pg_hi),
        pl - np.clip(pl - g[sl["pl"]], md.pl_lo, md.pl_hi),
    ])
    feas = np.concatenate([
        np.abs(prob.A @ x - prob.b),
        np.maximum(prob.G @ x - prob.h, 0.0) if len(prob.h) else np.zeros(0),
    ])
    dual = np.maximum(-np.concatenate([sol.eta_p, sol.eta_m]), 0.0)
    comp = []
    for eta, gap in ((sol.eta_p, sol.phi_t - md.theta_hi), (sol.eta_m, md.theta_lo - sol.phi_t)):
        for e, s in zip(eta, gap):
            comp.append(0.0 if e == 0 else abs(e * s))
    return {
        "stationarity": float(np.max(np.abs(st), initial=0.0)),
        "primal_feas": float(np.max(feas, initial=0.0)),
        "dual_feas": float(np.max(dual, initial=0.0)),
        "complementarity": float(max(comp, default=0.0)),
    }


def edge_stationarity(sol: NboSolution) -> float:
    """Residual of B C^T lambda = eta+ - eta- in edge space (zero iff phi_t is stationary for the controller)."""
    md = sol.problem.model
    C = build_incidence(md)
    r = md.B * (C.T @ sol.lam) - sol.eta_p + sol.eta_m
    return float(np.max(np.abs(r), initial=0.0))


def with_duals(sol: NboSolution, **changes) -> NboSolution:
    """Copy of a solution with some fields replaced (for perturbation checks)."""
    from dataclasses import replace

    return replace(sol, **{k: np.asarray(v, dtype=float) for k, v in changes.items()})


@dataclass
class Tolerances:
    power: float = 1e-3  # MW
    omega: float = 1e-4
    angle_gap: float = 1e-6  # rad
    balance: float = 1e-6  # MW
    line: float = 1e-3  # MW


def compare_equilibrium(sim_eq, sol: NboSolution, tol: Tolerances | None = None) -> dict:
    """Block-wise gaps between a simulated equilibrium and the oracle optimum."""
    tol = Tolerances() if tol is None else tol
    md = sol.problem.model
    p = sol.problem.p
    gap = lambda a, b: float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0))  # noqa: E731
    flows = md.B * np.asarray(sim_eq.theta_t)
    lo, hi = md.theta_lo * md.B, md.theta_hi * md.B
    line_excess = float(max(np.max(np.maximum(flows - hi, lo - flows), initial=0.0), 0.0))
    rep = {
        "omega_max": float(np.max(np.abs(sim_eq.omega), initial=0.0)),
        "pg_gap": gap(sim_eq.pg, sol.pg),
        "pl_gap": gap(sim_eq.pl, sol.pl),
        "flow_gap": gap(flows, sol.flows),
        "lambda_gap": gap(sim_eq.lam, sol.lam),
        "eta_p_gap": gap(sim_eq.eta_p, sol.eta_p),
        "eta_m_gap": gap(sim_eq.eta_m, sol.eta_m),
        "theta_phi_gap_sim": gap(sim_eq.theta_t, sim_eq.phi_t),
        "theta_phi_gap_oracle": gap(sol.theta_t, sol.phi_t),
        "line_excess": line_excess,
        "balance_sim": float(abs(np.sum(sim_eq.pg - sim_eq.pl - p))),
        "balance_oracle": float(abs(np.sum(sol.pg - sol.pl - p))),
    }
    rep["ok"] = bool(
        rep["omega_max"] < tol.omega
        and max(rep["pg_gap"], rep["pl_gap"], rep["flow_gap"]) < tol.power
        and max(rep["theta_phi_gap_sim"], rep["theta_phi_gap_oracle"]) < tol.angle_gap
        and max(rep["balance_sim"], rep["balance_oracle"]) < tol.balance
        and rep["line_excess"] <= tol.line
    )
    return rep


def solution_to_dict(sol: NboSolution) -> dict:
    md = sol.problem.model
    lst = lambda v: [float(x) for x in v]  # noqa: E731
    return {
        "primal": {
            "theta_t": lst(sol.theta_t), "phi_t": lst(sol.phi_t), "omega": lst(sol.omega),
            "pg": lst(sol.pg), "pl": lst(sol.pl),
            "pg_abs": lst(sol.pg + md.base_pg), "pl_abs": lst(sol.pl + md.base_pl),
            "flows": lst(sol.flows), "flows_abs": lst(sol.flows + md.base_flow),
        },
        "dual": {"lambda": lst(sol.lam), "mu": lst(sol.mu), "eta_p": lst(sol.eta_p), "eta_m": lst(sol.eta_m)},
        "objective": sol.objective,
        "kkt": kkt_residuals(sol),
        "active": sol.active,
        "iterations": sol.iterations,
    }
