"""Shared fixtures data and small model builders for the test suite."""
from __future__ import annotations

import math

import numpy as np

from netfreq.network import Gains, NetworkModel, Scenario, SimSettings, zero_state

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list = []

# Independent references: per-area economic dispatch solved by 1-D root finding
# on the uniform price (one price island per side of the binding radial line),
# then a DC flow of the resulting injections plus the pre-disturbance flows.
NOMINAL_REF = {
    "lam": -118.81318681318682,
    "pg_abs": (620.306593406593, 596.225274725275, 660.408791208791, 580.204395604396),
    "pl_abs": (23.274725274725, 60.0, 23.774725274725, 39.795604395604),
    "flow_abs": (-40.032600732601, 13.300732600733, 53.333333333333, -59.591208791209),
}
CONGESTION_REF = {
    "lam": (-115.10828025477707, -115.10828025477707, -115.10828025477707, -133.2),
    "pg_abs": (618.454140127389, 594.743312101911, 657.938853503185, 585.0),
    "pl_abs": (24.756687898089, 60.822929936306, 25.256687898089, 35.0),
    "flow_abs": (-36.492356687898, 13.094904458599, 49.587261146497, -50.0),
    "eta_m_edge3": 1809.1719745222917,
}

# Tables of the case study (absolute MW)
TABLE_NOMINAL = {
    "pg_abs": (620, 596, 660, 580),
    "pl_abs": (23.6, 59.8, 23.6, 39.7),
    "flow_abs": (-39.94, 13.35, 53.27, -59.6),
}
TABLE_CONGESTION = {
    "pg_abs": (618, 595, 658, 585),
    "pl_abs": (25.1, 60.7, 25.1, 34.9),
    "flow_abs": (-36.4, 13.1, 49.5, -49.9),
}


def small_model(n=2, edges=((0, 1),), *, alpha=None, beta=None, pg=(-100.0, 100.0), pl=(-50.0, 50.0),
                line=math.inf, B=100.0, M=1.0, D=0.05, R=0.05, Tg=2.0, Tl=2.0) -> NetworkModel:
    m = len(edges)
    ones = np.ones(n)
    return NetworkModel(
        n_nodes=n, edges=tuple(edges), B=np.full(m, B),
        M=M * ones, D=D * ones, R=R * ones, Tg=Tg * ones, Tl=Tl * ones,
        alpha=np.ones(n) if alpha is None else np.asarray(alpha, float),
        beta=np.ones(n) if beta is None else np.asarray(beta, float),
        pg_lo=np.full(n, pg[0]), pg_hi=np.full(n, pg[1]),
        pl_lo=np.full(n, pl[0]), pl_hi=np.full(n, pl[1]),
        theta_lo=np.full(m, -line / B), theta_hi=np.full(m, line / B),
    )


def small_scenario(model: NetworkModel, p, **sim) -> Scenario:
    return Scenario(model=model, p=np.asarray(p, float), gains=Gains.default(model),
                    x0=zero_state(model), sim=SimSettings(**sim))


def two_node_scenario(limit=math.inf, p=(0.0, 10.0), alpha=(1.0, 1.0)) -> Scenario:
    """Two nodes, controllable loads pinned at zero.  Built without validation:
    a [0, 0] load box does not straddle zero."""
    md = small_model(alpha=alpha, pl=(0.0, 0.0), line=limit)
    return small_scenario(md, p)


def brute_force_two_node(alpha, p1, limit, box=(-100.0, 100.0), step=1e-3):
    """Grid search over node-0 generation; node 1 covers the rest, flow = Pg0."""
    x = np.arange(box[0], box[1] + step / 2, step)
    y = p1 - x
    ok = (np.abs(x) <= limit + 1e-12) & (y >= box[0]) & (y <= box[1])
    cost = 0.5 * alpha[0] * x ** 2 + 0.5 * alpha[1] * y ** 2
    cost[~ok] = np.inf
    k = int(np.argmin(cost))
    return x[k], y[k]
