"""Aggregate area dynamics: swing equation, turbine and controllable-load lags."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .network import NetworkModel


@dataclass
class PlantState:
    theta_t: np.ndarray  # per-edge angle differences C^T theta, rad
    omega: np.ndarray
    pg: np.ndarray
    pl: np.ndarray


@njit(cache=True)
def inc_mul(src, dst, xe, n):
    """C @ xe for an edge vector, with C given by edge endpoints."""
    out = np.zeros(n)
    for k in range(src.shape[0]):
        out[src[k]] += xe[k]
        out[dst[k]] -= xe[k]
    return out


@njit(cache=True)
def inc_t_mul(src, dst, v):
    """C^T @ v for a node vector."""
    return v[src] - v[dst]


@njit(cache=True)
def plant_field(theta_t, omega, pg, pl, ug, ul, p, src, dst, B, M, D, R, Tg, Tl):
    n = omega.shape[0]
    d_theta = inc_t_mul(src, dst, omega)
    d_omega = (pg - pl - p - D * omega - inc_mul(src, dst, B * theta_t, n)) / M
    d_pg = (-pg + ug - omega / R) / Tg
    d_pl = (-pl + ul) / Tl
    return d_theta, d_omega, d_pg, d_pl


def _check(x: PlantState, model: NetworkModel):
    n, m = model.n_nodes, model.m
    for name, size in (("theta_t", m), ("omega", n), ("pg", n), ("pl", n)):
        if np.shape(getattr(x, name)) != (size,):
            raise ValueError(f"{name} has shape {np.shape(getattr(x, name))}, expected ({size},)")


def plant_rhs(x: PlantState, u, p, model: NetworkModel) -> PlantState:
    """Time derivative of the plant state under inputs ``u = (ug, ul)``."""
    _check(x, model)
    ug, ul = (np.asarray(v, dtype=float) for v in u)
    p = np.asarray(p, dtype=float)
    n = model.n_nodes
    if ug.shape != (n,) or ul.shape != (n,) or p.shape != (n,):
        raise ValueError("inputs and disturbance need one entry per node")
    out = plant_field(
        np.asarray(x.theta_t, float), np.asarray(x.omega, float), np.asarray(x.pg, float),
        np.asarray(x.pl, float), ug, ul, p, model.src, model.dst,
        model.B, model.M, model.D, model.R, model.Tg, model.Tl,
    )
    return PlantState(*out)


def tie_line_flows(theta_t, model: NetworkModel) -> np.ndarray:
    """DC flow on each tie line, positive from edge source to sink (MW deviation)."""
    return model.B * np.asarray(theta_t, dtype=float)


def absolute_flows(theta_t, model: NetworkModel) -> np.ndarray:
    return model.base_flow + tie_line_flows(theta_t, model)


def power_balance_residual(pg, pl, p, theta_t, model: NetworkModel) -> np.ndarray:
    """Per-node Pg - Pl - p + inflow - outflow; zero at any equilibrium."""
    flows = tie_line_flows(theta_t, model)
    return pg - pl - p - inc_mul(model.src, model.dst, flows, model.n_nodes)
