"""Distributed controller: multiplier and virtual-angle dynamics, saturated inputs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .network import Gains, NetworkModel
from .plant import PlantState, inc_mul, inc_t_mul


@dataclass
class ControllerState:
    lam: np.ndarray
    eta_p: np.ndarray
    eta_m: np.ndarray
    phi_t: np.ndarray  # per-edge virtual angle differences, rad


@njit(cache=True)
def _positive_projection(x, a):
    out = x.copy()
    for i in range(x.shape[0]):
        if not (a[i] > 0.0 or x[i] > 0.0):
            out[i] = 0.0
    return out


def positive_projection(x, a):
    """Componentwise [x]^+_a: x where a > 0 or x > 0, else 0."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if x.shape != a.shape:
        raise ValueError("x and a must have the same shape")
    return _positive_projection(x, a)


def saturate(x, lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if np.any(lo > hi):
        raise ValueError("saturation bounds with lo > hi")
    return np.minimum(hi, np.maximum(lo, x))


@njit(cache=True)
def z_field(pg, pl, p, phi_t, src, dst, B):
    return pg - pl - p - inc_mul(src, dst, B * phi_t, pg.shape[0])


@njit(cache=True)
def inputs_field(pg, pl, omega, lam, z, alpha, beta, R, g_g, g_l, pg_lo, pg_hi, pl_lo, pl_hi):
    ug = np.minimum(pg_hi, np.maximum(pg_lo, pg - g_g * (alpha * pg + omega + z + lam))) + omega / R
    ul = np.minimum(pl_hi, np.maximum(pl_lo, pl - g_l * (beta * pl - omega - z - lam)))
    return ug, ul


@njit(cache=True)
def controller_field(lam, eta_p, eta_m, phi_t, z, src, dst, B, th_lo, th_hi, g_lam, g_eta, g_phi):
    d_lam = g_lam * z
    d_eta_p = g_eta * _positive_projection(phi_t - th_hi, eta_p)
    d_eta_m = g_eta * _positive_projection(th_lo - phi_t, eta_m)
    d_phi = g_phi * (B * inc_t_mul(src, dst, lam + z) + eta_m - eta_p)
    return d_lam, d_eta_p, d_eta_m, d_phi


def compute_z(pg, pl, p, phi_t, model: NetworkModel) -> np.ndarray:
    """Local power mismatch seen against the virtual flows, Pg - Pl - p - C B phi_t."""
    args = [np.asarray(v, dtype=float) for v in (pg, pl, p, phi_t)]
    n, m = model.n_nodes, model.m
    if any(a.shape != (n,) for a in args[:3]) or args[3].shape != (m,):
        raise ValueError("dimension mismatch in compute_z")
    return z_field(*args, model.src, model.dst, model.B)


def estimate_z_measured(m_omega_dot, omega, flows_in, flows_out, phi_t, model: NetworkModel) -> np.ndarray:
    """z without reading the load disturbance.

    ``flows_in`` / ``flows_out`` are the per-node totals of tie-line flow
    entering and leaving each node; ``m_omega_dot`` is M * d(omega)/dt.
    """
    u_hat = inc_mul(model.src, model.dst, model.B * np.asarray(phi_t, float), model.n_nodes)
    return (np.asarray(m_omega_dot, float) + model.D * np.asarray(omega, float)
            - np.asarray(flows_in, float) + np.asarray(flows_out, float) - u_hat)


def incident_flows(flows, model: NetworkModel):
    """Per-node totals of incoming and outgoing edge flows."""
    flows = np.asarray(flows, float)
    fin = np.zeros(model.n_nodes)
    fout = np.zeros(model.n_nodes)
    np.add.at(fin, model.dst, flows)
    np.add.at(fout, model.src, flows)
    return fin, fout


def controller_rhs(c: ControllerState, x: PlantState, p, model: NetworkModel, gains: Gains) -> ControllerState:
    if np.any(np.asarray(c.eta_p) < 0) or np.any(np.asarray(c.eta_m) < 0):
        raise ValueError("line multipliers must be nonnegative")
    z = compute_z(x.pg, x.pl, p, c.phi_t, model)
    out = controller_field(
        np.asarray(c.lam, float), np.asarray(c.eta_p, float), np.asarray(c.eta_m, float),
        np.asarray(c.phi_t, float), z, model.src, model.dst, model.B,
        model.theta_lo, model.theta_hi, gains.lam, gains.eta, gains.phi,
    )
    return ControllerState(*out)


def control_inputs(c: ControllerState, x: PlantState, p, model: NetworkModel, gains: Gains):
    """Saturated generation and load commands (ug, ul), MW.

    The droop term omega/R is added outside the generation saturation.
    """
    z = compute_z(x.pg, x.pl, p, c.phi_t, model)
    return inputs_field(
        np.asarray(x.pg, float), np.asarray(x.pl, float), np.asarray(x.omega, float),
        np.asarray(c.lam, float), z, model.alpha, model.beta, model.R, gains.g, gains.l,
        model.pg_lo, model.pg_hi, model.pl_lo, model.pl_hi,
    )
