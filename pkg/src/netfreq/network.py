"""Network model, scenario container and scenario document I/O.

All powers are MW deviations from the pre-disturbance operating point.  A
scenario document may carry the base operating point (``pg_base``,
``pl_base``, ``flow_base``); when it does, the capacity boxes and line limits
in the document are read in that absolute frame and converted to deviations
on load.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

DEFAULT_B = 100.0
DEFAULT_M = 0.2
DEFAULT_GAIN_LAMBDA = 2.0

NODE_PARAMS = ("M", "D", "R", "Tg", "Tl", "alpha", "beta")
STATE_BLOCKS = ("theta_t", "omega", "pg", "pl", "eta_p", "eta_m", "lambda", "phi_t")


class ScenarioError(ValueError):
    """Raised when a scenario cannot be parsed or fails validation.

    ``errors`` holds every violated condition, one message each.
    """

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True, eq=False)
class NetworkModel:
    n_nodes: int
    edges: tuple
    B: np.ndarray
    M: np.ndarray
    D: np.ndarray
    R: np.ndarray
    Tg: np.ndarray
    Tl: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    pg_lo: np.ndarray
    pg_hi: np.ndarray
    pl_lo: np.ndarray
    pl_hi: np.ndarray
    theta_lo: np.ndarray
    theta_hi: np.ndarray
    # base operating point, only used to report absolute values
    pg_base: np.ndarray | None = None
    pl_base: np.ndarray | None = None
    flow_base: np.ndarray | None = None
    names: tuple = ()

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def src(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=np.int64)

    @property
    def dst(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=np.int64)

    @property
    def base_pg(self) -> np.ndarray:
        return np.zeros(self.n_nodes) if self.pg_base is None else self.pg_base

    @property
    def base_pl(self) -> np.ndarray:
        return np.zeros(self.n_nodes) if self.pl_base is None else self.pl_base

    @property
    def base_flow(self) -> np.ndarray:
        return np.zeros(self.m) if self.flow_base is None else self.flow_base


@dataclass(frozen=True, eq=False)
class Gains:
    lam: np.ndarray
    eta: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    l: np.ndarray

    @classmethod
    def default(cls, model: NetworkModel) -> "Gains":
        """Gains scaled to the model.

        gamma_g = 1/Tg and gamma_l = 1/Tl make the closed loop coincide with
        the gradient-projection form used by the Lyapunov analysis; the edge
        gains are scaled by B so the virtual-angle loop is not stiff.
        """
        return cls(
            lam=np.full(model.n_nodes, DEFAULT_GAIN_LAMBDA),
            eta=model.B**2,
            phi=1.0 / model.B**2,
            g=1.0 / model.Tg,
            l=1.0 / model.Tl,
        )


@dataclass(frozen=True)
class SimSettings:
    dt: float = 1e-3
    horizon: float = 400.0
    eq_tol: float = 1e-4
    record_every: int = 100
    divergence_bound: float = 1e9


@dataclass(frozen=True, eq=False)
class Scenario:
    model: NetworkModel
    p: np.ndarray
    gains: Gains
    x0: dict
    sim: SimSettings = field(default_factory=SimSettings)
    name: str = ""
    # raw document and defaults applied on load, for the echo
    source: dict | None = None
    defaults_applied: tuple = ()


def build_incidence(model: NetworkModel) -> np.ndarray:
    """Node-edge incidence matrix, +1 at the edge source and -1 at the sink."""
    n, m = model.n_nodes, len(model.edges)
    C = np.zeros((n, m))
    for k, (i, j) in enumerate(model.edges):
        if not (0 <= i < n and 0 <= j < n):
            raise ScenarioError(f"edge {k} ({i},{j}) has an endpoint outside 0..{n - 1}")
        C[i, k] = 1.0
        C[j, k] = -1.0
    return C


def zero_state(model: NetworkModel) -> dict:
    n, m = model.n_nodes, model.m
    sizes = (m, n, n, n, m, m, n, m)
    return {name: np.zeros(s) for name, s in zip(STATE_BLOCKS, sizes)}


def _is_connected(n: int, edges) -> bool:
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        if 0 <= i < n and 0 <= j < n:
            adj[i].add(j)
            adj[j].add(i)
    seen, stack = {0}, [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == n


def validate_scenario(s: Scenario) -> Scenario:
    """Return ``s`` unchanged if every model and scenario invariant holds.

    Raises ScenarioError listing all violations otherwise.
    """
    model = s.model
    n, m = model.n_nodes, model.m
    errors = []

    if n < 1:
        errors.append("model has no nodes")
    for k, (i, j) in enumerate(model.edges):
        if not (0 <= i < n and 0 <= j < n):
            errors.append(f"edge {k} ({i},{j}) has an endpoint outside 0..{n - 1}")
        elif i == j:
            errors.append(f"edge {k} is a self loop at node {i}")
    if n >= 1 and not _is_connected(n, model.edges):
        errors.append("graph is not connected")

    shape_errors = []
    for name, size in [(k, n) for k in NODE_PARAMS + ("pg_lo", "pg_hi", "pl_lo", "pl_hi")] + [
        (k, m) for k in ("B", "theta_lo", "theta_hi")
    ]:
        if np.shape(getattr(model, name)) != (size,):
            shape_errors.append(f"{name} has shape {np.shape(getattr(model, name))}, expected ({size},)")
    if shape_errors or any(e.startswith("edge") for e in errors):
        # the remaining checks index per node and per edge
        raise ScenarioError(errors + shape_errors)

    for name in ("B",) + NODE_PARAMS:
        vals = getattr(model, name)
        for k in np.flatnonzero(~(vals > 0)):
            errors.append(f"{name}[{k}] = {vals[k]!r} must be strictly positive")

    for j in range(n):
        if not model.pg_lo[j] < 0:
            errors.append(f"A1 violated: lower generation bound not negative at node {j}")
        if not model.pg_hi[j] > 0:
            errors.append(f"A1 violated: upper generation bound not positive at node {j}")
        if not model.pl_lo[j] < 0:
            errors.append(f"A1 violated: lower load bound not negative at node {j}")
        if not model.pl_hi[j] > 0:
            errors.append(f"A1 violated: upper load bound not positive at node {j}")
    for k in range(m):
        if not model.theta_lo[k] <= 0 <= model.theta_hi[k]:
            errors.append(f"A1 violated: angle limits of edge {k} do not straddle zero")

    if np.shape(s.p) != (n,) or not np.all(np.isfinite(s.p)):
        errors.append("load disturbance p must be a finite vector with one entry per node")

    g = s.gains
    for name, size in (("lam", n), ("eta", m), ("phi", m), ("g", n), ("l", n)):
        vals = np.asarray(getattr(g, name))
        if vals.shape != (size,):
            errors.append(f"gain {name} has shape {vals.shape}, expected ({size},)")
        elif not np.all(vals > 0):
            errors.append(f"gain {name} must be strictly positive")

    sizes = dict(zip(STATE_BLOCKS, (m, n, n, n, m, m, n, m)))
    for name, size in sizes.items():
        v = s.x0.get(name)
        if v is None or np.shape(v) != (size,):
            errors.append(f"x0.{name} must have length {size}")
        elif not np.all(np.isfinite(v)):
            errors.append(f"x0.{name} is not finite")
    if not errors:
        pg, pl = s.x0["pg"], s.x0["pl"]
        for j in range(n):
            if not model.pg_lo[j] <= pg[j] <= model.pg_hi[j]:
                errors.append(f"A3 violated: initial generation at node {j} outside its capacity box")
            if not model.pl_lo[j] <= pl[j] <= model.pl_hi[j]:
                errors.append(f"A3 violated: initial load at node {j} outside its capacity box")
        if np.any(s.x0["eta_p"] < 0) or np.any(s.x0["eta_m"] < 0):
            errors.append("initial line multipliers must be nonnegative")

    sim = s.sim
    if not sim.dt > 0:
        errors.append("sim.dt must be positive")
    if not sim.horizon >= 0:
        errors.append("sim.horizon must be nonnegative")
    if not sim.eq_tol > 0:
        errors.append("sim.eq_tol must be positive")
    if not (isinstance(sim.record_every, int) and sim.record_every >= 1):
        errors.append("sim.record_every must be a positive integer")

    if errors:
        raise ScenarioError(errors)
    return s


# --- scenario document --------------------------------------------------------

def _num(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {v!r}")
    return float(v)


def _pair(v, where, allow_none=False):
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ScenarioError(f"{where}: expected [lo, hi]")
    if allow_none:
        # null stands for an unbounded side
        lo = -math.inf if v[0] is None else _num(v[0], f"{where}[0]")
        hi = math.inf if v[1] is None else _num(v[1], f"{where}[1]")
        return lo, hi
    return _num(v[0], f"{where}[0]"), _num(v[1], f"{where}[1]")


def _vector(v, size, where):
    if not isinstance(v, (list, tuple)) or len(v) != size:
        raise ScenarioError(f"{where}: expected a list of {size} numbers")
    return np.array([_num(x, f"{where}[{i}]") for i, x in enumerate(v)])


def scenario_from_dict(doc: dict) -> Scenario:
    """Build and validate a Scenario from a parsed scenario document."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object")
    defaults = [str(d) for d in doc.get("defaults_applied", [])]
    nodes = doc.get("nodes")
    edges = doc.get("edges")
    if not isinstance(nodes, list) or not nodes:
        raise ScenarioError("missing field 'nodes' (non-empty list)")
    if not isinstance(edges, list):
        raise ScenarioError("missing field 'edges' (list)")
    n, m = len(nodes), len(edges)

    cols = {k: [] for k in NODE_PARAMS}
    pg, pl, dp, pg_base, pl_base, names = [], [], [], [], [], []
    for j, nd in enumerate(nodes):
        where = f"nodes[{j}]"
        if not isinstance(nd, dict):
            raise ScenarioError(f"{where}: expected an object")
        for k in NODE_PARAMS:
            if k not in nd:
                if k == "M":
                    cols[k].append(DEFAULT_M)
                    defaults.append(f"{where}.M={DEFAULT_M}")
                    continue
                raise ScenarioError(f"{where}: missing field '{k}'")
            cols[k].append(_num(nd[k], f"{where}.{k}"))
        for k in ("pg", "pl"):
            if k not in nd:
                raise ScenarioError(f"{where}: missing field '{k}'")
        pg.append(_pair(nd["pg"], f"{where}.pg"))
        pl.append(_pair(nd["pl"], f"{where}.pl"))
        dp.append(_num(nd.get("dp", 0.0), f"{where}.dp"))
        pg_base.append(_num(nd.get("pg_base", 0.0), f"{where}.pg_base"))
        pl_base.append(_num(nd.get("pl_base", 0.0), f"{where}.pl_base"))
        names.append(str(nd.get("name", f"node {j}")))

    ed, B, p_line, flow_base = [], [], [], []
    for k, e in enumerate(edges):
        where = f"edges[{k}]"
        if not isinstance(e, dict):
            raise ScenarioError(f"{where}: expected an object")
        for f in ("from", "to"):
            if f not in e:
                raise ScenarioError(f"{where}: missing field '{f}'")
            if isinstance(e[f], bool) or not isinstance(e[f], int):
                raise ScenarioError(f"{where}.{f}: expected an integer node index")
        ed.append((e["from"], e["to"]))
        if "B" in e:
            B.append(_num(e["B"], f"{where}.B"))
        else:
            B.append(DEFAULT_B)
            defaults.append(f"{where}.B={DEFAULT_B}")
        if "p_line" in e:
            p_line.append(_pair(e["p_line"], f"{where}.p_line", allow_none=True))
        else:
            p_line.append((-math.inf, math.inf))
            defaults.append(f"{where}.p_line=unbounded")
        flow_base.append(_num(e.get("flow_base", 0.0), f"{where}.flow_base"))

    pg, pl, p_line = np.array(pg).reshape(n, 2), np.array(pl).reshape(n, 2), np.array(p_line).reshape(m, 2)
    pg_base, pl_base, flow_base, B = map(np.array, (pg_base, pl_base, flow_base, B))
    has_base = bool(np.any(pg_base) or np.any(pl_base) or np.any(flow_base))

    model = NetworkModel(
        n_nodes=n,
        edges=tuple(ed),
        B=B,
        **{k: np.array(v) for k, v in cols.items()},
        pg_lo=pg[:, 0] - pg_base,
        pg_hi=pg[:, 1] - pg_base,
        pl_lo=pl[:, 0] - pl_base,
        pl_hi=pl[:, 1] - pl_base,
        theta_lo=(p_line[:, 0] - flow_base) / B if m else np.zeros(0),
        theta_hi=(p_line[:, 1] - flow_base) / B if m else np.zeros(0),
        pg_base=pg_base if has_base else None,
        pl_base=pl_base if has_base else None,
        flow_base=flow_base if has_base else None,
        names=tuple(names),
    )
    build_incidence(model)

    gdoc = doc.get("gains", {}) or {}
    if not isinstance(gdoc, dict):
        raise ScenarioError("gains: expected an object")
    dg = Gains.default(model)
    gains = {}
    for key, attr, size in (("lambda", "lam", n), ("eta", "eta", m), ("phi", "phi", m), ("g", "g", n), ("l", "l", n)):
        if key in gdoc:
            gains[attr] = _vector(gdoc[key], size, f"gains.{key}")
        else:
            gains[attr] = getattr(dg, attr)
            defaults.append(f"gains.{key}=default")

    sdoc = doc.get("sim", {}) or {}
    if not isinstance(sdoc, dict):
        raise ScenarioError("sim: expected an object")
    sim_kwargs = {}
    for key in ("dt", "horizon", "eq_tol", "divergence_bound"):
        if key in sdoc:
            sim_kwargs[key] = _num(sdoc[key], f"sim.{key}")
        else:
            defaults.append(f"sim.{key}=default")
    if "record_every" in sdoc:
        if isinstance(sdoc["record_every"], bool) or not isinstance(sdoc["record_every"], int):
            raise ScenarioError("sim.record_every: expected an integer")
        sim_kwargs["record_every"] = sdoc["record_every"]
    sim = SimSettings(**sim_kwargs)

    x0 = zero_state(model)
    xdoc = doc.get("x0")
    if xdoc is None:
        defaults.append("x0=zeros")
    else:
        if not isinstance(xdoc, dict):
            raise ScenarioError("x0: expected an object")
        unknown = set(xdoc) - set(STATE_BLOCKS)
        if unknown:
            raise ScenarioError(f"x0: unknown blocks {sorted(unknown)}")
        for key, v in xdoc.items():
            x0[key] = _vector(v, len(x0[key]), f"x0.{key}")

    scen = Scenario(
        model=model,
        p=np.array(dp),
        gains=Gains(**gains),
        x0=x0,
        sim=sim,
        name=str(doc.get("name", "")),
        defaults_applied=tuple(dict.fromkeys(defaults)),
    )
    validate_scenario(scen)
    # the echo keeps document-frame numbers as given, so it round-trips exactly
    norm = _model_to_doc(scen)
    for j, nd in enumerate(norm["nodes"]):
        nd["pg"], nd["pl"] = [float(x) for x in pg[j]], [float(x) for x in pl[j]]
        if model.pg_base is not None:
            nd["pg_base"], nd["pl_base"] = float(pg_base[j]), float(pl_base[j])
    for k, e in enumerate(norm["edges"]):
        lo, hi = p_line[k]
        if math.isfinite(lo) or math.isfinite(hi):
            e["p_line"] = [_fl(lo), _fl(hi)]
        else:
            e.pop("p_line", None)
        if model.flow_base is not None:
            e["flow_base"] = float(flow_base[k])
    return replace(scen, source=norm)


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: JSON parse error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(doc)


def _fl(x):
    x = float(x)
    if math.isinf(x):
        return None
    return x


def scenario_to_dict(s: Scenario) -> dict:
    """Echo a scenario as a fully explicit document.

    The echo carries every value used (defaults filled in) and lists the
    applied defaults under ``defaults_applied``; loading the echo and echoing
    again reproduces it exactly.
    """
    if s.source is not None:
        return json.loads(json.dumps(s.source))
    return _model_to_doc(s)


def _model_to_doc(s: Scenario) -> dict:
    model = s.model
    pgb, plb, fb = model.base_pg, model.base_pl, model.base_flow
    nodes = []
    for j in range(model.n_nodes):
        nd = {k: float(getattr(model, k)[j]) for k in NODE_PARAMS}
        nd["pg"] = [float(model.pg_lo[j] + pgb[j]), float(model.pg_hi[j] + pgb[j])]
        nd["pl"] = [float(model.pl_lo[j] + plb[j]), float(model.pl_hi[j] + plb[j])]
        nd["dp"] = float(s.p[j])
        if model.pg_base is not None:
            nd["pg_base"] = float(pgb[j])
            nd["pl_base"] = float(plb[j])
        if model.names:
            nd["name"] = model.names[j]
        nodes.append(nd)
    edges = []
    for k, (i, j) in enumerate(model.edges):
        e = {"from": int(i), "to": int(j), "B": float(model.B[k])}
        lo = model.theta_lo[k] * model.B[k] + fb[k]
        hi = model.theta_hi[k] * model.B[k] + fb[k]
        if math.isfinite(lo) or math.isfinite(hi):
            e["p_line"] = [_fl(lo), _fl(hi)]
        if model.flow_base is not None:
            e["flow_base"] = float(fb[k])
        edges.append(e)
    g = s.gains
    doc = {
        "name": s.name,
        "nodes": nodes,
        "edges": edges,
        "gains": {
            "lambda": g.lam.tolist(),
            "eta": np.asarray(g.eta, float).tolist(),
            "phi": np.asarray(g.phi, float).tolist(),
            "g": np.asarray(g.g, float).tolist(),
            "l": np.asarray(g.l, float).tolist(),
        },
        "sim": {
            "dt": float(s.sim.dt),
            "horizon": float(s.sim.horizon),
            "eq_tol": float(s.sim.eq_tol),
            "record_every": int(s.sim.record_every),
            "divergence_bound": float(s.sim.divergence_bound),
        },
        "x0": {k: np.asarray(v, float).tolist() for k, v in s.x0.items()},
    }
    if s.defaults_applied:
        doc["defaults_applied"] = list(s.defaults_applied)
    return doc


def dumps_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=2)


def with_updates(s: Scenario, **changes: Any) -> Scenario:
    """Copy of ``s`` with model fields, ``p``, ``gains``, ``x0`` or ``sim`` replaced.

    Model fields are given by name (``pg_hi=...``); the result is validated.
    """
    model_fields = {k: changes.pop(k) for k in list(changes) if hasattr(s.model, k)}
    model = replace(s.model, **model_fields) if model_fields else s.model
    return validate_scenario(replace(s, model=model, source=None, **changes))


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package, e.g. ``fourarea_nominal``."""
    fname = name if name.endswith(".json") else name + ".json"
    return Path(__file__).parent / "data" / fname
