"""Command-line front end.

Exit codes: 0 pass, 1 verification gap, 2 divergence, 3 input error.
"""
from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import lyapunov, oracle
from .network import Scenario, ScenarioError, bundled_scenario_path, load_scenario, scenario_to_dict, validate_scenario
from .simulator import (
    SimulationDiverged,
    SimulationError,
    detect_equilibrium,
    monitor_constraints,
    simulate,
    write_trajectory_csv,
)

EXIT_OK, EXIT_GAP, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = bundled_scenario_path(p.name)
    if bundled.exists():
        return bundled
    return p


def _load(path: str, args) -> Scenario:
    try:
        s = load_scenario(_resolve(path))
        sim = s.sim
        for flag, attr in (("dt", "dt"), ("horizon", "horizon"), ("eq_tol", "eq_tol")):
            v = getattr(args, flag, None)
            if v is not None:
                sim = replace(sim, **{attr: v})
        if sim is not s.sim:
            s = validate_scenario(replace(s, sim=sim))
        return s
    except ScenarioError as exc:
        raise _Fail(EXIT_INPUT, str(exc)) from exc


def _run(s: Scenario):
    try:
        return simulate(s)
    except SimulationDiverged as exc:
        raise _Fail(EXIT_DIVERGED, f"diverged: {exc}") from exc
    except SimulationError as exc:
        raise _Fail(EXIT_DIVERGED, str(exc)) from exc


def _solve(s: Scenario):
    try:
        return oracle.solve_nbo(oracle.assemble_nbo(s))
    except oracle.NboInfeasible as exc:
        raise _Fail(EXIT_INPUT, f"optimization problem infeasible: {exc}") from exc


def _lst(v):
    return [float(x) for x in np.asarray(v).ravel()]


def _state_doc(w) -> dict:
    return {k: _lst(v) for k, v in w.as_dict().items()}


def _suffix(path, stem, multi):
    if path is None or not multi:
        return path
    p = Path(path)
    return str(p.with_name(f"{p.stem}_{stem}{p.suffix}"))


def _write_json(path, doc):
    text = json.dumps(doc, indent=2, allow_nan=True)
    if path in (None, "-"):
        return text
    Path(path).write_text(text + "\n")
    return None


def _plot(traj, outdir):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    md = traj.scenario.model
    names = md.names or tuple(f"node {j}" for j in range(md.n_nodes))
    t = traj.times
    panels = [
        ("frequency", "omega", traj.block("omega"), names),
        ("flows", "tie-line flow (MW)", traj.flows_abs, [f"{names[i]} -> {names[j]}" for i, j in md.edges]),
        ("generation", "Pg (MW)", traj.block("pg") + md.base_pg, names),
        ("load", "Pl (MW)", traj.block("pl") + md.base_pl, names),
    ]
    if traj.v2 is not None:
        panels.append(("v2", "V2", traj.v2[:, None], ["V2"]))
    for fname, ylabel, y, labels in panels:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for c in range(y.shape[1]):
            ax.plot(t, y[:, c], label=labels[c])
        ax.set_xlabel("t (s)")
        ax.set_ylabel(ylabel)
        if fname == "v2":
            ax.set_yscale("symlog", linthresh=1e-8)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"{fname}.svg")
        plt.close(fig)


def cmd_simulate(path, args, multi=False):
    s = _load(path, args)
    traj = _run(s)
    try:
        cfg = lyapunov.default_config(s)
        traj = traj.with_v2(lyapunov.lyapunov_series(traj, cfg))
    except oracle.NboError:
        pass
    eq = detect_equilibrium(traj)
    rep = monitor_constraints(traj)
    stem = Path(path).stem
    if args.out:
        write_trajectory_csv(traj, _suffix(args.out, stem, multi))
    summary = {
        "scenario": scenario_to_dict(s),
        "horizon": traj.horizon,
        "dt": traj.dt,
        "final_time": float(traj.times[-1]),
        "final_state": _state_doc(traj.final),
        "final_field_norm": float(traj.field_norm[-1]),
        "omega_max_final": float(np.abs(traj.final.omega).max(initial=0.0)),
        "equilibrium": None if eq is None else _state_doc(eq),
        "constraints": rep,
        "phi_cycle_residual_final": float(traj.phi_cycle_residual[-1]),
    }
    text = _write_json(_suffix(args.summary, stem, multi), summary) if args.summary else None
    if args.plot:
        _plot(traj, Path(args.plot) / stem if multi else args.plot)
    lines = [f"{stem}: simulated {traj.horizon:g} s, final |omega|max = {summary['omega_max_final']:.3e}, "
             f"equilibrium {'found' if eq is not None else 'not found'}"]
    if text:
        lines.append(text)
    return EXIT_OK, "\n".join(lines)


def cmd_solve(path, args, multi=False):
    s = _load(path, args)
    sol = _solve(s)
    doc = oracle.solution_to_dict(sol)
    text = _write_json(_suffix(args.out, Path(path).stem, multi), doc) if args.out else json.dumps(doc, indent=2)
    kkt = doc["kkt"]
    ok = max(kkt.values()) < 1e-8
    return (EXIT_OK if ok else EXIT_GAP), (text or f"{Path(path).stem}: solution written")


def _table(s, sim_eq, sol) -> str:
    md = s.model
    n = md.n_nodes
    names = md.names or tuple(f"node {j}" for j in range(n))
    head = f"{'':<18}" + "".join(f"{nm:>12}" for nm in names)
    rows = [head]

    def row(label, v):
        rows.append(f"{label:<18}" + "".join(f"{x:>12.3f}" for x in v))

    row("Pg* sim (MW)", sim_eq.pg + md.base_pg)
    row("Pg* oracle (MW)", sol.pg + md.base_pg)
    row("Pl* sim (MW)", sim_eq.pl + md.base_pl)
    row("Pl* oracle (MW)", sol.pl + md.base_pl)
    row("lambda* sim", sim_eq.lam)
    row("lambda* oracle", sol.lam)
    row("omega* sim", sim_eq.omega)
    rows.append("")
    ehead = f"{'':<18}" + "".join(f"{names[i] + '-' + names[j]:>16}" for i, j in md.edges)
    rows.append(ehead)

    def erow(label, v):
        rows.append(f"{label:<18}" + "".join(f"{x:>16.3f}" for x in v))

    erow("flow sim (MW)", md.B * sim_eq.theta_t + md.base_flow)
    erow("flow oracle (MW)", sol.flows + md.base_flow)
    erow("eta+ oracle", sol.eta_p)
    erow("eta- oracle", sol.eta_m)
    return "\n".join(rows)


def cmd_verify(path, args, multi=False):
    s = _load(path, args)
    traj = _run(s)
    sol = _solve(s)
    kkt = oracle.kkt_residuals(sol)
    eq = detect_equilibrium(traj)
    out = [f"== {Path(path).stem}"]
    if eq is None:
        out.append(f"no equilibrium detected (final field norm {traj.field_norm[-1]:.3e})")
        return EXIT_GAP, "\n".join(out + ["FAIL"])
    cmp = oracle.compare_equilibrium(eq, sol)
    cons = monitor_constraints(traj)
    out.append(_table(s, eq, sol))
    out.append("")
    for k, v in kkt.items():
        out.append(f"kkt {k:<16} {v:.3e}")
    for k, v in cmp.items():
        if k != "ok":
            out.append(f"gap {k:<16} {v:.3e}")
    out.append(f"capacity box held at every sample: {cons['capacity_ok_all_t']}")
    ok = cmp["ok"] and max(kkt.values()) < 1e-8 and cons["capacity_ok_all_t"]
    out.append("PASS" if ok else "FAIL")
    if args.summary:
        _write_json(_suffix(args.summary, Path(path).stem, multi),
                    {"kkt": kkt, "compare": cmp, "constraints": cons, "pass": ok})
    return (EXIT_OK if ok else EXIT_GAP), "\n".join(out)


def cmd_audit(path, args, multi=False):
    s = _load(path, args)
    traj = _run(s)
    try:
        rep = lyapunov.audit(traj)
    except oracle.NboInfeasible as exc:
        raise _Fail(EXIT_INPUT, f"optimization problem infeasible: {exc}") from exc
    stem = Path(path).stem
    text = _write_json(_suffix(args.out, stem, multi), rep) if args.out else None
    mono = rep["monotonicity"]
    msg = (f"{stem}: V2 {mono['v2_initial']:.3e} -> {mono['v2_final']:.3e}, "
           f"{len(mono['violations'])} violations, {len(mono['switches'])} switches, "
           f"{len(rep['q_checks'])} Q configurations, {'PASS' if rep['ok'] else 'FAIL'}")
    return (EXIT_OK if rep["ok"] else EXIT_GAP), msg + ("\n" + text if text else "")


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "verify": cmd_verify, "audit": cmd_audit}


def _one(cmd, path, args, multi):
    try:
        return COMMANDS[cmd](path, args, multi)
    except _Fail as exc:
        return exc.code, f"error: {exc}"
    except OSError as exc:
        return EXIT_INPUT, f"error: {exc}"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="netfreq", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (("simulate", "integrate the closed loop"), ("solve", "solve the optimization problem"),
                        ("verify", "compare simulated equilibrium with the optimum"),
                        ("audit", "Lyapunov and Q-matrix audit along the trajectory")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("scenarios", nargs="+", help="scenario JSON files (bundled names also accepted)")
        p.add_argument("--out", help="CSV trajectory (simulate) or JSON output (solve, audit)")
        p.add_argument("--summary", help="summary JSON (simulate, verify)")
        p.add_argument("--dt", type=float)
        p.add_argument("--horizon", type=float)
        p.add_argument("--eq-tol", dest="eq_tol", type=float)
        p.add_argument("--plot", help="directory for SVG charts (simulate)")
        p.add_argument("--jobs", type=int, default=1, help="parallel scenario runs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    paths = args.scenarios
    multi = len(paths) > 1
    if args.jobs > 1 and multi:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_one, [args.command] * len(paths), paths, [args] * len(paths),
                                  [multi] * len(paths)))
    else:
        results = [_one(args.command, p, args, multi) for p in paths]
    for code, text in results:
        print(text, file=sys.stderr if code == EXIT_INPUT else sys.stdout)
    return max(code for code, _ in results)


if __name__ == "__main__":
    sys.exit(main())
