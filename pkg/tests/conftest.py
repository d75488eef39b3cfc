import sys
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import helpers  # noqa: E402
from netfreq import lyapunov, oracle  # noqa: E402
from netfreq.network import Scenario, bundled_scenario_path, load_scenario  # noqa: E402
from netfreq.simulator import Trajectory, detect_equilibrium, simulate  # noqa: E402

@dataclass
class Run:
    scenario: Scenario
    traj: Trajectory
    eq: object
    sol: oracle.NboSolution
    cfg: lyapunov.LyapunovConfig


def _run(name):
    s = load_scenario(bundled_scenario_path(name))
    sol = oracle.solve_nbo(oracle.assemble_nbo(s))
    cfg = lyapunov.default_config(s)
    traj = simulate(s)
    traj = traj.with_v2(lyapunov.lyapunov_series(traj, cfg))
    return Run(s, traj, detect_equilibrium(traj), sol, cfg)


@pytest.fixture(scope="session")
def nominal_run():
    return _run("fourarea_nominal")


@pytest.fixture(scope="session")
def congestion_run():
    return _run("fourarea_congestion")


@pytest.fixture(scope="session")
def nominal():
    return load_scenario(bundled_scenario_path("fourarea_nominal"))


@pytest.fixture(scope="session")
def congestion():
    return load_scenario(bundled_scenario_path("fourarea_congestion"))


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in helpers.ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
