import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from koopman_backstepping.closed_loop import (ClosedLoopConfig, SawtoothReference,  # noqa: E402
                                              perturb, simulate_closed_loop)
from koopman_backstepping.dmd import svd_dmd  # noqa: E402
from koopman_backstepping.ident import identify  # noqa: E402
from koopman_backstepping.pde_sim import (DisturbanceCoupling, ExoModel, Grid, PlantParams,  # noqa: E402
                                          collect_output_data, rectangular_pulse, semidiscretize,
                                          simulate)
from koopman_backstepping.regulator import design_regulator  # noqa: E402

# benchmark plant used throughout the suite
RHO, A, Q0, Q1, Z0 = 1.5, 8.0, 2.5, -2.0, 0.5
POLES = [-4.5 + 1j * np.pi, -4.5 - 1j * np.pi, -4.0, -5.0]
MU_C = 5.0
TS, DEPTH = 0.104, 6


def benchmark_open_loop_run(N=201, dt=1e-3, t_end=4.0):
    """Impulse u = 10 on [-0.1, 0), d = sin(pi t), u = 0 afterwards."""
    params = PlantParams(RHO, A, Q0, Q1, Z0)
    coup = DisturbanceCoupling(g1=[3.0], g2=[1.0], g3=[1.0], g4=[0.0], G5=[[0.0], [0.0]])
    system = semidiscretize(params, coup=coup, grid=Grid(N))
    return simulate(system, ExoModel.sinusoid(np.pi), rectangular_pulse(10.0, -0.1, 0.0), 0.0,
                    t_end, dt, t_start=-0.1, breakpoints=(0.0,))


@pytest.fixture(scope="session")
def benchmark_params():
    return PlantParams(RHO, A, Q0, Q1, Z0)


@pytest.fixture(scope="session")
def benchmark_coupling():
    return DisturbanceCoupling(g1=[3.0], g2=[1.0], g3=[1.0], g4=[0.0], G5=[[0.0], [0.0]])


@pytest.fixture(scope="session")
def open_loop_run():
    return benchmark_open_loop_run()


@pytest.fixture(scope="session")
def benchmark_spectrum(open_loop_run):
    data = collect_output_data(open_loop_run, TS, 2 * DEPTH)
    return svd_dmd(data, DEPTH, TS)


@pytest.fixture(scope="session")
def identification(benchmark_spectrum):
    return identify(benchmark_spectrum, Z0)


@pytest.fixture(scope="session")
def design(identification):
    p = identification.plant
    dist = [1j * v.imag for v in identification.disturbance.eigenvalues]
    return design_regulator(p.rho_hat, p.a_hat, p.q0_hat, p.q1_hat, Z0, dist, [0.0, 0.0],
                            MU_C, POLES, N_k=201, N=401)


@pytest.fixture(scope="session")
def sawtooth():
    return SawtoothReference(0.4, 5.0)


@pytest.fixture(scope="session")
def scenario(design, benchmark_params, benchmark_coupling, sawtooth):
    """Cached closed-loop runs of the true plant under the designed gains.

    ``kind`` is ``"tracking"`` (sawtooth reference, no disturbance) or
    ``"rejection"`` (``d = sin(pi t)``, zero reference).
    """
    cache = {}

    def run(kind, factor=0.0, dt=1e-3, t_end=30.0):
        key = (kind, factor, dt, t_end)
        if key not in cache:
            ref, dist = (sawtooth, None) if kind == "tracking" else (None, ExoModel.sinusoid(np.pi))
            cfg = ClosedLoopConfig(benchmark_params, design.gains, perturb(benchmark_params, factor),
                                   benchmark_coupling, ref, dist, t_end=t_end, dt=dt)
            cache[key] = simulate_closed_loop(cfg)
        return cache[key]
    return run


# -- acceptance summary -------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def criterion(request):
    """Attach a one-line measurement to the current acceptance test."""
    def note(text):
        request.node.user_properties.append(("detail", text))
        print(text)
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    rep = outcome.get_result()
    number, title = marker.args
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        if rep.failed and not detail:
            detail = str(rep.longrepr).strip().splitlines()[-1][:160]
        _CRITERIA[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
