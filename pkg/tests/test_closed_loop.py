import json

import numpy as np
import pytest

from koopman_backstepping.closed_loop import (
    ClosedLoopConfig,
    SawtoothReference,
    closed_loop_matrix,
    closed_loop_spectrum,
    control_law,
    feedback_row,
    perturb,
    simulate_closed_loop,
    write_closed_loop_csv,
    write_metrics_json,
    zero_gains,
)
from koopman_backstepping.pde_sim import ExoModel, PlantParams, UncertaintyProfile
from koopman_backstepping.regulator import RegulatorGains, build_internal_model

from conftest import MU_C, POLES


def _gains(N=11, k1=0.0, kx=0.0, kvarpi=(0.0,)):
    im = build_internal_model([], [0.0] * len(kvarpi))
    return RegulatorGains(k_varpi=np.asarray(kvarpi, float), k1=k1, k_x=np.full(N, float(kx)),
                          nodes=np.linspace(0, 1, N), internal_model=im, b=np.zeros(len(kvarpi)))


def _nominal_config(design, params, **kw):
    return ClosedLoopConfig(params, design.gains, **kw)


# -- control law -----------------------------------------------------------------

def test_control_law_zero_state():
    assert control_law(np.zeros(11), [0.0], _gains(k1=3.0, kx=2.0, kvarpi=(4.0,))) == 0.0


def test_control_law_boundary_gain():
    x = np.zeros(11)
    x[-1] = 2.0
    assert control_law(x, [0.0], _gains(k1=1.0)) == -2.0


def test_control_law_trapezoid_exact_for_constants():
    assert abs(control_law(np.ones(11), [0.0], _gains(kx=1.0)) + 1.0) <= 1e-12


def test_control_law_internal_model_term():
    assert control_law(np.zeros(11), [1.0, 2.0], _gains(kvarpi=(0.5, -1.0))) == 1.5


def test_control_law_dimension_errors():
    with pytest.raises(ValueError, match="nodes"):
        control_law(np.zeros(5), [0.0], _gains())
    with pytest.raises(ValueError, match="k_varpi"):
        control_law(np.zeros(11), [0.0, 0.0], _gains())


def test_feedback_row_matches_control_law():
    g = _gains(k1=0.7, kx=0.0)
    g.k_x = np.sin(3 * g.nodes)
    x = np.cos(g.nodes)
    assert feedback_row(g) @ x == pytest.approx(control_law(x, [0.0], g), abs=1e-15)


# -- perturbation ----------------------------------------------------------------

def test_perturb_zero():
    assert perturb(PlantParams(1.5, 8.0, 2.5, -2.0), 0.0) == UncertaintyProfile(0.0, 0.0, 0.0, 0.0)


def test_perturb_seventy_percent(benchmark_params):
    u = perturb(benchmark_params, 0.7)
    np.testing.assert_allclose([u.delta_rho, u.delta_a, u.delta_q0, u.delta_q1],
                               [1.05, 5.6, 1.75, -1.4], rtol=1e-14)


def test_perturb_rejects_nonpositive_rho(benchmark_params):
    with pytest.raises(ValueError, match="rho"):
        perturb(benchmark_params, -1.0)


# -- configuration errors --------------------------------------------------------

def test_config_validation(design, benchmark_params):
    with pytest.raises(ValueError, match="dt"):
        ClosedLoopConfig(benchmark_params, design.gains, dt=0.0)
    with pytest.raises(ValueError, match="tail"):
        ClosedLoopConfig(benchmark_params, design.gains, tail_fraction=1.5)


def test_gain_grid_mismatch(benchmark_params):
    cfg = ClosedLoopConfig(benchmark_params, _gains(N=12))
    with pytest.raises(ValueError, match="grid"):
        closed_loop_matrix(cfg)


def test_disturbance_dimension_mismatch(design, benchmark_params, benchmark_coupling):
    two = ExoModel(S=np.zeros((2, 2)), P=np.eye(2), x0=np.ones(2))
    cfg = ClosedLoopConfig(benchmark_params, design.gains, coupling=benchmark_coupling,
                           disturbance=two, t_end=0.01)
    with pytest.raises(ValueError, match="disturbance dimension"):
        simulate_closed_loop(cfg)


# -- spectra ---------------------------------------------------------------------

def test_nominal_spectrum(design, benchmark_params):
    ev = closed_loop_spectrum(_nominal_config(design, benchmark_params))
    assert np.all(ev.real < 0)
    slow = ev[:4]
    for p in POLES:
        assert np.min(np.abs(slow - p)) <= 0.02 * abs(p)
    assert np.all(ev[4:].real <= -0.9 * MU_C)


def test_open_loop_spectrum_with_zero_gains(design, benchmark_params):
    g = zero_gains(design.gains.nodes.size, design.internal)
    ev = closed_loop_spectrum(ClosedLoopConfig(benchmark_params, g))
    assert ev[0].real == pytest.approx(3.196, rel=5e-3)
    assert ev[0].imag == 0


def test_spectrum_sorted_descending(design, benchmark_params):
    ev = closed_loop_spectrum(_nominal_config(design, benchmark_params))
    assert np.all(np.diff(ev.real) <= 0)


def test_with_spectrum_matches_direct_eigensolve(design, benchmark_params):
    cfg = _nominal_config(design, benchmark_params, t_end=0.01)
    run = simulate_closed_loop(cfg, with_spectrum=True)
    np.testing.assert_allclose(run.metrics.closed_loop_spectrum, closed_loop_spectrum(cfg), atol=1e-9)


def test_decay_rate_matches_slowest_eigenvalue(design, benchmark_params):
    cfg = _nominal_config(design, benchmark_params, t_end=6.0, x0=1.0, varpi0=np.ones(design.internal.n_bar))
    run = simulate_closed_loop(cfg)
    t = run.trajectory.times
    norm = np.sqrt(np.sum(run.trajectory.states**2, axis=1) + np.sum(run.varpi**2, axis=1))
    i3, i6 = np.searchsorted(t, 3.0), t.size - 1
    rate = np.log(norm[i6] / norm[i3]) / (t[i6] - t[i3])
    slowest = closed_loop_spectrum(cfg)[0].real
    assert rate == pytest.approx(slowest, rel=0.2)


# -- regulation ------------------------------------------------------------------

def test_zero_gains_stable_plant_gives_minus_reference(sawtooth):
    params = PlantParams(1.0, -1.0, 0.0, 0.0, 0.5)
    g = zero_gains(51, build_internal_model([], [0.0, 0.0]))
    run = simulate_closed_loop(ClosedLoopConfig(params, g, reference=sawtooth, t_end=12.0, dt=1e-2))
    np.testing.assert_array_equal(run.e_y, -run.r)
    np.testing.assert_array_equal(run.r, sawtooth(run.trajectory.times))


def test_tracking_before_third_reset(scenario):
    run = scenario("tracking")
    t_reset, err = run.metrics.pre_reset_errors[2]
    assert t_reset == 15.0
    assert err <= 2e-2


def test_pre_reset_sample_uses_left_limit(scenario, sawtooth):
    run = scenario("tracking")
    k = int(round(15.0 / run.trajectory.dt)) - 1
    t = run.trajectory.times[k]
    assert run.metrics.pre_reset_errors[2][1] == abs(run.trajectory.y[k] - sawtooth(t))
    assert sawtooth(t) == pytest.approx(2.0, abs=1e-3)


def test_rejection_after_ten(scenario):
    run = scenario("rejection")
    t = run.trajectory.times
    assert np.max(np.abs(run.trajectory.y[t >= 10])) <= 1e-2


@pytest.mark.parametrize("kind", ["tracking", "rejection"])
def test_seventy_percent_perturbation_still_regulates(scenario, kind):
    run = scenario(kind, 0.7)
    t = run.trajectory.times
    if kind == "tracking":
        # between resets the error must have settled; the reset jumps themselves are not errors
        settled = (t >= 20) & (np.mod(t, 5.0) >= 2.5)
        assert np.max(np.abs(run.e_y[settled])) <= 1e-1
        assert all(e <= 1e-1 for tr, e in run.metrics.pre_reset_errors if tr >= 20)
    else:
        assert np.max(np.abs(run.e_y[t >= 20])) <= 1e-1


def test_perturbation_sweep(scenario):
    nominal = scenario("rejection").metrics.tail_sup
    for f in (0.0, 0.3, -0.3, 0.5, -0.5, 0.7):
        assert scenario("rejection", f).metrics.tail_sup < 10 * nominal


def test_internal_model_blocks_disturbance_frequency(scenario):
    run = scenario("rejection")
    t = run.trajectory.times
    tail = t >= 24.0
    e = run.e_y[tail][:-1]
    n = e.size
    spec = np.fft.rfft(e) * 2 / n
    freqs = np.fft.rfftfreq(n, run.trajectory.dt) * 2 * np.pi
    amp = np.abs(spec[np.argmin(np.abs(freqs - np.pi))])
    assert amp < 1e-3 * 1.0


def test_tracking_tail_robust_to_time_step(scenario):
    a = scenario("tracking").metrics.tail_sup
    b = scenario("tracking", dt=5e-4).metrics.tail_sup
    assert abs(a - b) < 0.1 * a


def test_rejection_converged_in_time_step(scenario):
    # the rejection tail is O(dt^2) small, so the relative change is not meaningful
    a = scenario("rejection").metrics.tail_sup
    b = scenario("rejection", dt=5e-4).metrics.tail_sup
    assert abs(a - b) < 1e-4
    assert b < a


# -- output files ----------------------------------------------------------------

def test_closed_loop_csv(tmp_path, design, benchmark_params, sawtooth):
    run = simulate_closed_loop(_nominal_config(design, benchmark_params, reference=sawtooth, t_end=0.05))
    p = tmp_path / "cl.csv"
    write_closed_loop_csv(p, run)
    lines = p.read_text().splitlines()
    assert lines[0] == "t,y,r,e_y,u"
    assert len(lines) == run.trajectory.times.size + 1
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 3], run.e_y)


def test_metrics_json(tmp_path, scenario):
    p = tmp_path / "metrics.json"
    write_metrics_json(p, scenario("tracking").metrics.to_dict())
    doc = json.loads(p.read_text())
    assert doc["tail_window"] == [24.0, 30.0]
    assert [r["t_reset"] for r in doc["pre_reset_errors"]] == [5.0, 10.0, 15.0, 20.0, 25.0, 30.0]


def test_sawtooth_reference():
    s = SawtoothReference(0.4, 5.0)
    np.testing.assert_array_equal(s.resets(12.0), [5.0, 10.0])
    assert s(7.5) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SawtoothReference(1.0, 0.0)
