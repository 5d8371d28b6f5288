import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from koopman_backstepping.dmd import (
    build_hankel,
    companion_dmd,
    read_scan_csv,
    read_spectrum_csv,
    scan_ts_n,
    svd_dmd,
    write_scan_csv,
    write_spectrum_csv,
)
from koopman_backstepping.pde_sim import Trajectory

import oracles


def _single_exp(lam=-2.0, ts=0.1, n=2, c=1.7):
    k = np.arange(2 * n)
    data = np.zeros((3, 2 * n))
    data[0] = c * np.exp(lam * k * ts)
    return data


def _two_modes(ts=0.1, n=2):
    amps = np.array([[1.0, 0.5], [0.3, -1.2], [2.0, 0.7]])
    return oracles.exp_sum_data([-1.0, -3.0], amps, ts, 2 * n)


def _closest(values, target):
    return values[np.argmin(np.abs(values - target))]


def _match_error(a, b):
    """Largest distance between two eigenvalue sets under the best pairing."""
    from scipy.optimize import linear_sum_assignment

    cost = np.abs(np.asarray(a)[:, None] - np.asarray(b)[None, :])
    r, c = linear_sum_assignment(cost)
    return cost[r, c].max()


# -- Hankel matrices -----------------------------------------------------------

def test_hankel_unrolled():
    data = np.arange(12.0).reshape(3, 4)
    hk = build_hankel(data, 2)
    c = [data[:, j] for j in range(4)]
    np.testing.assert_array_equal(hk.entries, np.block([[c[0][:, None], c[1][:, None]],
                                                        [c[1][:, None], c[2][:, None]]]))
    np.testing.assert_array_equal(hk.shifted, np.block([[c[1][:, None], c[2][:, None]],
                                                        [c[2][:, None], c[3][:, None]]]))
    assert hk.p == 3 and hk.depth == 2


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 8), seed=st.integers(0, 2**16))
def test_hankel_block_structure(n, seed):
    data = np.random.default_rng(seed).normal(size=(3, 2 * n))
    H = build_hankel(data, n).entries
    for i in range(n):
        for j in range(n):
            blk = H[3 * i:3 * i + 3, j]
            if i + 1 < n and j > 0:
                np.testing.assert_array_equal(blk, H[3 * (i + 1):3 * (i + 1) + 3, j - 1])


def test_hankel_too_few_columns():
    with pytest.raises(ValueError):
        build_hankel(np.ones((3, 5)), 3)


def test_hankel_rank_constant_and_two_exponentials():
    assert np.linalg.matrix_rank(build_hankel(np.ones((3, 6)), 3).entries) == 1
    assert np.linalg.matrix_rank(build_hankel(_two_modes(), 2).entries) == 2


# -- companion and SVD variants ------------------------------------------------

@pytest.mark.parametrize("method", [companion_dmd, svd_dmd])
def test_single_real_exponential(method):
    spec = method(_single_exp(), 2, 0.1)
    assert _closest(spec.eigenvalues, -2.0) == pytest.approx(-2.0, abs=1e-9)
    assert spec.residual_fro <= 1e-12


@pytest.mark.parametrize("method", [companion_dmd, svd_dmd])
def test_two_modes_recovered(method):
    spec = method(_two_modes(), 2, 0.1)
    np.testing.assert_allclose(np.sort(spec.eigenvalues.real), [-3.0, -1.0], atol=1e-9)
    assert np.all(np.abs(spec.eigenvalues.imag) < 1e-12)


def test_variants_agree_on_two_modes():
    a = companion_dmd(_two_modes(), 2, 0.1).eigenvalues
    b = svd_dmd(_two_modes(), 2, 0.1).eigenvalues
    np.testing.assert_allclose(a, b, atol=1e-8)


def test_no_signal_errors():
    with pytest.raises(ValueError, match="no signal"):
        companion_dmd(np.zeros((3, 4)), 2, 0.1)
    with pytest.raises(ValueError, match="rank 0"):
        svd_dmd(np.zeros((3, 4)), 2, 0.1)
    with pytest.raises(ValueError):
        companion_dmd(np.ones((3, 2)), 1, 0.1)


def test_principal_branch_and_nyquist_flag():
    ts = 0.1
    w = 1.2 * np.pi / ts
    data = oracles.exp_sum_data([1j * w, -1j * w], np.array([[1, 1], [0.5, 0.5], [0.2, 0.2]]), ts, 4)
    spec = svd_dmd(data, 2, ts)
    assert np.all(np.abs(spec.eigenvalues.imag) <= np.pi / ts + 1e-9)
    # the recovered frequency wraps to 2 pi / ts - w
    assert np.max(np.abs(spec.eigenvalues.imag)) == pytest.approx(2 * np.pi / ts - w, rel=1e-8)


def test_near_nyquist_annotation():
    ts = 0.1
    w = 0.95 * np.pi / ts
    data = oracles.exp_sum_data([1j * w, -1j * w], np.array([[1, 1], [0.5, 0.5], [0.2, 0.2]]), ts, 4)
    assert np.all(svd_dmd(data, 2, ts).near_nyquist)
    assert not np.any(svd_dmd(_two_modes(), 2, 0.1).near_nyquist)


def test_eigenvalues_sorted_by_real_part(benchmark_spectrum):
    lam = benchmark_spectrum.eigenvalues
    assert np.all(np.diff(lam.real) <= 0)
    for i in range(lam.size - 1):
        if lam[i].real == lam[i + 1].real:
            assert lam[i].imag <= lam[i + 1].imag


def test_continuous_from_discrete(benchmark_spectrum):
    s = benchmark_spectrum
    np.testing.assert_allclose(np.exp(s.eigenvalues * s.sample_period), s.discrete_eigenvalues, rtol=1e-12)


def test_benchmark_residual_small(benchmark_spectrum):
    assert benchmark_spectrum.residual_fro <= 1e-8


# -- properties ----------------------------------------------------------------

@st.composite
def planted_modes(draw):
    """Distinct, well separated continuous eigenvalues and generic mixtures."""
    n_real = draw(st.integers(0, 3))
    n_pairs = draw(st.integers(0 if n_real >= 2 else 1, 2))
    reals = sorted(draw(st.lists(st.floats(-4.0, 1.0), min_size=n_real, max_size=n_real)))
    pairs = draw(st.lists(st.tuples(st.floats(-2.0, 0.0), st.floats(1.0, 8.0)),
                          min_size=n_pairs, max_size=n_pairs))
    lams = list(reals)
    for re, im in pairs:
        lams += [complex(re, im), complex(re, -im)]
    lams = np.asarray(lams, dtype=complex)
    seed = draw(st.integers(0, 2**16))
    return lams, seed


def _mixtures(lams, seed):
    rng = np.random.default_rng(seed)
    amps = np.empty((3, lams.size), dtype=complex)
    for i, lam in enumerate(lams):
        if lam.imag > 0:
            amps[:, i] = rng.normal(size=3) + 1j * rng.normal(size=3)
        elif lam.imag < 0:
            j = int(np.nonzero(np.isclose(lams, np.conj(lam)))[0][0])
            amps[:, i] = np.conj(amps[:, j]) if j < i else np.nan
        else:
            amps[:, i] = rng.normal(size=3)
    for i, lam in enumerate(lams):
        if lam.imag < 0 and np.isnan(amps[0, i]):
            j = int(np.nonzero(np.isclose(lams, np.conj(lam)))[0][0])
            amps[:, i] = np.conj(amps[:, j])
    return amps


@settings(max_examples=40, deadline=None)
@given(planted_modes())
def test_exact_dmd_property(planted):
    lams, seed = planted
    ts = 0.1
    mu = np.exp(lams * ts)
    # keep the Vandermonde structure reasonably conditioned
    gaps = np.abs(mu[:, None] - mu[None, :]) + np.eye(mu.size)
    assume(gaps.min() > 0.05)
    n = lams.size
    amps = _mixtures(lams, seed)
    data = oracles.exp_sum_data(lams, amps, ts, 2 * n)
    hk = build_hankel(data, n, ts)
    vander = np.vander(mu, n, increasing=True)
    assume(np.linalg.cond(hk.entries) * np.linalg.cond(vander) < 1e8)
    assert np.linalg.matrix_rank(hk.entries) == n
    spec = svd_dmd(data, n, ts)
    assert spec.residual_fro <= 1e-10 * np.linalg.norm(hk.entries, "fro")
    assert _match_error(spec.eigenvalues, lams) <= 1e-8
    # recovered output modes are collinear with the planted mixtures
    for lam, mode in zip(spec.eigenvalues, spec.modes):
        i = int(np.argmin(np.abs(lams - lam)))
        a = amps[:, i]
        c = np.vdot(a, mode) / np.vdot(a, a)
        assert np.linalg.norm(mode - c * a) <= 1e-8 * np.linalg.norm(mode)
    assert np.max(spec.mode_residuals) <= 1e-8


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(2, 7))
def test_conjugate_closure(seed, n):
    data = np.random.default_rng(seed).normal(size=(3, 2 * n))
    ts = 0.1
    for method in (svd_dmd, companion_dmd):
        spec = method(data, n, ts)
        lam = spec.eigenvalues[np.isfinite(spec.eigenvalues)]
        # a negative real discrete eigenvalue sits on the branch cut, where
        # Im = pi / ts is its own conjugate modulo 2 pi / ts
        on_cut = np.abs(np.abs(lam.imag) * ts - np.pi) < 1e-9
        for v in lam[~on_cut]:
            assert np.min(np.abs(lam - np.conj(v))) <= 1e-10 * max(1.0, abs(v))
        mu = spec.discrete_eigenvalues
        for v in mu:
            assert np.min(np.abs(mu - np.conj(v))) <= 1e-10 * max(1.0, abs(v))


@settings(max_examples=30, deadline=None)
@given(planted_modes())
def test_algorithm_agreement(planted):
    lams, seed = planted
    ts, n = 0.1, lams.size
    data = oracles.exp_sum_data(lams, _mixtures(lams, seed), ts, 2 * n)
    H = build_hankel(data, n).entries
    comp = companion_dmd(data, n, ts)
    # roundoff in f is amplified by cond(H) and again by the eigenvector
    # conditioning of the companion matrix
    assume(np.linalg.cond(H) * _eigvec_cond(comp.companion_f) < 1e8)
    assert _match_error(comp.eigenvalues, svd_dmd(data, n, ts).eigenvalues) <= 1e-8


def _eigvec_cond(f):
    n = f.size
    F = np.zeros((n, n))
    F[1:, :-1] = np.eye(n - 1)
    F[:, -1] = -f
    return np.linalg.cond(np.linalg.eig(F)[1])


@pytest.mark.xfail(strict=True, reason="cond(H) < 1e12 alone does not bound the companion "
                                       "eigenvalue error by 1e-8; see decisions ledger")
def test_algorithm_agreement_under_hankel_condition_only():
    lams = np.array([0.0, 0.5, 1j, -1j])
    data = oracles.exp_sum_data(lams, _mixtures(lams, 0), 0.1, 8)
    assert np.linalg.cond(build_hankel(data, 4).entries) < 1e12
    a = companion_dmd(data, 4, 0.1).eigenvalues
    assert _match_error(a, svd_dmd(data, 4, 0.1).eigenvalues) <= 1e-8


@pytest.mark.parametrize("source", ["random", "benchmark"])
def test_least_squares_optimality(source, open_loop_run):
    from koopman_backstepping.pde_sim import collect_output_data

    n = 6
    if source == "random":
        data = np.random.default_rng(3).normal(size=(3, 2 * n))
    else:
        data = collect_output_data(open_loop_run, 0.104, 2 * n)
    hk = build_hankel(data, n)
    f = companion_dmd(data, n, 0.1).companion_f
    target = hk.shifted[:, -1]
    base = np.linalg.norm(hk.entries @ f + target)
    rng = np.random.default_rng(11)
    for _ in range(100):
        df = 1e-6 * np.linalg.norm(f) * rng.normal(size=n)
        assert np.linalg.norm(hk.entries @ (f + df) + target) >= base * (1 - 1e-15)


# -- scan ----------------------------------------------------------------------

def _fine_two_mode_trajectory(dt=0.01, t_end=3.0):
    t = np.arange(0.0, t_end + dt / 2, dt)
    out = np.column_stack([np.exp(-t) + 0.5 * np.exp(-2 * t), 0.3 * np.exp(-t) - np.exp(-2 * t),
                           np.exp(-t) + np.exp(-2 * t)])
    return Trajectory(times=t, states=np.zeros((t.size, 1)), outputs=out, dt=dt)


def test_scan_two_mode_signal():
    scan = scan_ts_n(_fine_two_mode_trajectory(), [0.05, 0.1, 0.15], [2, 3, 4])
    assert np.all(scan.residual_fro < 1e-12)
    ts, n, _ = scan.best
    assert n == 2 and ts == 0.05
    assert scan.ts.size == 9


@pytest.fixture(scope="module")
def benchmark_scan(open_loop_run):
    ts = np.round(np.arange(0.05, 0.2 + 1e-9, 0.002), 12)
    scan = scan_ts_n(open_loop_run, ts, range(4, 11), t0=0.0, max_frequency=np.pi)
    return {(round(t, 6), n): r for t, n, r, _ in scan.rows()}, scan


def test_benchmark_scan_residual_at_reported_pair(benchmark_scan):
    table, scan = benchmark_scan
    assert table[(0.104, 6)] <= 1e-8
    assert scan.best[2] <= table[(0.104, 6)]


@pytest.mark.xfail(strict=True, reason="the simulated residual landscape keeps falling past (0.104, 6); "
                                       "see decisions ledger")
def test_benchmark_scan_minimum_near_reported_pair(benchmark_scan):
    table, scan = benchmark_scan
    ts, n, best = scan.best
    near = [table.get((round(0.104 + dt, 6), 6 + dn), np.inf) for dt in (-0.002, 0.0, 0.002) for dn in (-1, 0, 1)]
    assert (abs(ts - 0.104) < 1e-9 and n == 6) or min(near) <= 10 * best


def test_scan_flags_aliasing():
    dt = 0.01
    t = np.arange(0.0, 6.0, dt)
    w = 20.0
    out = np.column_stack([np.sin(w * t), np.cos(w * t), np.sin(w * t) + np.cos(w * t)])
    traj = Trajectory(times=t, states=np.zeros((t.size, 1)), outputs=out, dt=dt)
    scan = scan_ts_n(traj, [0.05, 0.2], [3], max_frequency=w)
    flags = dict(zip(scan.ts, scan.nyquist_flag))
    assert not flags[0.05] and flags[0.2]


def test_scan_empty_candidates():
    with pytest.raises(ValueError, match="empty"):
        scan_ts_n(_fine_two_mode_trajectory(), [], [2])


def test_scan_rejects_misaligned_ts():
    with pytest.raises(ValueError, match="misaligned"):
        scan_ts_n(_fine_two_mode_trajectory(), [0.015], [2])


# -- files ---------------------------------------------------------------------

def test_spectrum_csv_round_trip(tmp_path, benchmark_spectrum):
    p = tmp_path / "spectrum.csv"
    write_spectrum_csv(p, benchmark_spectrum)
    assert p.read_text().splitlines()[0] == ("re_lambda,im_lambda,mode_y_re,mode_y_im,mode_eta0_re,"
                                             "mode_eta0_im,mode_eta1_re,mode_eta1_im")
    back = read_spectrum_csv(p, benchmark_spectrum.sample_period)
    assert np.array_equal(back.eigenvalues, benchmark_spectrum.eigenvalues)
    assert np.array_equal(back.modes, benchmark_spectrum.modes)


def test_scan_csv(tmp_path):
    scan = scan_ts_n(_fine_two_mode_trajectory(), [0.05, 0.1], [2, 3])
    p = tmp_path / "scan.csv"
    write_scan_csv(p, scan)
    lines = p.read_text().splitlines()
    assert lines[0] == "ts,n,residual_fro" and len(lines) == 5
    assert read_scan_csv(p).best == scan.best
