"""Hankel dynamic mode decomposition of sampled ``(y, eta)`` output data."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .pde_sim import Trajectory, collect_output_data

__all__ = [
    "HankelMatrix",
    "DMDSpectrum",
    "ScanResult",
    "build_hankel",
    "companion_dmd",
    "svd_dmd",
    "scan_ts_n",
    "write_spectrum_csv",
    "read_spectrum_csv",
    "write_scan_csv",
]

SV_RTOL = 1e-12
NYQUIST_FRACTION = 0.9


@dataclass
class HankelMatrix:
    """Block-Hankel matrix of depth ``n`` and its one-sample shift."""

    entries: np.ndarray
    shifted: np.ndarray
    depth: int
    sample_period: Optional[float] = None

    @property
    def p(self) -> int:
        """Number of output channels per block."""
        return self.entries.shape[0] // self.depth


@dataclass
class DMDSpectrum:
    """Eigenvalues and output modes recovered from one Hankel matrix.

    ``modes[i]`` is the ``(y, eta0, eta1)`` mode of ``eigenvalues[i]``;
    ``mode_residuals[i]`` measures how far the full Krylov vector of that mode
    is from being an eigenvector of the data shift.
    """

    eigenvalues: np.ndarray
    discrete_eigenvalues: np.ndarray
    modes: np.ndarray
    residual_fro: float
    sample_period: float
    mode_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rank: int = 0
    companion_f: Optional[np.ndarray] = None

    @property
    def near_nyquist(self) -> np.ndarray:
        """Eigenvalues whose frequency is too close to ``pi / ts`` to be trusted."""
        return np.abs(self.eigenvalues.imag) * self.sample_period > NYQUIST_FRACTION * np.pi

    def __len__(self):
        return self.eigenvalues.size


def build_hankel(data, n: int, sample_period: Optional[float] = None) -> HankelMatrix:
    """Stack ``2n`` samples into ``H`` (samples ``0..2n-2``) and ``H+`` (``1..2n-1``).

    Column ``j`` of ``H`` holds samples ``j..j+n-1`` stacked vertically.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    p, cols = data.shape
    if n < 1:
        raise ValueError("depth n must be positive")
    if cols < 2 * n:
        raise ValueError(f"need {2 * n} samples for depth {n}, got {cols}")
    H = np.empty((p * n, n))
    Hp = np.empty((p * n, n))
    for i in range(n):
        H[p * i:p * (i + 1), :] = data[:, i:i + n]
        Hp[p * i:p * (i + 1), :] = data[:, i + 1:i + n + 1]
    return HankelMatrix(entries=H, shifted=Hp, depth=n, sample_period=sample_period)


def _order(lam: np.ndarray) -> np.ndarray:
    return np.lexsort((lam.imag, -lam.real))


def _continuous(mu: np.ndarray, ts: float) -> np.ndarray:
    # principal branch; a zero discrete eigenvalue maps to -inf
    with np.errstate(divide="ignore"):
        return np.log(mu.astype(complex)) / ts


def _assemble(mu, krylov, shift_residual, residual_fro, ts, p, rank) -> DMDSpectrum:
    lam = _continuous(mu, ts)
    idx = _order(lam)
    norms = np.linalg.norm(krylov, axis=0)
    norms[norms == 0] = 1.0
    mode_res = np.linalg.norm(shift_residual, axis=0) / norms
    return DMDSpectrum(eigenvalues=lam[idx], discrete_eigenvalues=mu[idx],
                       modes=krylov[:p, idx].T.copy(), residual_fro=float(residual_fro),
                       sample_period=ts, mode_residuals=mode_res[idx], rank=rank)


def companion_dmd(data, n: int, ts: float) -> DMDSpectrum:
    """Hankel-DMD through the companion matrix of the least-squares shift.

    ``f = -pinv(H) [xi(n); ...; xi(2n-1)]`` defines the last column of the
    companion matrix ``F`` (kept as ``companion_f``); the modes are the first
    block row of ``H nu``.
    """
    if n < 2:
        raise ValueError("companion DMD needs n >= 2")
    hk = build_hankel(data, n, ts)
    H, Hp = hk.entries, hk.shifted
    if not np.any(H):
        raise ValueError("no signal: data are identically zero")
    target = Hp[:, -1]
    f = -np.linalg.pinv(H, rcond=SV_RTOL) @ target
    F = np.zeros((n, n))
    F[1:, :-1] = np.eye(n - 1)
    F[:, -1] = -f
    mu, nu = np.linalg.eig(F)
    krylov = H @ nu
    shift_res = (Hp - H @ F) @ nu
    resid = np.linalg.norm(Hp - H @ F, "fro")
    rank = int(np.linalg.matrix_rank(H, tol=SV_RTOL * np.linalg.norm(H, 2)))
    spec = _assemble(mu, krylov, shift_res, resid, ts, hk.p, rank)
    spec.companion_f = f
    return spec


def svd_dmd(data, n: int, ts: float) -> DMDSpectrum:
    """SVD-enhanced Hankel-DMD.

    ``H = U S W^T`` (economy, singular values below ``1e-12 * s_max`` dropped),
    ``A~ = U^T H+ W S^-1``; modes are the first block row of ``U v``.
    """
    hk = build_hankel(data, n, ts)
    H, Hp = hk.entries, hk.shifted
    U, s, Wt = np.linalg.svd(H, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise ValueError("numerical rank 0: data carry no signal")
    r = int(np.sum(s > SV_RTOL * s[0]))
    U, s, W = U[:, :r], s[:r], Wt[:r].T
    At = U.T @ Hp @ W / s
    mu, v = np.linalg.eig(At)
    krylov = U @ v
    resid = np.linalg.norm(Hp - U @ At @ (U.T @ H), "fro")
    # shift residual of each Krylov vector: (I - U U^T) H+ W S^-1 v
    G = Hp @ W / s
    shift_res = G @ v - U @ (U.T @ G @ v)
    return _assemble(mu, krylov, shift_res, resid, ts, hk.p, r)


@dataclass
class ScanResult:
    """Residual landscape over sampling periods and Hankel depths."""

    ts: np.ndarray
    n: np.ndarray
    residual_fro: np.ndarray
    nyquist_flag: np.ndarray
    best_index: int

    @property
    def best(self) -> tuple[float, int, float]:
        k = self.best_index
        return float(self.ts[k]), int(self.n[k]), float(self.residual_fro[k])

    def rows(self):
        for k in range(self.ts.size):
            yield float(self.ts[k]), int(self.n[k]), float(self.residual_fro[k]), bool(self.nyquist_flag[k])


def scan_ts_n(fine_trajectory: Trajectory, ts_candidates: Iterable[float],
              n_candidates: Iterable[int], t0: float = 0.0,
              max_frequency: Optional[float] = None, tie_atol: float = 1e-14) -> ScanResult:
    """Evaluate the SVD-DMD residual for every ``(ts, n)`` pair.

    Each pair subsamples the same fine trajectory exactly.  The minimiser is
    chosen by residual; residuals within ``tie_atol`` of the minimum count as
    ties, broken by smaller ``n`` and then smaller ``ts``.  A row is flagged
    when ``ts * max_frequency >= pi`` or a recovered eigenvalue sits near the
    Nyquist limit.
    """
    ts_list = [float(t) for t in ts_candidates]
    n_list = [int(n) for n in n_candidates]
    if not ts_list or not n_list:
        raise ValueError("empty candidate set")
    rows_ts, rows_n, rows_r, rows_f = [], [], [], []
    for ts in ts_list:
        for n in n_list:
            data = collect_output_data(fine_trajectory, ts, 2 * n, t0=t0)
            spec = svd_dmd(data, n, ts)
            flag = bool(np.any(spec.near_nyquist))
            if max_frequency is not None and ts * max_frequency >= np.pi:
                flag = True
            rows_ts.append(ts)
            rows_n.append(n)
            rows_r.append(spec.residual_fro)
            rows_f.append(flag)
    ts_arr = np.asarray(rows_ts)
    n_arr = np.asarray(rows_n)
    r_arr = np.asarray(rows_r)
    tied = np.nonzero(r_arr <= r_arr.min() + tie_atol)[0]
    best = min(tied, key=lambda k: (n_arr[k], ts_arr[k]))
    return ScanResult(ts=ts_arr, n=n_arr, residual_fro=r_arr,
                      nyquist_flag=np.asarray(rows_f), best_index=int(best))


def _g(v: float) -> str:
    return f"{float(v):.17g}"


def write_spectrum_csv(path, spec: DMDSpectrum) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re_lambda", "im_lambda", "mode_y_re", "mode_y_im", "mode_eta0_re",
                    "mode_eta0_im", "mode_eta1_re", "mode_eta1_im"])
        for lam, mode in zip(spec.eigenvalues, spec.modes):
            row = [lam.real, lam.imag]
            for c in mode:
                row += [c.real, c.imag]
            w.writerow([_g(v) for v in row])


def read_spectrum_csv(path, sample_period: float = float("nan")) -> DMDSpectrum:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    lam = arr[:, 0] + 1j * arr[:, 1]
    modes = arr[:, 2::2] + 1j * arr[:, 3::2]
    mu = np.exp(lam * sample_period) if np.isfinite(sample_period) else np.full(lam.shape, np.nan)
    return DMDSpectrum(eigenvalues=lam, discrete_eigenvalues=mu, modes=modes,
                       residual_fro=float("nan"), sample_period=sample_period,
                       mode_residuals=np.full(lam.shape, np.nan), rank=lam.size)


def write_scan_csv(path, scan: ScanResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ts", "n", "residual_fro"])
        for ts, n, r, _ in scan.rows():
            w.writerow([_g(ts), n, _g(r)])


def read_scan_csv(path) -> ScanResult:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    ts, n, r = arr[:, 0], arr[:, 1].astype(int), arr[:, 2]
    flags = arr[:, 3].astype(bool) if arr.shape[1] > 3 else np.zeros(ts.size, bool)
    best = int(min(np.nonzero(r <= r.min() + 1e-14)[0], key=lambda k: (n[k], ts[k])))
    return ScanResult(ts=ts, n=n, residual_fro=r, nyquist_flag=flags, best_index=best)
