"""Inverse Sturm-Liouville identification from Koopman eigenvalues and modes.

Each plant mode supplies its eigenvalue ``lambda = a + rho * mu`` and two
ratios of the eigenfunction ``phi = cfun + q0 * sfun``:
``r_z0 = phi(z0) / phi(0)`` and ``r_1 = phi(1) / phi(0)``.  Equating the two
expressions for ``q0`` leaves one transcendental equation in ``mu``; ``q1``
then follows from the right boundary condition.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np

from ._sturm import bracket_roots, cfun_sfun
from .dmd import DMDSpectrum
from .pde_sim import PlantParams, sl_eigenvalues

__all__ = [
    "ModeObservation",
    "ModeCandidate",
    "PlantMode",
    "DisturbanceSpectrum",
    "IdentifiedPlant",
    "IdentConfig",
    "Candidate",
    "IdentificationResult",
    "classify_spectrum",
    "solve_mode",
    "recover_a_rho",
    "identify",
    "write_identification_csv",
]


@dataclass(frozen=True)
class ModeObservation:
    """Koopman eigenvalue of a plant mode with its trace ratios."""

    lam: complex
    r_z0: complex
    r_1: complex

    @classmethod
    def from_mode(cls, lam: complex, mode) -> "ModeObservation":
        """Build the ratios from a ``(y, eta0, eta1)`` mode vector.

        Ratios are formed as ``a * conj(b) / |b|^2`` so that scaling the mode by
        ``2**k * 1j**m`` leaves them bitwise unchanged.
        """
        mode = np.asarray(mode, dtype=complex)
        b = mode[1]
        nb = (b * np.conj(b)).real
        if nb == 0:
            raise ValueError("mode has zero eta0 component; ratios undefined")
        return cls(lam=complex(lam), r_z0=complex(mode[0] * np.conj(b) / nb),
                   r_1=complex(mode[2] * np.conj(b) / nb))


@dataclass(frozen=True)
class ModeCandidate:
    mu: float
    q0: float
    q1: float


@dataclass(frozen=True)
class PlantMode:
    eigenvalue: float
    mode: np.ndarray
    ambiguous: bool = False


@dataclass
class DisturbanceSpectrum:
    """Near-imaginary eigenvalues attributed to the disturbance model."""

    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))

    @property
    def n_d(self) -> int:
        return int(self.eigenvalues.size)

    @property
    def frequencies(self) -> np.ndarray:
        """Distinct ``|Im lambda|`` values, conjugate pairs averaged, ascending."""
        lam = self.eigenvalues
        used = np.zeros(lam.size, bool)
        freqs = []
        for i in range(lam.size):
            if used[i]:
                continue
            used[i] = True
            w = abs(lam[i].imag)
            if w > 0:
                partners = [j for j in range(lam.size) if not used[j]
                            and abs(lam[j] - np.conj(lam[i])) <= 1e-6 * max(1.0, abs(lam[i]))]
                if partners:
                    j = partners[0]
                    used[j] = True
                    w = 0.5 * (abs(lam[i].imag) + abs(lam[j].imag))
            freqs.append(w)
        return np.sort(np.asarray(freqs))

    def as_exact(self) -> np.ndarray:
        """Eigenvalues ``+-j w`` rebuilt from :attr:`frequencies`."""
        out = []
        for w in self.frequencies:
            out.extend([1j * w, -1j * w] if w > 0 else [0.0])
        return np.asarray(out, dtype=complex)


def classify_spectrum(spectrum: DMDSpectrum, tol_re: Optional[float] = None,
                      nd_override: Optional[int] = None, imag_tol: float = 1e-6):
    """Split a DMD spectrum into disturbance and plant eigenvalues.

    Eigenvalues with ``|Re| < tol_re`` and a nonzero imaginary part belong to
    the disturbance model.  The rest are plant eigenvalues, which are real for
    a Sturm-Liouville operator; their imaginary parts must be below
    ``imag_tol`` (relative) and are discarded.  A real eigenvalue with
    ``|lambda| < tol_re`` could be a constant disturbance; it stays in the plant
    class with ``ambiguous=True`` unless ``nd_override`` says otherwise.

    ``tol_re`` defaults to ``0.05`` times the magnitude of the dominant real
    eigenvalue.  ``nd_override`` forces the ``nd_override`` eigenvalues of
    smallest ``|Re|`` into the disturbance class.

    Returns ``(DisturbanceSpectrum, list[PlantMode])``, plant modes sorted by
    descending eigenvalue.
    """
    lam = np.asarray(spectrum.eigenvalues, dtype=complex)
    if lam.size == 0:
        raise ValueError("empty spectrum")
    modes = np.asarray(spectrum.modes)
    finite = np.isfinite(lam)
    is_real = np.abs(lam.imag) <= imag_tol * np.maximum(1.0, np.abs(lam))
    if tol_re is None:
        reals = lam[is_real & finite].real
        scale = abs(reals.max()) if reals.size else np.abs(lam[finite]).max()
        tol_re = 0.05 * scale if scale > 0 else 1e-8

    if nd_override is not None:
        order = np.argsort(np.where(finite, np.abs(lam.real), np.inf), kind="stable")
        dist = np.zeros(lam.size, bool)
        dist[order[:nd_override]] = True
    else:
        dist = finite & (np.abs(lam.real) < tol_re) & ~is_real

    plant = []
    for i in np.nonzero(~dist & finite)[0]:
        if not is_real[i]:
            continue
        ambiguous = abs(lam[i]) < tol_re and nd_override is None
        plant.append(PlantMode(eigenvalue=float(lam[i].real), mode=modes[i], ambiguous=ambiguous))
    plant.sort(key=lambda m: -m.eigenvalue)
    if len(plant) < 2:
        raise ValueError("insufficient plant modes: need at least 2 real plant eigenvalues")
    return DisturbanceSpectrum(eigenvalues=lam[dist]), plant


def _real_ratio(r: complex, name: str) -> float:
    if abs(r.imag) > 1e-6 * max(1.0, abs(r)):
        raise ValueError(f"{name} ratio {r} is not real; not a Sturm-Liouville mode")
    return float(r.real)


def solve_mode(obs: ModeObservation, z0: float, mu_window: tuple[float, float] = (-2000.0, 200.0),
               mu_step: float = 0.05) -> list[ModeCandidate]:
    """All ``(mu, q0, q1)`` consistent with one mode's trace ratios.

    Roots of ``(r_z0 - c(z0)) s(1) - (r_1 - c(1)) s(z0)`` are bracketed on a
    uniform ``mu`` grid and bisected; ``q0`` comes from whichever trace has the
    larger ``|s|`` and ``q1 = (mu s(1) + q0 c(1)) / r_1``.
    """
    if not 0 < z0 < 1:
        raise ValueError("z0 must lie in (0, 1)")
    r_z0 = _real_ratio(obs.r_z0, "r_z0")
    r_1 = _real_ratio(obs.r_1, "r_1")
    if not (np.isfinite(r_z0) and np.isfinite(r_1)) or r_1 == 0:
        raise ValueError("mode ratios must be finite and r_1 nonzero")

    def terms(mu):
        cz, sz = cfun_sfun(mu, z0)
        c1, s1 = cfun_sfun(mu, 1.0)
        t1, t2 = (r_z0 - cz) * s1, (r_1 - c1) * sz
        return t1 - t2, np.abs(t1) + np.abs(t2) + np.abs(sz) + np.abs(s1)

    def G(mu):
        return terms(mu)[0]

    def dG(mu):
        h = 1e-6 * np.maximum(1.0, np.abs(mu))
        return (G(mu + h) - G(mu - h)) / (2 * h)

    lo, hi = mu_window
    grid = np.linspace(lo, hi, int(round((hi - lo) / mu_step)) + 1)
    g, scale = terms(grid)
    if np.all(np.abs(g) <= 1e-12 * scale):
        raise ValueError("mode equation vanishes identically; these ratios do not determine mu")
    roots = list(bracket_roots(G, grid))
    # even-order roots (e.g. pure Neumann modes) touch zero without a sign change
    ag = np.abs(g)
    dips = np.nonzero((ag[1:-1] <= ag[:-2]) & (ag[1:-1] <= ag[2:]) & (g[:-2] * g[2:] > 0))[0] + 1
    touch = [r for i in dips for r in bracket_roots(dG, grid[i - 1:i + 2])]
    for mu in touch:
        g, sc = terms(mu)
        if abs(g) <= 1e-12 * sc and all(abs(mu - r) > 1e-8 * max(1.0, abs(r)) for r in roots):
            roots.append(float(mu))
    out = []
    for mu in sorted(roots):
        cz, sz = cfun_sfun(mu, z0)
        c1, s1 = cfun_sfun(mu, 1.0)
        # either trace fixes q0; use the better conditioned one
        if max(abs(sz), abs(s1)) < 1e-10:
            continue
        q0 = float((r_1 - c1) / s1) if abs(s1) >= abs(sz) else float((r_z0 - cz) / sz)
        q1 = float((mu * s1 + q0 * c1) / r_1)
        out.append(ModeCandidate(mu=float(mu), q0=q0, q1=q1))
    if not out:
        raise ValueError(f"no root of the mode equation for mu in [{lo}, {hi}]")
    return out


def recover_a_rho(lambda1: float, lambda2: float, mu1: float, mu2: float) -> tuple[float, float]:
    """Solve ``lambda_i = a + rho * mu_i`` for ``(a, rho)``."""
    if abs(mu1 - mu2) < 1e-10:
        raise ValueError("degenerate mode pair: mu1 == mu2")
    rho = (lambda1 - lambda2) / (mu1 - mu2)
    a = lambda1 - rho * mu1
    return a, rho


@dataclass
class IdentConfig:
    tol_re: Optional[float] = None
    nd_override: Optional[int] = None
    q_tol: float = 5e-2
    mu_window: tuple[float, float] = (-2000.0, 200.0)
    mu_step: float = 0.05
    validation_tol: float = 2e-2


@dataclass
class Candidate:
    """One pairing of per-mode roots, with its validation outcome."""

    mu1: float
    mu2: float
    a_hat: float
    rho_hat: float
    q0_hat: float
    q1_hat: float
    validation_mismatch: float
    accepted: bool = False
    reason: str = ""


@dataclass
class IdentifiedPlant:
    rho_hat: float
    a_hat: float
    q0_hat: float
    q1_hat: float
    mu: tuple[float, float]
    validation: dict

    def as_params(self, z0: float) -> PlantParams:
        return PlantParams(rho=self.rho_hat, a=self.a_hat, q0=self.q0_hat, q1=self.q1_hat, z0=z0)


@dataclass
class IdentificationResult:
    plant: IdentifiedPlant
    disturbance: DisturbanceSpectrum
    candidates: list[Candidate]
    plant_modes: list[PlantMode]

    @property
    def omega_hat(self) -> np.ndarray:
        return self.disturbance.frequencies


def _agree(x: float, y: float, tol: float) -> bool:
    return abs(x - y) <= tol * max(1.0, abs(x), abs(y))


def identify(spectrum: DMDSpectrum, z0: float, config: Optional[IdentConfig] = None) -> IdentificationResult:
    """Recover ``(rho, a, q0, q1)`` and the disturbance eigenvalues.

    The two dominant plant modes are inverted separately; every pairing of
    their roots whose ``q0``/``q1`` agree within ``q_tol`` gives a candidate.
    A candidate is accepted if the forward eigenvalue problem places its two
    eigenvalues as the two dominant ones; among accepted candidates the one
    whose forward spectrum best matches all plant eigenvalues (mean relative
    error, index by index) is returned.
    """
    cfg = config or IdentConfig()
    disturbance, plant_modes = classify_spectrum(spectrum, cfg.tol_re, cfg.nd_override)
    m1, m2 = plant_modes[0], plant_modes[1]
    obs1 = ModeObservation.from_mode(m1.eigenvalue, m1.mode)
    obs2 = ModeObservation.from_mode(m2.eigenvalue, m2.mode)
    cand1 = solve_mode(obs1, z0, cfg.mu_window, cfg.mu_step)
    cand2 = solve_mode(obs2, z0, cfg.mu_window, cfg.mu_step)
    lam_plant = np.array([m.eigenvalue for m in plant_modes])

    rows: list[Candidate] = []
    for c1, c2 in product(cand1, cand2):
        if abs(c1.mu - c2.mu) < 1e-10:
            continue
        if not (_agree(c1.q0, c2.q0, cfg.q_tol) and _agree(c1.q1, c2.q1, cfg.q_tol)):
            continue
        a, rho = recover_a_rho(m1.eigenvalue, m2.eigenvalue, c1.mu, c2.mu)
        q0 = 0.5 * (c1.q0 + c2.q0)
        q1 = 0.5 * (c1.q1 + c2.q1)
        row = Candidate(mu1=c1.mu, mu2=c2.mu, a_hat=a, rho_hat=rho, q0_hat=q0, q1_hat=q1,
                        validation_mismatch=np.inf)
        if rho <= 0:
            row.reason = "rho <= 0"
            rows.append(row)
            continue
        try:
            fwd = sl_eigenvalues(PlantParams(rho=rho, a=a, q0=q0, q1=q1, z0=z0), lam_plant.size)
        except ValueError as exc:
            row.reason = str(exc)
            rows.append(row)
            continue
        rel = np.abs(fwd - lam_plant) / np.maximum(1.0, np.abs(lam_plant))
        row.validation_mismatch = float(np.mean(rel))
        if max(rel[0], rel[1]) <= cfg.validation_tol:
            row.accepted = True
        else:
            row.reason = "identified eigenvalues are not the dominant pair of the forward problem"
        rows.append(row)

    accepted = [r for r in rows if r.accepted]
    if not accepted:
        lines = "\n".join(f"  mu=({r.mu1:.6g}, {r.mu2:.6g}) mismatch={r.validation_mismatch:.3g} {r.reason}"
                          for r in rows) or "  (no root pairing passed the q-agreement check)"
        raise ValueError("identification failed; candidates:\n" + lines)
    best = min(accepted, key=lambda r: (r.validation_mismatch, abs(r.mu1)))
    for r in rows:
        if r is not best:
            r.accepted = False
    fwd = sl_eigenvalues(PlantParams(best.rho_hat, best.a_hat, best.q0_hat, best.q1_hat, z0), lam_plant.size)
    plant = IdentifiedPlant(
        rho_hat=best.rho_hat, a_hat=best.a_hat, q0_hat=best.q0_hat, q1_hat=best.q1_hat,
        mu=(best.mu1, best.mu2),
        validation={"dmd": lam_plant.tolist(), "forward": fwd.tolist(),
                    "relative_error": (np.abs(fwd - lam_plant) / np.maximum(1.0, np.abs(lam_plant))).tolist(),
                    "mismatch": best.validation_mismatch},
    )
    return IdentificationResult(plant=plant, disturbance=disturbance, candidates=rows,
                                plant_modes=plant_modes)


def write_identification_csv(path, result: IdentificationResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu1", "mu2", "a_hat", "rho_hat", "q0_hat", "q1_hat", "validation_mismatch", "accepted"])
        for r in result.candidates:
            w.writerow([f"{v:.17g}" for v in (r.mu1, r.mu2, r.a_hat, r.rho_hat, r.q0_hat, r.q1_hat,
                                               r.validation_mismatch)] + [int(r.accepted)])
