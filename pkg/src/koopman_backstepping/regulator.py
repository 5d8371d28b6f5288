"""Backstepping design of the robust output regulator.

The regulator consists of an internal model ``varpi' = S_min varpi + b_y e_y``
and the state feedback

    u = -k_varpi^T varpi - k1 x(1) - int_0^1 k_x(z) x(z) dz.

Its gains come from the backstepping kernel ``k(z, zeta)`` on
``0 <= zeta <= z <= 1``, the inverse kernel, and the solution of the
decoupling boundary value problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CubicSpline
from scipy.optimize import linear_sum_assignment

__all__ = [
    "InternalModel",
    "Kernel",
    "InverseKernel",
    "DecouplingSolution",
    "RegulatorGains",
    "build_internal_model",
    "solve_kernel",
    "kernel_pde_residual",
    "kernel_boundary_residual",
    "inverse_kernel",
    "transform",
    "inverse_transform",
    "interval_weights",
    "volterra_weights",
    "volterra_matrix",
    "solve_decoupling",
    "pole_place",
    "assemble_gains",
    "design_regulator",
    "controllability_matrix",
    "write_gains",
]


def controllability_matrix(S: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = S.shape[0]
    cols = [np.asarray(b, dtype=float)]
    for _ in range(n - 1):
        cols.append(S @ cols[-1])
    return np.column_stack(cols)


def _is_controllable(S, b) -> bool:
    C = controllability_matrix(S, b)
    return np.linalg.matrix_rank(C) == S.shape[0] and np.linalg.cond(C) < 1e12


@dataclass
class InternalModel:
    """Block-diagonal internal model; ``blocks`` lists ``(frequency, multiplicity)``."""

    S_min: np.ndarray
    b_y: np.ndarray
    blocks: list = field(default_factory=list)

    @property
    def n_bar(self) -> int:
        return self.S_min.shape[0]

    def eigenvalues(self) -> np.ndarray:
        out = []
        for w, m in self.blocks:
            out.extend(([1j * w, -1j * w] if w > 0 else [0.0]) * m)
        return np.asarray(out, dtype=complex)


def _companion(coeffs: np.ndarray) -> np.ndarray:
    # monic polynomial s^n + c_{n-1} s^{n-1} + ... + c_0, coeffs = (c_0, ..., c_{n-1})
    n = coeffs.size
    C = np.zeros((n, n))
    C[:-1, 1:] = np.eye(n - 1)
    C[-1, :] = -coeffs + 0.0
    return C


def _block(w: float, m: int) -> np.ndarray:
    base = np.array([w * w, 0.0, 1.0]) if w > 0 else np.array([0.0, 1.0])
    poly = np.array([1.0])
    for _ in range(m):
        poly = np.convolve(poly, base)
    # poly holds ascending coefficients, leading one last
    return _companion(poly[:-1])


def _group_frequencies(eigenvalues, tol: float = 1e-6) -> list:
    """Count multiplicities of ``|Im|`` values, treating a conjugate pair as one."""
    lam = np.asarray(list(eigenvalues), dtype=complex)
    groups: list[list] = []
    for w in np.abs(lam.imag):
        for g in groups:
            if abs(g[0] - w) <= tol * max(1.0, w):
                g[1] += 1
                break
        else:
            groups.append([w, 1])
    # a conjugate pair contributes two entries at the same |Im|
    return [(g[0], g[1] // 2 if g[0] > 0 else g[1]) for g in groups]


def build_internal_model(disturbance, reference: Sequence = ()) -> InternalModel:
    """Internal model whose spectrum is the union of both signal models.

    Parameters
    ----------
    disturbance : DisturbanceSpectrum or sequence of complex
        Identified disturbance eigenvalues (conjugate pairs).  Real parts are
        dropped so that ``S_min`` is exactly marginally stable.
    reference : sequence
        Reference-model eigenvalues, either as a flat list with repetitions
        (``[0, 0]`` for a ramp) or as ``(eigenvalue, multiplicity)`` pairs.

    Each distinct frequency gets one companion block for ``(s^2 + w^2)^m``
    (``s^m`` at ``w = 0``) with ``m`` the larger of its multiplicities in the
    two models.  ``b_y`` puts a one in the first row of each oscillator block
    and in the last row of each block at zero, falling back to the last row
    everywhere if that pair is not controllable.
    """
    dist_eigs = getattr(disturbance, "eigenvalues", disturbance)
    ref_eigs = []
    for item in reference:
        if isinstance(item, (tuple, list)) and len(item) == 2:
            ref_eigs.extend([complex(item[0])] * int(item[1]))
            if complex(item[0]).imag != 0:
                ref_eigs.extend([complex(item[0]).conjugate()] * int(item[1]))
        else:
            ref_eigs.append(complex(item))
    for lam in list(dist_eigs) + ref_eigs:
        if not np.isfinite(lam):
            raise ValueError("non-finite signal-model eigenvalue")
    mult: dict = {}
    for w, m in _group_frequencies(dist_eigs) + _group_frequencies(ref_eigs):
        key = next((k for k in mult if abs(k - w) <= 1e-6 * max(1.0, w)), w)
        mult[key] = max(mult.get(key, 0), m)
    if not mult:
        raise ValueError("internal model needs at least one signal-model eigenvalue")
    blocks = sorted(mult.items(), key=lambda kv: -kv[0])

    mats, b_first, b_last = [], [], []
    for w, m in blocks:
        B = _block(w, m)
        mats.append(B)
        e_first = np.zeros(B.shape[0])
        e_last = np.zeros(B.shape[0])
        e_first[0] = 1.0
        e_last[-1] = 1.0
        b_first.append(e_first if w > 0 else e_last)
        b_last.append(e_last)
    n = sum(B.shape[0] for B in mats)
    S_min = np.zeros((n, n))
    k = 0
    for B in mats:
        S_min[k:k + B.shape[0], k:k + B.shape[0]] = B
        k += B.shape[0]
    for b in (np.concatenate(b_first), np.concatenate(b_last)):
        if _is_controllable(S_min, b):
            return InternalModel(S_min=S_min, b_y=b, blocks=[(float(w), int(m)) for w, m in blocks])
    raise ValueError("internal model pair (S_min, b_y) is not controllable")


@dataclass
class Kernel:
    """Backstepping kernel sampled on ``z_i = i h``, ``zeta_j = j h``.

    ``values[i, j]`` holds ``k(z_i, zeta_j)`` for ``j <= i`` and zero above the
    diagonal.
    """

    nodes: np.ndarray
    values: np.ndarray
    k_z_at_1: np.ndarray
    rho: float
    a: float
    q0: float
    mu_c: float
    iterations: int = 0
    changes: list = field(default_factory=list)
    levels: Optional[tuple] = None

    @property
    def h(self) -> float:
        return float(self.nodes[1] - self.nodes[0])

    @property
    def diag(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def diag_exact(self, z) -> np.ndarray:
        return self.q0 - (self.a + self.mu_c) * np.asarray(z) / (2.0 * self.rho)


def _characteristic_picard(lam_bc: float, lam_pde: float, q0: float, M: int, tol: float,
                           max_iter: int):
    """Successive approximation of the kernel integral equation on ``M`` cells.

    ``lam_bc`` sets the boundary data ``G(xi, 0) = q0 - lam_bc xi / 4`` and
    ``lam_pde`` the interior coupling ``G_xi_eta = lam_pde / 4 G``.
    """
    h = 1.0 / M
    c = lam_pde / 4.0
    P = np.arange(2 * M + 1)[:, None]
    Mi = np.arange(M + 1)[None, :]
    valid = P >= Mi
    G0 = np.where(valid, q0 - lam_bc * h * (P + Mi) / 4.0, 0.0)
    d = np.arange(M + 1)

    def parts(G):
        row_cum = cumulative_trapezoid(G, dx=h, axis=1, initial=0.0)
        T1 = cumulative_trapezoid(c * row_cum[d, d] - q0 * G[d, d], dx=h, initial=0.0)
        colcum = cumulative_trapezoid(G, dx=h, axis=0, initial=0.0)
        J = np.where(valid, colcum - colcum[d, d][None, :], 0.0)
        T2 = c * cumulative_trapezoid(J, dx=h, axis=1, initial=0.0)
        return row_cum, T1, J, T2

    G = G0.copy()
    changes = []
    for it in range(1, max_iter + 1):
        _, T1, _, T2 = parts(G)
        G_new = np.where(valid, G0 + T1[None, :] + T2, 0.0)
        changes.append(float(np.max(np.abs(G_new - G))))
        G = G_new
        if changes[-1] < tol:
            break
    else:
        raise RuntimeError(f"kernel iteration did not converge in {max_iter} steps "
                           f"(last change {changes[-1]:.3e})")

    row_cum, _, J, _ = parts(G)
    G_xi = -lam_bc / 4.0 + c * row_cum
    G_eta = (G_xi[d, d] - q0 * G[d, d])[None, :] + c * J
    i = d[:, None]
    j = d[None, :]
    vals = np.where(j <= i, G[np.clip(i + j, 0, 2 * M), np.clip(i - j, 0, M)], 0.0)
    kz1 = G_xi[M + d, M - d] + G_eta[M + d, M - d]
    return vals, kz1, it, changes


def solve_kernel(rho_hat: float, a_hat: float, q0_hat: float, mu_c: float, N_k: int = 201,
                 tol: float = 1e-11, max_iter: int = 200, extrapolate: bool = True) -> Kernel:
    """Kernel equations by successive approximation in characteristic coordinates.

    With ``xi = z + zeta``, ``eta = z - zeta``, ``G(xi, eta) = k(z, zeta)`` and
    ``lam = (a + mu_c) / rho`` the problem becomes ``G_xi_eta = lam/4 G`` with
    ``G(xi, 0) = q0 - lam xi / 4`` and ``G_xi - G_eta = q0 G`` on ``xi = eta``.
    Integrating twice gives

        G = q0 - lam (xi + eta) / 4
            + int_0^eta [ lam/4 int_0^s G(s, sig) dsig - q0 G(s, s) ] ds
            + lam/4 int_0^eta int_s^xi G(tau, s) dtau ds

    which is iterated with trapezoidal quadrature on a lattice of spacing
    ``h = 1 / (N_k - 1)``.  ``k_z(1, zeta)`` is taken from the same integral
    representation of ``G_xi + G_eta``.

    With ``extrapolate`` the iteration is repeated at ``h / 2`` and the two
    results are combined by Richardson extrapolation, raising the order of the
    quadrature error from two to four.
    """
    if rho_hat <= 0:
        raise ValueError("rho_hat must be positive")
    if N_k < 51:
        raise ValueError("N_k must be at least 51")
    M = N_k - 1
    lam = (a_hat + mu_c) / rho_hat
    vals, kz1, it, changes = _characteristic_picard(lam, lam, q0_hat, M, tol, max_iter)
    levels = None
    if extrapolate:
        vf, kf, _, _ = _characteristic_picard(lam, lam, q0_hat, 2 * M, tol, max_iter)
        levels = (vals, vf)
        vals = (4.0 * vf[::2, ::2] - vals) / 3.0
        kz1 = (4.0 * kf[::2] - kz1) / 3.0
        # the diagonal is exact on both lattices; keep it exact after combining
        d = np.arange(N_k)
        vals[d, d] = q0_hat - lam * d / M / 2.0
    nodes = np.linspace(0.0, 1.0, N_k)
    return Kernel(nodes=nodes, values=vals, k_z_at_1=kz1, rho=rho_hat, a=a_hat, q0=q0_hat,
                  mu_c=mu_c, iterations=it, changes=changes, levels=levels)


def kernel_pde_residual(kernel: Kernel) -> np.ndarray:
    """``rho (k_zz - k_zetazeta) - (a + mu_c) k`` at interior stencil points."""
    K, h = kernel.values, kernel.h
    M = K.shape[0] - 1
    out = []
    for i in range(2, M):
        j = np.arange(1, i - 1)
        kzz = (K[i + 1, j] - 2 * K[i, j] + K[i - 1, j]) / h**2
        kss = (K[i, j + 1] - 2 * K[i, j] + K[i, j - 1]) / h**2
        out.append(kernel.rho * (kzz - kss) - (kernel.a + kernel.mu_c) * K[i, j])
    return np.concatenate(out)


def kernel_boundary_residual(kernel: Kernel) -> np.ndarray:
    """``k_zeta(z, 0) - q0 k(z, 0)`` by one-sided second-order differences, ``z >= 2h``."""
    K, h = kernel.values, kernel.h
    i = np.arange(2, K.shape[0])
    dk = (-3 * K[i, 0] + 4 * K[i, 1] - K[i, 2]) / (2 * h)
    return dk - kernel.q0 * K[i, 0]


@dataclass
class InverseKernel:
    nodes: np.ndarray
    values: np.ndarray
    iterations: int = 0


def interval_weights(L: int) -> np.ndarray:
    """Fourth-order weights (in units of ``h``) for ``int`` over ``L`` cells.

    Small intervals use Newton-Cotes rules; from six cells on, the end-corrected
    trapezoid rule ``3/8, 7/6, 23/24, 1, ..., 1, 23/24, 7/6, 3/8``.
    """
    if L == 0:
        return np.zeros(1)
    simpson = np.array([1.0, 4.0, 1.0]) / 3.0
    three8 = np.array([3.0, 9.0, 9.0, 3.0]) / 8.0
    if L == 1:
        return np.array([0.5, 0.5])
    if L == 2:
        return simpson.copy()
    if L == 3:
        return three8.copy()
    if L in (4, 5):
        w = np.zeros(L + 1)
        w[:3] += simpson
        w[2:] += simpson if L == 4 else three8
        return w
    w = np.ones(L + 1)
    ends = np.array([3.0 / 8.0, 7.0 / 6.0, 23.0 / 24.0])
    w[:3] = ends
    w[-3:] = ends[::-1]
    return w


def volterra_weights(n: int) -> np.ndarray:
    """Lower-triangular ``W`` with ``W[i, :i+1]`` integrating over ``[z_0, z_i]``."""
    W = np.zeros((n, n))
    for i in range(n):
        W[i, :i + 1] = interval_weights(i)
    return W


def _weight_corrections(n: int):
    """Deviations of :func:`interval_weights` from one, split by position.

    Returns ``(start, end)`` with ``start[L, t]`` the deviation at offset ``t``
    from the lower limit and ``end[L, t]`` at offset ``t`` from the upper
    limit of an interval of ``L`` cells; short intervals use ``start`` only.
    """
    start = np.zeros((n, 6))
    end = np.zeros((n, 3))
    for L in range(n):
        dev = interval_weights(L) - 1.0
        if L < 6:
            start[L, :L + 1] = dev
        else:
            start[L, :3] = dev[:3]
            end[L, :3] = dev[::-1][:3]
    return start, end


def _inverse_picard(K: np.ndarray, tol: float, max_iter: int, corrected: bool):
    K = np.tril(K)
    n = K.shape[0]
    h = 1.0 / (n - 1)
    I, J = np.tril_indices(n)
    L = I - J
    if corrected:
        start, end = _weight_corrections(n)
    else:
        # plain trapezoid: half weight at both ends of every nonempty interval
        start = np.zeros((n, 6))
        end = np.zeros((n, 3))
        start[1:, 0] = -0.5
        end[1:, 0] = -0.5
        end[1:6, 0] = 0.0
        start[0, 0] = -1.0
        for Lc in range(1, 6):
            start[Lc, Lc] = -0.5
    s_terms = [(t, L >= t, start[L, t]) for t in range(6)]
    e_terms = [(t, L >= 6, end[L, t]) for t in range(3)]

    KI = K.copy()
    change = np.inf
    for it in range(1, max_iter + 1):
        acc = (K @ KI)[I, J]
        for t, ok, c in s_terms:
            s = np.where(ok, J + t, J)
            acc += np.where(ok, c * K[I, s] * KI[s, J], 0.0)
        for t, ok, c in e_terms:
            s = np.where(ok, I - t, I)
            acc += np.where(ok, c * K[I, s] * KI[s, J], 0.0)
        new = np.zeros_like(KI)
        new[I, J] = K[I, J] + h * acc
        change = float(np.max(np.abs(new - KI)))
        KI = new
        if change < tol:
            break
    else:
        raise RuntimeError(f"inverse kernel iteration did not converge (last change {change:.3e})")
    return KI, it


def inverse_kernel(kernel: Kernel, tol: float = 1e-11, max_iter: int = 500) -> InverseKernel:
    """Solve ``kI(z, zeta) = k(z, zeta) + int_zeta^z k(z, s) kI(s, zeta) ds``.

    Successive approximation with the integral over ``[zeta, z]`` evaluated as
    a unit-weight matrix product plus end corrections.  When the kernel carries
    its two trapezoid lattice levels, the iteration runs with trapezoid weights
    on both and the results are Richardson-extrapolated; otherwise the
    fourth-order end-corrected weights of :func:`interval_weights` are used.
    """
    if kernel.levels is not None:
        coarse, fine = kernel.levels
        KIc, it = _inverse_picard(coarse, tol, max_iter, corrected=False)
        KIf, _ = _inverse_picard(fine, tol, max_iter, corrected=False)
        KI = (4.0 * KIf[::2, ::2] - KIc) / 3.0
    else:
        KI, it = _inverse_picard(kernel.values, tol, max_iter, corrected=True)
    return InverseKernel(nodes=kernel.nodes.copy(), values=KI, iterations=it)


def _lagrange_table(width: int, n_gauss: int) -> np.ndarray:
    """Basis values of a ``width``-point unit-spaced stencil at Gauss points.

    ``table[r]`` has shape ``(n_gauss, width)`` for the Gauss points of the
    cell ``[r, r + 1]`` inside the stencil.
    """
    gx, _ = np.polynomial.legendre.leggauss(n_gauss)
    nodes = np.arange(width, dtype=float)
    table = np.empty((max(width - 1, 1), n_gauss, width))
    for r in range(max(width - 1, 1)):
        x = r + (gx + 1.0) / 2.0
        B = np.ones((n_gauss, width))
        for m in range(width):
            for k in range(width):
                if k != m:
                    B[:, m] *= (x - nodes[k]) / (nodes[m] - nodes[k])
        table[r] = B
    return table


def volterra_matrix(K: np.ndarray, h: float, width: int = 6, n_gauss: int = 5) -> np.ndarray:
    """Matrix ``V`` with ``(V f)_i = int_0^{z_i} k(z_i, zeta) f(zeta) dzeta``.

    Product Gauss quadrature on every cell: ``f`` is replaced by its local
    ``width``-point Lagrange interpolant (nodes may lie beyond ``z_i``, where
    ``f`` is still known) and the kernel row by its interpolant through nodes
    inside ``[0, z_i]``; rows shorter than the stencil are continued across
    the diagonal by column-wise extrapolation.  The rule is of order
    ``width`` for smooth data.
    """
    n = K.shape[0]
    width = min(width, n // 2)
    _, gw = np.polynomial.legendre.leggauss(n_gauss)
    gw = gw * h / 2.0
    tab = _lagrange_table(width, n_gauss)
    # extrapolation weights from nodes 0..width-1 to the points -1, -2, ...
    nodes = np.arange(width, dtype=float)

    def extrap(x):
        w = np.ones(width)
        for m in range(width):
            for k in range(width):
                if k != m:
                    w[m] *= (x - nodes[k]) / (nodes[m] - nodes[k])
        return w

    V = np.zeros((n, n))
    for i in range(1, n):
        row = K[i, :i + 1]
        if i + 1 < width:
            # kernels with constant coefficients are analytic across the
            # diagonal; continue the row along columns to fill the stencil
            ext = [extrap(float(i - j)) @ K[j:j + width, j] for j in range(i + 1, width)]
            row = np.concatenate([row, ext])
        for m in range(i):
            fs = min(max(m - (width - 1) // 2, 0), n - width)
            ks = min(max(m - (width - 1) // 2, 0), max(i + 1 - width, 0))
            kg = tab[m - ks] @ row[ks:ks + width]
            V[i, fs:fs + width] += (gw * kg) @ tab[m - fs]
    return V


def _volterra_apply(K: np.ndarray, f: np.ndarray, h: float) -> np.ndarray:
    return volterra_matrix(K, h) @ f


def transform(kernel: Kernel, f) -> np.ndarray:
    """``x~(z) = x(z) - int_0^z k(z, zeta) x(zeta) dzeta`` on the kernel grid."""
    f = np.asarray(f, dtype=float)
    return f - _volterra_apply(kernel.values, f, kernel.h)


def inverse_transform(kinv: InverseKernel, g) -> np.ndarray:
    """``x(z) = x~(z) + int_0^z kI(z, zeta) x~(zeta) dzeta`` on the kernel grid."""
    g = np.asarray(g, dtype=float)
    h = float(kinv.nodes[1] - kinv.nodes[0])
    return g + _volterra_apply(kinv.values, g, h)


@dataclass
class DecouplingSolution:
    """Solution of the decoupling equations.

    ``q_tilde`` lives on ``nodes`` (the decoupling grid), ``q_hat`` on
    ``kernel_nodes``; both are arrays of shape ``(nodes, n_bar)``.
    """

    nodes: np.ndarray
    q_tilde: np.ndarray
    kernel_nodes: np.ndarray
    q_hat: np.ndarray
    b: np.ndarray
    z0: float
    rho: float

    def derivative_jump(self) -> np.ndarray:
        """``q~'(z0+) - q~'(z0-)`` from one-sided fourth-order differences."""
        h = self.nodes[1] - self.nodes[0]
        m = int(round(self.z0 / h))
        Q = self.q_tilde
        c = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
        right = np.tensordot(c, Q[m:m + 5], axes=1) / h
        left = -np.tensordot(c, Q[m::-1][:5], axes=1) / h
        return right - left


def _piecewise_spline(x, y, z0, xq):
    """Cubic interpolation on ``[0, z0]`` and ``[z0, 1]`` separately."""
    out = np.empty((xq.size,) + y.shape[1:])
    left = x <= z0 + 1e-12
    right = x >= z0 - 1e-12
    ql = xq <= z0
    out[ql] = CubicSpline(x[left], y[left], axis=0)(xq[ql])
    out[~ql] = CubicSpline(x[right], y[right], axis=0)(xq[~ql])
    return out


def decoupling_matrix(S_min: np.ndarray, rho_hat: float, mu_c: float, N: int) -> sp.csr_matrix:
    """Block operator ``(S_min + mu_c I) q - rho q''`` with Neumann ghost nodes."""
    n = S_min.shape[0]
    h = 1.0 / (N - 1)
    main = -2.0 * np.ones(N)
    upper = np.ones(N - 1)
    lower = np.ones(N - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    L = sp.diags([lower, main, upper], [-1, 0, 1]) / h**2
    return (sp.kron(sp.identity(N), S_min + mu_c * np.eye(n)) - rho_hat * sp.kron(L, sp.identity(n))).tocsr()


def solve_decoupling(internal: InternalModel, rho_hat: float, mu_c: float, z0: float,
                     kernel_inverse: Optional[InverseKernel], N: int = 401,
                     kernel: Optional[Kernel] = None) -> DecouplingSolution:
    """Solve ``(S_min + mu_c) q~ - rho q~'' = -b_y c~(z)``, ``q~'(0) = q~'(1) = 0``.

    ``c~ = delta(z - z0) + kI(z0, z) 1[z <= z0]``.  The Dirac term is imposed as
    the jump ``[q~'](z0) = b_y / rho`` by averaging the ghost-node equations of
    both subdomains at the shared node ``z0``, which leaves ``b_y / h`` plus
    half the one-sided regular source on that row.

    With ``kernel`` given, ``q^(z) = q~(z) - int_z^1 q~(s) k(s, z) ds`` is
    evaluated on the kernel grid; otherwise ``q^ = q~``.
    """
    if mu_c <= 0:
        raise ValueError("mu_c must be positive")
    n = internal.n_bar
    h = 1.0 / (N - 1)
    nodes = np.linspace(0.0, 1.0, N)
    m = int(round(z0 * (N - 1)))
    if abs(m * h - z0) > 1e-9:
        raise ValueError(f"z0={z0} is not a node of the {N}-point decoupling grid")

    g = np.zeros(N)
    if kernel_inverse is not None:
        kin = kernel_inverse.nodes
        i0 = int(round(z0 * (kin.size - 1)))
        if abs(kin[i0] - z0) > 1e-9:
            raise ValueError("z0 must be a node of the kernel grid")
        row = kernel_inverse.values[i0, :i0 + 1]
        g[:m + 1] = CubicSpline(kin[:i0 + 1], row)(nodes[:m + 1])
    g[m] *= 0.5
    g[m] += 1.0 / h

    A = decoupling_matrix(internal.S_min, rho_hat, mu_c, N)
    rhs = -np.outer(g, internal.b_y).ravel()
    sol = spla.spsolve(A.tocsc(), rhs)
    if not np.all(np.isfinite(sol)):
        raise np.linalg.LinAlgError("decoupling system is singular")
    Q = sol.reshape(N, n)
    b = rho_hat * Q[-1].copy()

    if kernel is not None:
        kn = kernel.nodes
        Qk = _piecewise_spline(nodes, Q, z0, kn) if kn.size != N or not np.allclose(kn, nodes) else Q.copy()
        K = kernel.values
        hk = kernel.h
        # int_{z_j}^1 q~(s) k(s, z_j) ds, trapezoid over rows i >= j
        W = np.tril(K)[:, :, None] * Qk[:, None, :]
        cum = W.sum(axis=0) - 0.5 * (W[-1] + W[np.arange(kn.size), np.arange(kn.size)])
        cum *= hk
        cum[-1] = 0.0
        q_hat = Qk - cum
        kernel_nodes = kn.copy()
    else:
        q_hat = Q.copy()
        kernel_nodes = nodes.copy()
    return DecouplingSolution(nodes=nodes, q_tilde=Q, kernel_nodes=kernel_nodes, q_hat=q_hat,
                              b=b, z0=z0, rho=rho_hat)


def _match_error(achieved: np.ndarray, requested: np.ndarray) -> float:
    D = np.abs(achieved[:, None] - requested[None, :])
    r, c = linear_sum_assignment(D)
    return float(D[r, c].max())


def pole_place(S_min: np.ndarray, b: np.ndarray, desired_poles: Sequence[complex],
               tol: float = 1e-8) -> np.ndarray:
    """Ackermann's formula for ``eig(S_min + b k^T) = desired_poles``."""
    S = np.asarray(S_min, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    poles = np.asarray(desired_poles, dtype=complex)
    n = S.shape[0]
    if poles.size != n:
        raise ValueError(f"need {n} poles, got {poles.size}")
    if _match_error(poles, poles.conj()) > 1e-12 * max(1.0, np.abs(poles).max()):
        raise ValueError("desired poles must be closed under conjugation")
    C = controllability_matrix(S, b)
    if np.linalg.cond(C) > 1e12:
        raise ValueError("near-uncontrollable (transmission-zero proximity): "
                         f"cond(ctrb) = {np.linalg.cond(C):.3e}")
    coeffs = np.real(np.poly(poles))
    pS = np.zeros_like(S)
    for c in coeffs:
        pS = pS @ S + c * np.eye(n)
    e_n = np.zeros(n)
    e_n[-1] = 1.0
    k = -np.linalg.solve(C.T, e_n) @ pS
    achieved = np.linalg.eigvals(S + np.outer(b, k))
    err = _match_error(achieved, poles)
    if err > tol * max(1.0, np.abs(poles).max()):
        raise ValueError(f"pole placement inaccurate: max deviation {err:.3e}")
    return k


@dataclass
class RegulatorGains:
    """Feedback data of ``u = -k_varpi^T varpi - k1 x(1) - int k_x x``."""

    k_varpi: np.ndarray
    k1: float
    k_x: np.ndarray
    nodes: np.ndarray
    internal_model: InternalModel
    b: np.ndarray
    poles_requested: np.ndarray = field(default_factory=lambda: np.zeros(0, complex))

    @property
    def poles_achieved(self) -> np.ndarray:
        ev = np.linalg.eigvals(self.internal_model.S_min + np.outer(self.b, self.k_varpi))
        return ev[np.lexsort((ev.imag, -ev.real))]


def assemble_gains(kernel: Kernel, decoupling: DecouplingSolution, k_varpi, q1_hat: float,
                   internal: Optional[InternalModel] = None, poles=()) -> RegulatorGains:
    """``k1 = q1 - k(1, 1)`` and ``k_x(z) = -k_z(1, z) - k_varpi^T q^(z)``."""
    if decoupling.kernel_nodes.size != kernel.nodes.size or not np.allclose(decoupling.kernel_nodes, kernel.nodes):
        raise ValueError("grid mismatch between kernel and decoupling solution")
    k_varpi = np.asarray(k_varpi, dtype=float)
    k1 = q1_hat - kernel.values[-1, -1]
    k_x = -kernel.k_z_at_1 - decoupling.q_hat @ k_varpi
    internal = internal if internal is not None else InternalModel(
        S_min=np.zeros((k_varpi.size, k_varpi.size)), b_y=np.zeros(k_varpi.size))
    return RegulatorGains(k_varpi=k_varpi, k1=float(k1), k_x=k_x, nodes=kernel.nodes.copy(),
                          internal_model=internal, b=decoupling.b.copy(),
                          poles_requested=np.asarray(poles, dtype=complex))


@dataclass
class Design:
    """Everything produced by :func:`design_regulator`."""

    gains: RegulatorGains
    internal: InternalModel
    kernel: Kernel
    kernel_inverse: InverseKernel
    decoupling: DecouplingSolution


def design_regulator(rho_hat: float, a_hat: float, q0_hat: float, q1_hat: float, z0: float,
                     disturbance, reference: Sequence, mu_c: float, poles: Sequence[complex],
                     N_k: int = 201, N: int = 401) -> Design:
    """Run the full design chain from identified parameters to gains."""
    internal = build_internal_model(disturbance, reference)
    kernel = solve_kernel(rho_hat, a_hat, q0_hat, mu_c, N_k)
    kinv = inverse_kernel(kernel)
    dec = solve_decoupling(internal, rho_hat, mu_c, z0, kinv, N, kernel=kernel)
    k_varpi = pole_place(internal.S_min, dec.b, poles)
    gains = assemble_gains(kernel, dec, k_varpi, q1_hat, internal, poles)
    return Design(gains=gains, internal=internal, kernel=kernel, kernel_inverse=kinv, decoupling=dec)


def _c_list(z: np.ndarray) -> list:
    return [[float(v.real), float(v.imag)] for v in np.asarray(z, dtype=complex)]


def write_gains(json_path, csv_path, gains: RegulatorGains) -> None:
    """Scalar/vector gains to JSON, ``k_x`` to a ``z,k_x`` CSV."""
    doc = {
        "k1": gains.k1,
        "k_varpi": gains.k_varpi.tolist(),
        "b": gains.b.tolist(),
        "b_y": gains.internal_model.b_y.tolist(),
        "S_min": gains.internal_model.S_min.ravel().tolist(),
        "n_bar": gains.internal_model.n_bar,
        "poles_requested": _c_list(gains.poles_requested),
        "poles_achieved": _c_list(gains.poles_achieved),
    }
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w") as fh:
        fh.write("z,k_x\n")
        for z, k in zip(gains.nodes, gains.k_x):
            fh.write(f"{z:.17g},{k:.17g}\n")


def read_gains(json_path, csv_path) -> RegulatorGains:
    with open(json_path) as fh:
        doc = json.load(fh)
    n = int(doc["n_bar"])
    arr = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    internal = InternalModel(S_min=np.asarray(doc["S_min"]).reshape(n, n), b_y=np.asarray(doc["b_y"]))
    return RegulatorGains(k_varpi=np.asarray(doc["k_varpi"]), k1=float(doc["k1"]), k_x=arr[:, 1],
                          nodes=arr[:, 0], internal_model=internal, b=np.asarray(doc["b"]),
                          poles_requested=np.asarray([complex(r, i) for r, i in doc["poles_requested"]]))
