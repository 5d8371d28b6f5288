"""Simulation of the boundary-controlled reaction-diffusion plant.

The plant is

    x_t = (rho + d_rho(z)) x_zz + (a + d_a(z)) x + g1(z)^T d
    x_z(0) = (q0 + d_q0) x(0) + g2^T d
    x_z(1) = (q1 + d_q1) x(1) + u + g3^T d
    y      = x(z0) + g4^T d,   eta = (x(0), x(1)) + G5 d

with ``d`` produced by a marginally stable exosystem.  Space is discretised by
central differences with ghost-node elimination of the Robin conditions, time by
Crank-Nicolson with the exosystem propagated exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._sturm import bracket_roots, characteristic

__all__ = [
    "PlantParams",
    "UncertaintyProfile",
    "DisturbanceCoupling",
    "ExoModel",
    "Grid",
    "LinearSystem",
    "Trajectory",
    "exo_trajectory",
    "semidiscretize",
    "simulate",
    "collect_output_data",
    "sl_eigenvalues",
    "sawtooth_reference",
    "rectangular_pulse",
    "write_trajectory_csv",
    "write_state_csv",
    "write_output_data_csv",
    "read_output_data_csv",
]


@dataclass(frozen=True)
class PlantParams:
    """Nominal plant coefficients and the location of the controlled output."""

    rho: float
    a: float
    q0: float
    q1: float
    z0: float = 0.5

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not 0 < self.z0 < 1:
            raise ValueError(f"z0 must lie in (0, 1), got {self.z0}")


@dataclass(frozen=True)
class UncertaintyProfile:
    """Perturbations added on top of :class:`PlantParams`.

    ``delta_rho`` and ``delta_a`` may be scalars (constant in space) or arrays
    sampled at the grid nodes.
    """

    delta_rho: float | np.ndarray = 0.0
    delta_a: float | np.ndarray = 0.0
    delta_q0: float = 0.0
    delta_q1: float = 0.0

    @classmethod
    def zero(cls) -> "UncertaintyProfile":
        return cls()

    def on_grid(self, grid: "Grid") -> tuple[np.ndarray, np.ndarray]:
        d_rho = np.broadcast_to(np.asarray(self.delta_rho, dtype=float), (grid.N,)).copy()
        d_a = np.broadcast_to(np.asarray(self.delta_a, dtype=float), (grid.N,)).copy()
        return d_rho, d_a


@dataclass(frozen=True)
class DisturbanceCoupling:
    """Input locations of a ``q``-dimensional disturbance.

    ``g1`` is either a length-``q`` vector (spatially constant) or an ``(N, q)``
    array of nodal values.
    """

    g1: np.ndarray
    g2: np.ndarray
    g3: np.ndarray
    g4: np.ndarray
    G5: np.ndarray

    def __post_init__(self):
        g2 = np.atleast_1d(np.asarray(self.g2, dtype=float))
        q = g2.shape[0]
        object.__setattr__(self, "g2", g2)
        object.__setattr__(self, "g3", np.atleast_1d(np.asarray(self.g3, dtype=float)))
        object.__setattr__(self, "g4", np.atleast_1d(np.asarray(self.g4, dtype=float)))
        object.__setattr__(self, "G5", np.asarray(self.G5, dtype=float).reshape(2, -1))
        g1 = np.asarray(self.g1, dtype=float)
        if g1.ndim == 0:
            g1 = g1.reshape(1)
        object.__setattr__(self, "g1", g1)
        shapes = [self.g3.shape[0], self.g4.shape[0], self.G5.shape[1], g1.shape[-1]]
        if any(s != q for s in shapes):
            raise ValueError("disturbance coupling vectors must share the same dimension q")

    @property
    def q(self) -> int:
        return self.g2.shape[0]

    @classmethod
    def zero(cls, q: int = 1) -> "DisturbanceCoupling":
        z = np.zeros(q)
        return cls(g1=z, g2=z, g3=z, g4=z, G5=np.zeros((2, q)))

    def g1_on_grid(self, grid: "Grid") -> np.ndarray:
        if self.g1.ndim == 1:
            return np.tile(self.g1, (grid.N, 1))
        if self.g1.shape != (grid.N, self.q):
            raise ValueError(f"g1 has shape {self.g1.shape}, expected ({grid.N}, {self.q})")
        return self.g1


@dataclass(frozen=True)
class ExoModel:
    """Signal generator ``w' = S w``, ``out = P w`` with ``w(0) = x0``."""

    S: np.ndarray
    P: np.ndarray
    x0: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=float))
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if not (np.all(np.isfinite(S)) and np.all(np.isfinite(P)) and np.all(np.isfinite(x0))):
            raise ValueError("invalid exosystem: non-finite entries")
        n = S.shape[0]
        if S.shape != (n, n) or P.shape[1] != n or x0.shape != (n,):
            raise ValueError("invalid exosystem: inconsistent dimensions")
        eig = np.linalg.eigvals(S)
        if np.any(np.abs(eig.real) > 1e-10):
            raise ValueError("invalid exosystem: eigenvalues off the imaginary axis")
        obs = np.vstack([P @ np.linalg.matrix_power(S, k) for k in range(n)])
        if np.linalg.matrix_rank(obs) < n:
            raise ValueError("invalid exosystem: (P, S) not observable")
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "x0", x0)

    @property
    def n(self) -> int:
        return self.S.shape[0]

    @property
    def m(self) -> int:
        return self.P.shape[0]

    @classmethod
    def sinusoid(cls, omega: float, amplitude: float = 1.0, phase: float = 0.0) -> "ExoModel":
        """``amplitude * sin(omega t + phase)``."""
        S = np.array([[0.0, 1.0], [-omega**2, 0.0]])
        x0 = amplitude * np.array([np.sin(phase), omega * np.cos(phase)])
        return cls(S=S, P=np.array([[1.0, 0.0]]), x0=x0)

    @classmethod
    def constant(cls, value: float) -> "ExoModel":
        return cls(S=np.zeros((1, 1)), P=np.ones((1, 1)), x0=np.array([value]))

    @classmethod
    def ramp(cls, offset: float, slope: float) -> "ExoModel":
        return cls(S=np.array([[0.0, 1.0], [0.0, 0.0]]), P=np.array([[1.0, 0.0]]),
                   x0=np.array([offset, slope]))

    def state_at(self, t: float) -> np.ndarray:
        return sla.expm(self.S * t) @ self.x0


def exo_trajectory(model: ExoModel, t_grid: Sequence[float]) -> np.ndarray:
    """Evaluate ``P exp(S t) x0`` on ``t_grid``; returns an array ``(len(t_grid), m)``.

    On a uniform grid the propagator ``exp(S dt)`` is formed once and applied
    recursively.
    """
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size == 0:
        raise ValueError("t_grid must be a nonempty 1-d sequence")
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be increasing")
    S = np.asarray(model.S, dtype=float)
    if not np.all(np.isfinite(S)):
        raise ValueError("invalid exosystem")
    out = np.empty((t.size, model.m))
    steps = np.diff(t)
    uniform = t.size > 2 and np.allclose(steps, steps[0], rtol=0, atol=1e-12 * max(1.0, abs(t[-1])))
    if uniform:
        # restart from an exact expm every 1000 steps to bound round-off growth
        step = sla.expm(S * steps[0])
        w = None
        for k in range(t.size):
            if k % 1000 == 0:
                w = sla.expm(S * t[k]) @ model.x0
            else:
                w = step @ w
            out[k] = model.P @ w
    else:
        for k, tk in enumerate(t):
            out[k] = model.P @ (sla.expm(S * tk) @ model.x0)
    return out


@dataclass(frozen=True)
class Grid:
    """Uniform nodes ``z_j = j / (N - 1)`` on ``[0, 1]``."""

    N: int

    def __post_init__(self):
        if self.N < 3:
            raise ValueError("grid needs at least 3 nodes")

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N)

    @property
    def h(self) -> float:
        return 1.0 / (self.N - 1)

    def index_of(self, z: float) -> int:
        """Node index of ``z``; raises if ``z`` is not a grid node."""
        j = int(round(z * (self.N - 1)))
        if abs(j * self.h - z) > 1e-9:
            raise ValueError(f"z0={z} is not a node of the {self.N}-point grid")
        return j

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.N, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


@dataclass
class LinearSystem:
    """Semidiscrete plant ``x' = A x + B_d d + b_u u`` with its output maps."""

    grid: Grid
    A: sp.csr_matrix
    B_d: np.ndarray
    b_u: np.ndarray
    c_y: np.ndarray
    d_y: np.ndarray
    C_eta: np.ndarray
    D_eta: np.ndarray

    @property
    def N(self) -> int:
        return self.grid.N

    def eigenvalues(self) -> np.ndarray:
        """Eigenvalues of ``A`` sorted by descending real part."""
        ev = np.linalg.eigvals(self.A.toarray())
        return ev[np.lexsort((ev.imag, -ev.real))]


def semidiscretize(params: PlantParams, unc: Optional[UncertaintyProfile] = None,
                   coup: Optional[DisturbanceCoupling] = None,
                   grid: Optional[Grid] = None) -> LinearSystem:
    """Central-difference semidiscretisation with ghost-node Robin conditions."""
    unc = unc or UncertaintyProfile.zero()
    coup = coup or DisturbanceCoupling.zero()
    grid = grid or Grid(201)
    N, h = grid.N, grid.h
    j0 = grid.index_of(params.z0)

    d_rho, d_a = unc.on_grid(grid)
    rho = params.rho + d_rho
    if np.any(rho <= 0):
        raise ValueError("rho + delta_rho must be positive at every node")
    react = params.a + d_a
    q0 = params.q0 + unc.delta_q0
    q1 = params.q1 + unc.delta_q1

    main = -2.0 * np.ones(N)
    upper = np.ones(N - 1)
    lower = np.ones(N - 1)
    # ghost nodes: x_{-1} = x_1 - 2h(q0 x_0 + g2 d),  x_N = x_{N-2} + 2h(q1 x_{N-1} + u + g3 d)
    upper[0] = 2.0
    lower[-1] = 2.0
    main[0] -= 2.0 * h * q0
    main[-1] += 2.0 * h * q1
    lap = sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / h**2
    A = (sp.diags(rho) @ lap + sp.diags(react)).tocsr()

    B_d = coup.g1_on_grid(grid).astype(float).copy()
    B_d[0] += -2.0 * rho[0] / h * coup.g2
    B_d[-1] += 2.0 * rho[-1] / h * coup.g3
    b_u = np.zeros(N)
    b_u[-1] = 2.0 * rho[-1] / h

    c_y = np.zeros(N)
    c_y[j0] = 1.0
    C_eta = np.zeros((2, N))
    C_eta[0, 0] = 1.0
    C_eta[1, -1] = 1.0
    return LinearSystem(grid=grid, A=A, B_d=B_d, b_u=b_u, c_y=c_y, d_y=coup.g4.copy(),
                        C_eta=C_eta, D_eta=coup.G5.copy())


@dataclass
class Trajectory:
    """Sampled solution.  ``outputs`` columns are ``(y, eta0, eta1)``."""

    times: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    exo_states: Optional[np.ndarray] = None
    inputs: Optional[np.ndarray] = None
    dt: float = field(default=0.0)

    def __post_init__(self):
        if self.times.ndim != 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        if len(self.states) != len(self.times) or len(self.outputs) != len(self.times):
            raise ValueError("state/output sequences must match the time grid")

    @property
    def y(self) -> np.ndarray:
        return self.outputs[:, 0]

    @property
    def eta(self) -> np.ndarray:
        return self.outputs[:, 1:3]

    def index_of(self, t: float) -> int:
        k = int(round((t - self.times[0]) / self.dt))
        if k < 0 or k >= self.times.size or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)) + 1e-12:
            raise ValueError(f"t={t} is not on the trajectory time grid")
        return k


def time_grid(t_start: float, t_end: float, dt: float) -> np.ndarray:
    steps = int(round((t_end - t_start) / dt))
    if steps < 1 or abs(steps * dt - (t_end - t_start)) > 1e-9 * max(1.0, abs(t_end)):
        raise ValueError("t_end - t_start must be a positive multiple of dt")
    return t_start + dt * np.arange(steps + 1)


class CrankNicolson:
    """Crank-Nicolson stepper for ``x' = A x + f(t)`` with damped restarts.

    Restarts at a breakpoint (start of integration or an input discontinuity)
    replace the next ``damping_steps`` steps by pairs of backward-Euler half
    steps.  This suppresses the undamped oscillation that Crank-Nicolson leaves
    in stiff modes after a discontinuity, and both step types share the
    factorisation of ``I - dt/2 A``.
    """

    def __init__(self, A, dt: float):
        self.dt = dt
        n = A.shape[0]
        if sp.issparse(A):
            eye = sp.identity(n, format="csc")
            lhs = (eye - 0.5 * dt * A).tocsc()
            self._rhs_op = (eye + 0.5 * dt * A).tocsr()
            try:
                lu = spla.splu(lhs)
            except RuntimeError as exc:
                raise np.linalg.LinAlgError("singular implicit-step matrix") from exc
            self._solve = lu.solve
        else:
            A = np.asarray(A)
            lhs = np.eye(n) - 0.5 * dt * A
            self._rhs_op = np.eye(n) + 0.5 * dt * A
            lu = sla.lu_factor(lhs, check_finite=True)
            if np.any(np.abs(np.diag(lu[0])) < 1e-14 * np.abs(np.diag(lu[0])).max()):
                raise np.linalg.LinAlgError("singular implicit-step matrix")
            self._solve = lambda b: sla.lu_solve(lu, b)

    def cn_step(self, x: np.ndarray, f_mid: np.ndarray) -> np.ndarray:
        return self._solve(self._rhs_op @ x + self.dt * f_mid)

    def be_half_step(self, x: np.ndarray, f_end: np.ndarray) -> np.ndarray:
        return self._solve(x + 0.5 * self.dt * f_end)


def rectangular_pulse(amplitude: float, t_on: float, t_off: float) -> Callable[[float], float]:
    """``amplitude`` on ``[t_on, t_off)``, zero elsewhere."""
    def u(t):
        return amplitude if t_on <= t < t_off else 0.0
    return u


def simulate(system: LinearSystem, exo_d: Optional[ExoModel], u: Optional[Callable[[float], float]],
             x0, t_end: float, dt: float, t_start: float = 0.0,
             breakpoints: Sequence[float] = (), damping_steps: int = 2) -> Trajectory:
    """Integrate the semidiscrete plant from ``t_start`` to ``t_end``.

    Parameters
    ----------
    system : LinearSystem
        Output of :func:`semidiscretize`.
    exo_d : ExoModel or None
        Disturbance generator; its ``x0`` is the state at ``t = 0``.
    u : callable or None
        Boundary input ``u(t)``.  Evaluated at step midpoints, so a piecewise
        constant input switching on grid times is integrated exactly.
    x0 : array_like
        Initial plant state at ``t_start`` (scalar broadcasts).
    breakpoints : sequence of float
        Times where ``u`` jumps; damped restarts are applied after each.
    damping_steps : int
        Number of steps replaced by backward-Euler half steps after the start
        and after each breakpoint.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if t_end - t_start < dt * (1 - 1e-12):
        raise ValueError("t_end must be at least one step past t_start")
    times = time_grid(t_start, t_end, dt)
    N = system.N
    x = np.broadcast_to(np.asarray(x0, dtype=float), (N,)).copy()
    q = system.B_d.shape[1]

    if exo_d is not None:
        if exo_d.m != q:
            raise ValueError(f"disturbance dimension {exo_d.m} does not match coupling q={q}")
        w = exo_d.state_at(t_start)
        E_full = sla.expm(exo_d.S * dt)
        E_half = sla.expm(exo_d.S * 0.5 * dt)
        P = exo_d.P
    else:
        w = np.zeros(0)
    u_fun = u if u is not None else (lambda t: 0.0)

    stepper = CrankNicolson(system.A, dt)
    restart_idx = {0}
    for tb in breakpoints:
        k = int(round((tb - t_start) / dt))
        if 0 <= k < times.size - 1:
            restart_idx.add(k)
    damped = set()
    for k in restart_idx:
        damped.update(range(k, min(k + damping_steps, times.size - 1)))

    def d_of(wk):
        return P @ wk if exo_d is not None else np.zeros(q)

    n_t = times.size
    states = np.empty((n_t, N))
    outputs = np.empty((n_t, 3))
    inputs = np.empty(n_t)
    exo_states = np.empty((n_t, w.size))

    def record(k, x, w):
        d = d_of(w)
        states[k] = x
        outputs[k, 0] = system.c_y @ x + system.d_y @ d
        outputs[k, 1:] = system.C_eta @ x + system.D_eta @ d
        inputs[k] = u_fun(times[k])
        exo_states[k] = w

    record(0, x, w)
    for k in range(n_t - 1):
        t = times[k]
        if k in damped:
            # two backward-Euler half steps, forcing evaluated at their ends
            if exo_d is not None:
                w_half = E_half @ w
                w_next = E_full @ w
            else:
                w_half = w_next = w
            f1 = system.B_d @ d_of(w_half) + system.b_u * u_fun(t + 0.25 * dt)
            x = stepper.be_half_step(x, f1)
            f2 = system.B_d @ d_of(w_next) + system.b_u * u_fun(t + 0.75 * dt)
            x = stepper.be_half_step(x, f2)
        else:
            w_mid = E_half @ w if exo_d is not None else w
            f = system.B_d @ d_of(w_mid) + system.b_u * u_fun(t + 0.5 * dt)
            x = stepper.cn_step(x, f)
            w_next = E_full @ w if exo_d is not None else w
        w = w_next
        record(k + 1, x, w)
    return Trajectory(times=times, states=states, outputs=outputs,
                      exo_states=exo_states if w.size else None, inputs=inputs, dt=dt)


def collect_output_data(traj: Trajectory, ts: float, count: int, t0: float = 0.0) -> np.ndarray:
    """Exact subsample ``(y, eta)`` at ``t0 + k ts`` for ``k = 0..count-1``.

    Returns a ``3 x count`` array.
    """
    ratio = ts / traj.dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-8 * max(1.0, ratio):
        raise ValueError(f"resample misaligned: ts={ts} is not a multiple of dt={traj.dt}")
    k0 = traj.index_of(t0)
    last = k0 + stride * (count - 1)
    if last >= traj.times.size:
        raise ValueError(f"not enough samples: need t up to {t0 + ts * (count - 1):g}")
    return traj.outputs[k0:last + 1:stride].T.copy()


def _mu_upper_bound(q0: float, q1: float) -> float:
    # Rayleigh quotient with the trace inequality phi(b)^2 <= eps|phi'|^2 + (1 + 1/eps)|phi|^2
    p = max(q1, 0.0) + max(-q0, 0.0)
    return p * (p + 1.0) + 1.0


def sl_eigenvalues(params: PlantParams, count: int, k_step: float = 0.01) -> np.ndarray:
    """First ``count`` eigenvalues of ``rho phi'' + a phi`` with Robin conditions.

    Roots of the characteristic function are bracketed on a grid that is
    uniform in ``sqrt(|mu|)`` and refined by bisection; the result is returned in
    descending order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    q0, q1 = params.q0, params.q1
    s_max = np.sqrt(_mu_upper_bound(q0, q1))
    k_max = (count + 2) * np.pi + abs(q0) + abs(q1) + 1.0
    pos = np.arange(s_max, 0.0, -k_step) ** 2
    neg = -(np.arange(0.0, k_max + k_step, k_step) ** 2)
    grid = np.concatenate([pos, neg])[::-1]
    roots = bracket_roots(lambda m: characteristic(m, q0, q1), grid)[::-1]
    roots = _dedupe(roots)
    if roots.size < count:
        raise ValueError(f"only {roots.size} eigenvalues found for mu in [{grid[0]:.4g}, {grid[-1]:.4g}]")
    return params.a + params.rho * roots[:count]


def _dedupe(values: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    if values.size == 0:
        return values
    keep = [values[0]]
    for v in values[1:]:
        if abs(v - keep[-1]) > tol * max(1.0, abs(v)):
            keep.append(v)
    return np.asarray(keep)


def sawtooth_reference(amplitude_slope: float, period: float, t):
    """``slope * mod(t, period)``; vectorised over ``t``."""
    if period <= 0:
        raise ValueError("period must be positive")
    return amplitude_slope * np.mod(t, period)


def _fmt17(v: float) -> str:
    return f"{float(v):.17g}"


def write_trajectory_csv(path, traj: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y", "eta0", "eta1"])
        for t, out in zip(traj.times, traj.outputs):
            w.writerow([_fmt17(t), _fmt17(out[0]), _fmt17(out[1]), _fmt17(out[2])])


def write_state_csv(path, traj: Trajectory) -> None:
    N = traj.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"x_{j}" for j in range(N)])
        for t, x in zip(traj.times, traj.states):
            w.writerow([_fmt17(t)] + [_fmt17(v) for v in x])


def read_trajectory_csv(path) -> Trajectory:
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = arr[:, 0]
    dt = float(np.median(np.diff(times))) if times.size > 1 else 0.0
    return Trajectory(times=times, states=np.zeros((times.size, 0)), outputs=arr[:, 1:4], dt=dt)


def write_output_data_csv(path, data: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(data):
            w.writerow([_fmt17(v) for v in row])


def read_output_data_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[0] != 3:
        raise ValueError(f"{path}: expected 3 rows (y, eta0, eta1), got {data.shape[0]}")
    return data
