"""Closed-loop simulation of the plant under internal-model state feedback.

The loop state is ``(x, varpi)`` with ``x`` the nodal plant state and
``varpi`` the internal-model state.  Substituting the control law into the
semidiscrete plant gives the linear system

    d/dt [x; varpi] = A_cl [x; varpi] + [B_d d; b_y (g4^T d - r)]

driven only by the disturbance ``d`` and the reference ``r``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
import scipy.linalg as sla

from .pde_sim import (CrankNicolson, DisturbanceCoupling, ExoModel, Grid, PlantParams,
                      Trajectory, UncertaintyProfile, semidiscretize, time_grid)
from .regulator import InternalModel, RegulatorGains

__all__ = [
    "SawtoothReference",
    "ClosedLoopConfig",
    "RegulationMetrics",
    "ClosedLoopRun",
    "control_law",
    "feedback_row",
    "closed_loop_matrix",
    "closed_loop_spectrum",
    "simulate_closed_loop",
    "perturb",
    "zero_gains",
    "write_closed_loop_csv",
    "write_metrics_json",
]


@dataclass(frozen=True)
class SawtoothReference:
    """``r(t) = slope * mod(t, period)``; resets at multiples of ``period``."""

    slope: float
    period: float

    def __post_init__(self):
        if not self.period > 0:
            raise ValueError("sawtooth period must be positive")

    def __call__(self, t):
        return self.slope * np.mod(t, self.period)

    def resets(self, t_end: float) -> np.ndarray:
        k = np.arange(1, int(np.floor(t_end / self.period + 1e-9)) + 1)
        return k * self.period


Reference = Union[SawtoothReference, ExoModel, None]


@dataclass
class ClosedLoopConfig:
    """Everything needed to run one closed-loop scenario.

    ``reference`` is a :class:`SawtoothReference`, a scalar-output
    :class:`ExoModel`, or ``None`` for ``r = 0``; ``disturbance`` is an
    :class:`ExoModel` or ``None``.
    """

    params: PlantParams
    gains: RegulatorGains
    uncertainty: UncertaintyProfile = field(default_factory=UncertaintyProfile)
    coupling: Optional[DisturbanceCoupling] = None
    reference: Reference = None
    disturbance: Optional[ExoModel] = None
    t_end: float = 30.0
    dt: float = 1e-3
    x0: Union[float, np.ndarray] = 0.0
    varpi0: Optional[np.ndarray] = None
    tail_fraction: float = 0.2
    damping_steps: int = 2

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 < self.tail_fraction <= 1:
            raise ValueError("tail window must lie within [0, t_end]")

    @property
    def grid(self) -> Grid:
        return Grid(self.gains.nodes.size)


@dataclass
class RegulationMetrics:
    """Tracking-error summary of one run."""

    e_y: np.ndarray
    tail_sup: float
    tail_window: tuple
    pre_reset_errors: list = field(default_factory=list)
    closed_loop_spectrum: Optional[np.ndarray] = None

    def to_dict(self) -> dict:
        out = {
            "tail_sup": self.tail_sup,
            "tail_window": list(self.tail_window),
            "pre_reset_errors": [{"t_reset": t, "abs_e_y": e} for t, e in self.pre_reset_errors],
        }
        if self.closed_loop_spectrum is not None:
            out["closed_loop_spectrum"] = [[float(v.real), float(v.imag)]
                                           for v in self.closed_loop_spectrum]
        return out


@dataclass
class ClosedLoopRun:
    trajectory: Trajectory
    varpi: np.ndarray
    r: np.ndarray
    metrics: RegulationMetrics

    @property
    def e_y(self) -> np.ndarray:
        return self.metrics.e_y

    @property
    def u(self) -> np.ndarray:
        return self.trajectory.inputs


def feedback_row(gains: RegulatorGains) -> np.ndarray:
    """Row ``f`` with ``u = f^T x - k_varpi^T varpi`` (trapezoid quadrature)."""
    w = Grid(gains.nodes.size).trapezoid_weights()
    f = -w * gains.k_x
    f[-1] -= gains.k1
    return f


def control_law(x, varpi, gains: RegulatorGains) -> float:
    """``u = -k_varpi^T varpi - k1 x(1) - int_0^1 k_x(z) x(z) dz``."""
    x = np.asarray(x, dtype=float)
    varpi = np.atleast_1d(np.asarray(varpi, dtype=float))
    if x.shape != gains.k_x.shape:
        raise ValueError(f"state has {x.size} nodes, gains have {gains.k_x.size}")
    if varpi.shape != gains.k_varpi.shape:
        raise ValueError("internal-model state dimension does not match k_varpi")
    return float(feedback_row(gains) @ x - gains.k_varpi @ varpi)


def zero_gains(N: int, internal: InternalModel) -> RegulatorGains:
    """Gains that leave the plant in open loop (internal model still attached)."""
    n = internal.n_bar
    return RegulatorGains(k_varpi=np.zeros(n), k1=0.0, k_x=np.zeros(N),
                          nodes=np.linspace(0.0, 1.0, N), internal_model=internal,
                          b=np.zeros(n))


def perturb(params: PlantParams, factor: float) -> UncertaintyProfile:
    """Relative perturbation of every coefficient by ``factor``."""
    if params.rho * (1.0 + factor) <= 0:
        raise ValueError("perturbed rho must stay positive")
    return UncertaintyProfile(delta_rho=factor * params.rho, delta_a=factor * params.a,
                              delta_q0=factor * params.q0, delta_q1=factor * params.q1)


def _assemble(config: ClosedLoopConfig):
    gains = config.gains
    S = gains.internal_model.S_min
    b_y = gains.internal_model.b_y
    n = S.shape[0]
    if gains.k_varpi.size != n or b_y.size != n:
        raise ValueError("internal model and k_varpi dimensions disagree")
    coup = config.coupling
    if coup is None:
        q = config.disturbance.m if config.disturbance is not None else 1
        coup = DisturbanceCoupling.zero(q)
    sys = semidiscretize(config.params, config.uncertainty, coup, config.grid)
    N = sys.N
    if gains.k_x.size != N:
        raise ValueError(f"gain grid ({gains.k_x.size}) does not match plant grid ({N})")
    f = feedback_row(gains)
    A = np.zeros((N + n, N + n))
    A[:N, :N] = sys.A.toarray() + np.outer(sys.b_u, f)
    A[:N, N:] = -np.outer(sys.b_u, gains.k_varpi)
    A[N:, :N] = np.outer(b_y, sys.c_y)
    A[N:, N:] = S
    return A, sys


def closed_loop_matrix(config: ClosedLoopConfig) -> np.ndarray:
    return _assemble(config)[0]


def closed_loop_spectrum(config: ClosedLoopConfig) -> np.ndarray:
    """Eigenvalues of the autonomous closed loop, by descending real part."""
    ev = np.linalg.eigvals(closed_loop_matrix(config))
    return ev[np.lexsort((ev.imag, -ev.real))]


def _reference_values(ref: Reference, times: np.ndarray) -> np.ndarray:
    if ref is None:
        return np.zeros_like(times)
    if isinstance(ref, SawtoothReference):
        return ref(times)
    if isinstance(ref, ExoModel):
        if ref.m != 1:
            raise ValueError("reference exosystem must have a scalar output")
        E = sla.expm(ref.S * (times[1] - times[0])) if times.size > 1 else None
        w = ref.state_at(times[0])
        out = np.empty(times.size)
        for k in range(times.size):
            out[k] = (ref.P @ w)[0]
            w = E @ w
        return out
    raise TypeError(f"unsupported reference {type(ref).__name__}")


def _reference_at(ref: Reference, ts) -> np.ndarray:
    ts = np.asarray(ts, dtype=float)
    if isinstance(ref, ExoModel):
        return np.array([(ref.P @ ref.state_at(t))[0] for t in ts])
    return _reference_values(ref, ts)


def simulate_closed_loop(config: ClosedLoopConfig, with_spectrum: bool = False) -> ClosedLoopRun:
    """Crank-Nicolson integration of the closed loop from ``t = 0``.

    The disturbance and reference are evaluated at step midpoints (the
    disturbance through its exact exosystem propagator), so a sawtooth whose
    resets fall on grid times is integrated without splitting steps.  Damped
    restarts follow ``t = 0`` and every sawtooth reset.
    """
    A, sys = _assemble(config)
    N = sys.N
    n = A.shape[0] - N
    gains = config.gains
    b_y = gains.internal_model.b_y
    times = time_grid(0.0, config.t_end, config.dt)
    dt = config.dt
    mids = times[:-1] + 0.5 * dt
    ref = config.reference
    r_nodes = _reference_values(ref, times)
    r_mid = _reference_values(ref, mids)

    exo = config.disturbance
    q = sys.B_d.shape[1]
    if exo is not None:
        if exo.m != q:
            raise ValueError(f"disturbance dimension {exo.m} does not match coupling q={q}")
        E_full = sla.expm(exo.S * dt)
        E_half = sla.expm(exo.S * 0.5 * dt)
        w = exo.x0.astype(float).copy()

    def d_of(wk):
        return exo.P @ wk if exo is not None else np.zeros(q)

    def forcing(wk, rk):
        d = d_of(wk)
        return np.concatenate([sys.B_d @ d, b_y * (sys.d_y @ d - rk)])

    state = np.zeros(N + n)
    state[:N] = np.broadcast_to(np.asarray(config.x0, dtype=float), (N,))
    if config.varpi0 is not None:
        state[N:] = np.asarray(config.varpi0, dtype=float)

    restart = {0}
    if isinstance(ref, SawtoothReference):
        for tr in ref.resets(config.t_end):
            restart.add(int(round(tr / dt)))
    damped = set()
    for k in restart:
        damped.update(range(k, min(k + config.damping_steps, times.size - 1)))

    stepper = CrankNicolson(A, dt)
    f_row = feedback_row(gains)
    T = times.size
    X = np.empty((T, N))
    V = np.empty((T, n))
    Y = np.empty((T, 3))
    U = np.empty(T)
    W = np.empty((T, exo.n)) if exo is not None else None

    def record(k, s, wk):
        d = d_of(wk)
        X[k] = s[:N]
        V[k] = s[N:]
        Y[k, 0] = sys.c_y @ s[:N] + sys.d_y @ d
        Y[k, 1:] = sys.C_eta @ s[:N] + sys.D_eta @ d
        U[k] = f_row @ s[:N] - gains.k_varpi @ s[N:]
        if W is not None:
            W[k] = wk

    w0 = w if exo is not None else None
    record(0, state, w0)
    for k in range(T - 1):
        if k in damped:
            t = times[k]
            if exo is not None:
                w_a, w_b = E_half @ w, E_full @ w
            else:
                w_a = w_b = None
            r_a, r_b = _reference_at(ref, [t + 0.5 * dt, t + dt])
            state = stepper.be_half_step(state, forcing(w_a, r_a))
            state = stepper.be_half_step(state, forcing(w_b, r_b))
        else:
            w_m = E_half @ w if exo is not None else None
            state = stepper.cn_step(state, forcing(w_m, r_mid[k]))
        if exo is not None:
            w = E_full @ w
        record(k + 1, state, w if exo is not None else None)

    e_y = Y[:, 0] - r_nodes
    t0 = (1.0 - config.tail_fraction) * config.t_end
    tail = times >= t0 - 1e-12
    pre = []
    if isinstance(ref, SawtoothReference):
        for tr in ref.resets(config.t_end):
            k = int(round(tr / dt)) - 1
            # the sample just before the reset uses the left limit of r
            e_left = Y[k, 0] - ref(times[k])
            pre.append((float(tr), float(abs(e_left))))
    spectrum = None
    if with_spectrum:
        ev = np.linalg.eigvals(A)
        spectrum = ev[np.lexsort((ev.imag, -ev.real))]
    metrics = RegulationMetrics(e_y=e_y, tail_sup=float(np.max(np.abs(e_y[tail]))),
                                tail_window=(float(t0), float(config.t_end)),
                                pre_reset_errors=pre, closed_loop_spectrum=spectrum)
    traj = Trajectory(times=times, states=X, outputs=Y, exo_states=W, inputs=U, dt=dt)
    return ClosedLoopRun(trajectory=traj, varpi=V, r=r_nodes, metrics=metrics)


def write_closed_loop_csv(path, run: ClosedLoopRun) -> None:
    """Columns ``t,y,r,e_y,u``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "y", "r", "e_y", "u"])
        tr = run.trajectory
        for k in range(tr.times.size):
            w.writerow([f"{v:.17g}" for v in (tr.times[k], tr.outputs[k, 0], run.r[k],
                                               run.metrics.e_y[k], tr.inputs[k])])


def write_metrics_json(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
