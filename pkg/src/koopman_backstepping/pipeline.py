"""End-to-end pipeline: data generation, identification, design, closed loop.

Each stage reads only artifacts written by earlier stages into the output
directory, so any stage can be rerun on its own:

=============  ==========================================  ==============================
stage          reads                                       writes
=============  ==========================================  ==============================
simulate       config                                      trajectory.csv, truth_spectrum.csv
collect        trajectory.csv                              data.csv
scan           trajectory.csv                              scan.csv
dmd            data.csv                                    spectrum.csv
identify       spectrum.csv                                identification.csv, identified.json
design         identified.json                             gains.json, k_x.csv
closedloop     gains.json, k_x.csv                         tracking.csv, rejection.csv,
                                                           tracking_perturbed.csv,
                                                           rejection_perturbed.csv, metrics.json
figures        truth_spectrum.csv, spectrum.csv,           eigenvalues.svg, tracking.svg,
               tracking.csv, rejection.csv                 rejection.svg
=============  ==========================================  ==============================
"""

from __future__ import annotations

import copy
import csv
import json
from importlib import resources
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from . import closed_loop as cl
from .dmd import read_spectrum_csv, scan_ts_n, svd_dmd, write_scan_csv, write_spectrum_csv
from .ident import IdentConfig, identify, write_identification_csv
from .pde_sim import (DisturbanceCoupling, ExoModel, Grid, PlantParams, collect_output_data,
                      read_output_data_csv, read_trajectory_csv, rectangular_pulse,
                      semidiscretize, simulate, sl_eigenvalues, write_output_data_csv,
                      write_trajectory_csv)
from .regulator import design_regulator, read_gains, write_gains

__all__ = [
    "ConfigError",
    "StageError",
    "STAGES",
    "CONFIG_SCHEMA",
    "load_config",
    "bundled_config_path",
    "run_stage",
    "run_pipeline",
    "emit_figures",
    "summary_table",
]

STAGES = ("simulate", "collect", "scan", "dmd", "identify", "design", "closedloop", "figures")


class ConfigError(ValueError):
    """Invalid or unreadable configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_vec = {"type": "array", "items": _num, "minItems": 1}
_complex = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["plant", "coupling", "excitation", "simulation", "sampling", "scan",
                 "identification", "design", "closed_loop"],
    "properties": {
        "plant": {
            "type": "object", "additionalProperties": False,
            "required": ["rho", "a", "q0", "q1", "z0"],
            "properties": {"rho": _pos, "a": _num, "q0": _num, "q1": _num,
                           "z0": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}},
        },
        "coupling": {
            "type": "object", "additionalProperties": False,
            "required": ["g1", "g2", "g3", "g4", "G5"],
            "properties": {"g1": _vec, "g2": _vec, "g3": _vec, "g4": _vec,
                           "G5": {"type": "array", "items": _vec, "minItems": 2, "maxItems": 2}},
        },
        "excitation": {
            "type": "object", "additionalProperties": False,
            "required": ["impulse_amplitude", "impulse_duration", "disturbance"],
            "properties": {
                "impulse_amplitude": _num,
                "impulse_duration": _pos,
                "disturbance": {"$ref": "#/$defs/signal"},
            },
        },
        "simulation": {
            "type": "object", "additionalProperties": False,
            "required": ["N", "dt", "t_end"],
            "properties": {"N": {"type": "integer", "minimum": 51}, "dt": _pos, "t_end": _pos},
        },
        "sampling": {
            "type": "object", "additionalProperties": False, "required": ["ts", "n"],
            "properties": {"ts": _pos, "n": {"type": "integer", "minimum": 2}},
        },
        "scan": {
            "type": "object", "additionalProperties": False, "required": ["ts", "n"],
            "properties": {
                "ts": {"oneOf": [
                    {"type": "array", "items": _pos, "minItems": 1},
                    {"type": "object", "additionalProperties": False,
                     "required": ["start", "stop", "step"],
                     "properties": {"start": _pos, "stop": _pos, "step": _pos}},
                ]},
                "n": {"type": "array", "items": {"type": "integer", "minimum": 2}, "minItems": 1},
            },
        },
        "identification": {
            "type": "object", "additionalProperties": False,
            "required": ["tol_re", "nd_override", "q_tol", "mu_window", "mu_step", "validation_tol"],
            "properties": {
                "tol_re": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "nd_override": {"type": ["integer", "null"], "minimum": 0},
                "q_tol": _pos,
                "mu_window": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
                "mu_step": _pos,
                "validation_tol": _pos,
            },
        },
        "design": {
            "type": "object", "additionalProperties": False,
            "required": ["mu_c", "poles", "reference", "N_decoupling"],
            "properties": {
                "mu_c": _pos,
                "poles": {"type": "array", "items": _complex, "minItems": 1},
                "reference": {"$ref": "#/$defs/signal"},
                "N_decoupling": {"type": "integer", "minimum": 51},
            },
        },
        "closed_loop": {
            "type": "object", "additionalProperties": False,
            "required": ["t_end", "dt", "perturbation_factor", "tail_fraction"],
            "properties": {
                "t_end": _pos, "dt": _pos,
                "perturbation_factor": {"type": "number", "exclusiveMinimum": -1},
                "tail_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
    },
    "$defs": {
        "signal": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["type"],
                 "properties": {"type": {"const": "none"}}},
                {"type": "object", "additionalProperties": False,
                 "required": ["type", "omega", "amplitude", "phase"],
                 "properties": {"type": {"const": "sinusoid"}, "omega": _pos,
                                "amplitude": _num, "phase": _num}},
                {"type": "object", "additionalProperties": False, "required": ["type", "value"],
                 "properties": {"type": {"const": "constant"}, "value": _num}},
                {"type": "object", "additionalProperties": False,
                 "required": ["type", "slope", "period"],
                 "properties": {"type": {"const": "sawtooth"}, "slope": _num, "period": _pos}},
            ]
        }
    },
}


def bundled_config_path(name: str = "paper_example") -> Path:
    return Path(str(resources.files("koopman_backstepping") / "configs" / f"{name}.json"))


def load_config(path) -> dict:
    """Read and validate a JSON configuration.

    ``path`` may name a bundled configuration (``"paper_example"``).  All
    checks run before anything is written, so a rejected configuration leaves
    no artifacts behind.
    """
    p = Path(path)
    if not p.exists() and not p.suffix:
        candidate = bundled_config_path(str(path))
        if candidate.exists():
            p = candidate
    try:
        with open(p) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(x) for x in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    _check_consistency(cfg)
    return cfg


def _check_consistency(cfg: dict) -> None:
    q = len(cfg["coupling"]["g2"])
    for key in ("g1", "g3", "g4"):
        if len(cfg["coupling"][key]) != q:
            raise ConfigError(f"coupling/{key}: expected {q} entries")
    if any(len(row) != q for row in cfg["coupling"]["G5"]):
        raise ConfigError(f"coupling/G5: rows must have {q} entries")
    if cfg["excitation"]["disturbance"]["type"] == "sawtooth":
        raise ConfigError("excitation/disturbance: a sawtooth is not an exosystem signal")
    N = cfg["simulation"]["N"]
    z0 = cfg["plant"]["z0"]
    try:
        Grid(N).index_of(z0)
        Grid(cfg["design"]["N_decoupling"]).index_of(z0)
    except ValueError as exc:
        raise ConfigError(f"plant/z0: {exc}") from exc
    sim = cfg["simulation"]
    for name, t0, t1, dt in (("simulation", -cfg["excitation"]["impulse_duration"], sim["t_end"], sim["dt"]),
                             ("closed_loop", 0.0, cfg["closed_loop"]["t_end"], cfg["closed_loop"]["dt"])):
        steps = (t1 - t0) / dt
        if abs(steps - round(steps)) > 1e-6:
            raise ConfigError(f"{name}: time span is not a multiple of dt")
    if abs(cfg["excitation"]["impulse_duration"] / sim["dt"]
           - round(cfg["excitation"]["impulse_duration"] / sim["dt"])) > 1e-6:
        raise ConfigError("excitation/impulse_duration must be a multiple of simulation/dt")
    ts, n = cfg["sampling"]["ts"], cfg["sampling"]["n"]
    if abs(ts / sim["dt"] - round(ts / sim["dt"])) > 1e-6:
        raise ConfigError("sampling/ts must be a multiple of simulation/dt")
    if (2 * n - 1) * ts > sim["t_end"] + 1e-12:
        raise ConfigError("sampling: 2n samples do not fit into simulation/t_end")
    ts_list = _scan_ts(cfg)
    if max(ts_list) * (2 * max(cfg["scan"]["n"]) - 1) > sim["t_end"] + 1e-12:
        raise ConfigError("scan: the largest (ts, n) pair does not fit into simulation/t_end")
    for t in ts_list:
        if abs(t / sim["dt"] - round(t / sim["dt"])) > 1e-6:
            raise ConfigError(f"scan/ts: {t} is not a multiple of simulation/dt")
    lo, hi = cfg["identification"]["mu_window"]
    if not lo < hi:
        raise ConfigError("identification/mu_window must be increasing")
    if cfg["closed_loop"]["perturbation_factor"] * 1.0 <= -1.0:
        raise ConfigError("closed_loop/perturbation_factor must exceed -1")


def _scan_ts(cfg: dict) -> list:
    spec = cfg["scan"]["ts"]
    if isinstance(spec, list):
        return [float(t) for t in spec]
    count = int(round((spec["stop"] - spec["start"]) / spec["step"])) + 1
    # round to the simulation step so every candidate subsamples exactly
    dt = cfg["simulation"]["dt"]
    return [round((spec["start"] + k * spec["step"]) / dt) * dt for k in range(count)]


def _exo(sig: dict) -> Optional[ExoModel]:
    kind = sig["type"]
    if kind == "none":
        return None
    if kind == "sinusoid":
        return ExoModel.sinusoid(sig["omega"], sig["amplitude"], sig["phase"])
    if kind == "constant":
        return ExoModel.constant(sig["value"])
    raise ConfigError(f"signal type '{kind}' has no exosystem")


def _reference(sig: dict):
    """Reference signal for simulation and its model eigenvalues for the design."""
    kind = sig["type"]
    if kind == "sawtooth":
        return cl.SawtoothReference(sig["slope"], sig["period"]), [0.0, 0.0]
    if kind == "sinusoid":
        return ExoModel.sinusoid(sig["omega"], sig["amplitude"], sig["phase"]), \
            [1j * sig["omega"], -1j * sig["omega"]]
    if kind == "constant":
        return ExoModel.constant(sig["value"]), [0.0]
    return None, []


def _params(cfg) -> PlantParams:
    p = cfg["plant"]
    return PlantParams(p["rho"], p["a"], p["q0"], p["q1"], p["z0"])


def _coupling(cfg) -> DisturbanceCoupling:
    c = cfg["coupling"]
    return DisturbanceCoupling(g1=c["g1"], g2=c["g2"], g3=c["g3"], g4=c["g4"], G5=c["G5"])


def _need(out: Path, name: str) -> Path:
    p = out / name
    if not p.exists():
        raise FileNotFoundError(f"missing artifact {p} (run the earlier stages first)")
    return p


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- stages ------------------------------------------------------------------

def stage_simulate(cfg: dict, out: Path) -> dict:
    sim, exc = cfg["simulation"], cfg["excitation"]
    params = _params(cfg)
    system = semidiscretize(params, coup=_coupling(cfg), grid=Grid(sim["N"]))
    t_on = -exc["impulse_duration"]
    traj = simulate(system, _exo(exc["disturbance"]), rectangular_pulse(exc["impulse_amplitude"], t_on, 0.0),
                    0.0, sim["t_end"], sim["dt"], t_start=t_on, breakpoints=(0.0,))
    write_trajectory_csv(out / "trajectory.csv", traj)
    truth = list(sl_eigenvalues(params, 4))
    dist = _exo(exc["disturbance"])
    if dist is not None:
        truth += list(np.linalg.eigvals(dist.S))
    with open(out / "truth_spectrum.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["re_lambda", "im_lambda"])
        for lam in truth:
            lam = complex(lam)
            w.writerow([f"{lam.real:.17g}", f"{lam.imag:.17g}"])
    return {"samples": int(traj.times.size)}


def _trajectory_from_t0(out: Path):
    traj = read_trajectory_csv(_need(out, "trajectory.csv"))
    return traj


def stage_collect(cfg: dict, out: Path) -> dict:
    traj = _trajectory_from_t0(out)
    ts, n = cfg["sampling"]["ts"], cfg["sampling"]["n"]
    data = collect_output_data(traj, ts, 2 * n, t0=0.0)
    write_output_data_csv(out / "data.csv", data)
    return {"ts": ts, "n": n}


def stage_scan(cfg: dict, out: Path) -> dict:
    traj = _trajectory_from_t0(out)
    dist = cfg["excitation"]["disturbance"]
    wmax = dist.get("omega") if dist["type"] == "sinusoid" else None
    scan = scan_ts_n(traj, _scan_ts(cfg), cfg["scan"]["n"], t0=0.0, max_frequency=wmax)
    write_scan_csv(out / "scan.csv", scan)
    ts, n, r = scan.best
    return {"argmin_ts": ts, "argmin_n": n, "argmin_residual": r}


def stage_dmd(cfg: dict, out: Path) -> dict:
    data = read_output_data_csv(_need(out, "data.csv"))
    ts, n = cfg["sampling"]["ts"], cfg["sampling"]["n"]
    spec = svd_dmd(data, n, ts)
    write_spectrum_csv(out / "spectrum.csv", spec)
    return {"residual_fro": spec.residual_fro, "rank": spec.rank}


def stage_identify(cfg: dict, out: Path) -> dict:
    spec = read_spectrum_csv(_need(out, "spectrum.csv"), cfg["sampling"]["ts"])
    ic = cfg["identification"]
    res = identify(spec, cfg["plant"]["z0"],
                   IdentConfig(tol_re=ic["tol_re"], nd_override=ic["nd_override"], q_tol=ic["q_tol"],
                               mu_window=tuple(ic["mu_window"]), mu_step=ic["mu_step"],
                               validation_tol=ic["validation_tol"]))
    write_identification_csv(out / "identification.csv", res)
    p = res.plant
    doc = {"rho_hat": p.rho_hat, "a_hat": p.a_hat, "q0_hat": p.q0_hat, "q1_hat": p.q1_hat,
           "mu": list(p.mu), "omega_hat": res.omega_hat.tolist(),
           "disturbance_eigenvalues": [[float(v.real), float(v.imag)] for v in res.disturbance.eigenvalues]}
    _write_json(out / "identified.json", doc)
    return doc


def stage_design(cfg: dict, out: Path) -> dict:
    with open(_need(out, "identified.json")) as fh:
        ident = json.load(fh)
    d = cfg["design"]
    _, ref_eigs = _reference(d["reference"])
    dist = [complex(re, im) for re, im in ident["disturbance_eigenvalues"]]
    # the internal model uses the identified frequencies on the imaginary axis
    dist = [1j * v.imag for v in dist]
    poles = [complex(re, im) for re, im in d["poles"]]
    design = design_regulator(ident["rho_hat"], ident["a_hat"], ident["q0_hat"], ident["q1_hat"],
                              cfg["plant"]["z0"], dist, ref_eigs, d["mu_c"], poles,
                              N_k=cfg["simulation"]["N"], N=d["N_decoupling"])
    write_gains(out / "gains.json", out / "k_x.csv", design.gains)
    return {"k1": design.gains.k1, "k_varpi": design.gains.k_varpi.tolist()}


def stage_closedloop(cfg: dict, out: Path) -> dict:
    gains = read_gains(_need(out, "gains.json"), _need(out, "k_x.csv"))
    params = _params(cfg)
    c = cfg["closed_loop"]
    ref, _ = _reference(cfg["design"]["reference"])
    dist = _exo(cfg["excitation"]["disturbance"])
    base = dict(params=params, gains=gains, coupling=_coupling(cfg), t_end=c["t_end"], dt=c["dt"],
                tail_fraction=c["tail_fraction"])
    unc = cl.perturb(params, c["perturbation_factor"])
    scenarios = {
        "tracking": cl.ClosedLoopConfig(reference=ref, **base),
        "rejection": cl.ClosedLoopConfig(disturbance=dist, **base),
        "tracking_perturbed": cl.ClosedLoopConfig(reference=ref, uncertainty=unc, **base),
        "rejection_perturbed": cl.ClosedLoopConfig(disturbance=dist, uncertainty=unc, **base),
    }
    metrics = {}
    for name, conf in scenarios.items():
        run = cl.simulate_closed_loop(conf)
        cl.write_closed_loop_csv(out / f"{name}.csv", run)
        m = run.metrics.to_dict()
        t = run.trajectory.times
        for t_from in (10.0, 20.0):
            mask = t >= t_from
            if mask.any():
                m[f"sup_abs_e_y_from_{t_from:g}"] = float(np.max(np.abs(run.e_y[mask])))
        metrics[name] = m
    spec_nom = cl.closed_loop_spectrum(scenarios["tracking"])
    spec_pert = cl.closed_loop_spectrum(scenarios["tracking_perturbed"])
    metrics["closed_loop_spectrum"] = [[float(v.real), float(v.imag)] for v in spec_nom[:12]]
    metrics["closed_loop_spectrum_perturbed"] = [[float(v.real), float(v.imag)] for v in spec_pert[:12]]
    metrics["max_real_part"] = float(spec_nom.real.max())
    metrics["max_real_part_perturbed"] = float(spec_pert.real.max())
    cl.write_metrics_json(out / "metrics.json", metrics)
    return {"max_real_part": metrics["max_real_part"]}


def _read_columns(path: Path) -> dict:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {h: arr[:, i] for i, h in enumerate(header)}


def emit_figures(out) -> list:
    """Write ``eigenvalues.svg``, ``tracking.svg`` and ``rejection.svg``.

    The SVGs are deterministic: fixed size, a fixed hash salt for element ids
    and no creation date.  Data series carry stable group ids
    (``true-eigenvalues``, ``dmd-eigenvalues``, ``output-y``, ``reference-r``).
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    sources = {"eigenvalues.svg": ("truth_spectrum.csv", "spectrum.csv"),
               "tracking.svg": ("tracking.csv",), "rejection.svg": ("rejection.csv",)}
    for files in sources.values():
        for f in files:
            _need(out, f)
    written = []
    rc = {"svg.hashsalt": "koopman-backstepping", "svg.fonttype": "none", "figure.figsize": (6.4, 4.0),
          "figure.dpi": 100, "font.size": 9}
    with plt.rc_context(rc):
        truth = _read_columns(out / "truth_spectrum.csv")
        dmd = _read_columns(out / "spectrum.csv")
        fig, ax = plt.subplots()
        ax.plot(truth["re_lambda"], truth["im_lambda"], "x", color="k", label="true", gid="true-eigenvalues")
        ax.plot(dmd["re_lambda"], dmd["im_lambda"], "o", mfc="none", color="C0", label="DMD",
                gid="dmd-eigenvalues")
        ax.set_xlabel("Re")
        ax.set_ylabel("Im")
        ax.set_xscale("symlog", linthresh=10.0)
        ax.grid(True, lw=0.3)
        ax.legend()
        written.append(_save(fig, out / "eigenvalues.svg"))
        plt.close(fig)
        for name, title in (("tracking", "reference tracking"), ("rejection", "disturbance rejection")):
            d = _read_columns(out / f"{name}.csv")
            fig, ax = plt.subplots()
            ax.plot(d["t"], d["y"], lw=1.0, label="y", gid="output-y")
            ax.plot(d["t"], d["r"], lw=1.0, ls="--", label="r", gid="reference-r")
            ax.set_xlabel("t")
            ax.set_title(title)
            ax.grid(True, lw=0.3)
            ax.legend()
            written.append(_save(fig, out / f"{name}.svg"))
            plt.close(fig)
    return written


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    return path


def stage_figures(cfg: dict, out: Path) -> dict:
    return {"figures": [p.name for p in emit_figures(out)]}


_STAGE_FUNCS: dict[str, Callable[[dict, Path], dict]] = {
    "simulate": stage_simulate,
    "collect": stage_collect,
    "scan": stage_scan,
    "dmd": stage_dmd,
    "identify": stage_identify,
    "design": stage_design,
    "closedloop": stage_closedloop,
    "figures": stage_figures,
}


def run_stage(name: str, cfg: dict, out) -> dict:
    """Run one stage; any failure is re-raised as :class:`StageError`."""
    if name not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage '{name}' (choose from {', '.join(STAGES)})")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return _STAGE_FUNCS[name](cfg, out)
    except (ValueError, RuntimeError, ArithmeticError, np.linalg.LinAlgError, OSError) as exc:
        raise StageError(name, str(exc)) from exc


def run_pipeline(cfg: dict, out, stages=STAGES, log: Callable[[str], None] = lambda s: None) -> dict:
    results = {}
    for name in stages:
        log(f"[{name}]")
        results[name] = run_stage(name, cfg, out)
    return results


def summary_table(cfg: dict, out) -> str:
    """Identified versus true parameters, read from ``identified.json``."""
    with open(_need(Path(out), "identified.json")) as fh:
        ident = json.load(fh)
    p = cfg["plant"]
    rows = [("rho", p["rho"], ident["rho_hat"]), ("a", p["a"], ident["a_hat"]),
            ("q0", p["q0"], ident["q0_hat"]), ("q1", p["q1"], ident["q1_hat"])]
    dist = cfg["excitation"]["disturbance"]
    if dist["type"] == "sinusoid" and ident["omega_hat"]:
        rows.append(("omega_d", dist["omega"], ident["omega_hat"][0]))
    lines = [f"{'parameter':<10}{'true':>14}{'identified':>16}{'rel. error':>14}"]
    for name, true, est in rows:
        rel = abs(est - true) / max(abs(true), 1e-300)
        lines.append(f"{name:<10}{true:>14.6g}{est:>16.8g}{rel:>14.3e}")
    return "\n".join(lines)


def with_overrides(cfg: dict, **sections) -> dict:
    """Deep copy of ``cfg`` with top-level sections updated (for scripting)."""
    new = copy.deepcopy(cfg)
    for key, val in sections.items():
        if isinstance(val, dict) and isinstance(new.get(key), dict):
            new[key].update(val)
        else:
            new[key] = val
    return new
