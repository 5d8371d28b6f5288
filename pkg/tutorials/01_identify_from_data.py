"""Identify an unstable heat-equation plant from three output traces.

The plant is rho x_zz + a x on (0, 1) with Robin ends, controlled at z = 1
and measured at z0 = 0.5 and at both boundaries.  A sinusoidal disturbance
acts throughout.  We kick the plant with a short input pulse, record the
outputs, and recover (rho, a, q0, q1) and the disturbance frequency from a
Hankel-DMD spectrum.

Run:  python3 tutorials/01_identify_from_data.py
"""

import numpy as np

from koopman_backstepping.dmd import scan_ts_n, svd_dmd
from koopman_backstepping.ident import identify
from koopman_backstepping.pde_sim import (DisturbanceCoupling, ExoModel, Grid, PlantParams,
                                          collect_output_data, rectangular_pulse, semidiscretize,
                                          simulate, sl_eigenvalues)

truth = PlantParams(rho=1.5, a=8.0, q0=2.5, q1=-2.0, z0=0.5)
coupling = DisturbanceCoupling(g1=[3.0], g2=[1.0], g3=[1.0], g4=[0.0], G5=[[0.0], [0.0]])

print("true eigenvalues:", np.round(sl_eigenvalues(truth, 4), 4))

# 1. one fine-grid experiment: u = 10 on [-0.1, 0), then u = 0; d = sin(pi t)
system = semidiscretize(truth, coup=coupling, grid=Grid(201))
run = simulate(system, ExoModel.sinusoid(np.pi), rectangular_pulse(10.0, -0.1, 0.0), 0.0,
               t_end=4.0, dt=1e-3, t_start=-0.1, breakpoints=(0.0,))

# 2. the residual landscape over sampling period and Hankel depth
scan = scan_ts_n(run, np.round(np.arange(0.05, 0.2001, 0.002), 12), range(4, 11), max_frequency=np.pi)
ts_best, n_best, r_best = scan.best
print(f"scan minimum: ts={ts_best:g}, n={n_best}, residual {r_best:.2e}")

# 3. DMD at the working point used for design
ts, n = 0.104, 6
spectrum = svd_dmd(collect_output_data(run, ts, 2 * n), n, ts)
print("DMD eigenvalues:", np.round(spectrum.eigenvalues, 4))

# 4. inverse Sturm-Liouville problem from the two dominant plant modes
result = identify(spectrum, truth.z0)
p = result.plant
for name, est, ref in (("rho", p.rho_hat, truth.rho), ("a", p.a_hat, truth.a),
                       ("q0", p.q0_hat, truth.q0), ("q1", p.q1_hat, truth.q1)):
    print(f"{name:>3}: {est:10.5f}  (true {ref:g})")
print("disturbance frequency:", result.omega_hat)
