"""Design the regulator from identified parameters and close the loop.

Continues from the identification tutorial: the backstepping kernel maps the
plant to a stable target system, the decoupling equations attach an internal
model of the sinusoid and the ramp, and pole placement fixes the slow
closed-loop poles.  The loop then runs on the *true* plant, nominal and with
every coefficient 70% larger.

Run:  python3 tutorials/02_design_and_regulate.py
"""

import numpy as np

from koopman_backstepping.closed_loop import (ClosedLoopConfig, SawtoothReference, closed_loop_spectrum,
                                              perturb, simulate_closed_loop)
from koopman_backstepping.pde_sim import DisturbanceCoupling, ExoModel, PlantParams
from koopman_backstepping.regulator import design_regulator

truth = PlantParams(rho=1.5, a=8.0, q0=2.5, q1=-2.0, z0=0.5)
coupling = DisturbanceCoupling(g1=[3.0], g2=[1.0], g3=[1.0], g4=[0.0], G5=[[0.0], [0.0]])

# estimates about 1% off the truth; 01_identify_from_data.py gets closer
rho_hat, a_hat, q0_hat, q1_hat, omega_hat = 1.510, 8.020, 2.491, -1.992, np.pi

poles = [-4.5 + 1j * np.pi, -4.5 - 1j * np.pi, -4.0, -5.0]
design = design_regulator(rho_hat, a_hat, q0_hat, q1_hat, truth.z0,
                          disturbance=[1j * omega_hat, -1j * omega_hat], reference=[0.0, 0.0],
                          mu_c=5.0, poles=poles, N_k=201, N=401)
g = design.gains
print(f"k1 = {g.k1:.4f}, k_varpi = {np.round(g.k_varpi, 4)}")
print("placed internal-model poles:", np.round(g.poles_achieved, 6))

ev = closed_loop_spectrum(ClosedLoopConfig(truth, g))
print("slowest closed-loop eigenvalues:", np.round(ev[:4], 3))

saw = SawtoothReference(slope=0.4, period=5.0)
for factor in (0.0, 0.7):
    unc = perturb(truth, factor)
    track = simulate_closed_loop(ClosedLoopConfig(truth, g, unc, coupling, reference=saw))
    reject = simulate_closed_loop(ClosedLoopConfig(truth, g, unc, coupling,
                                                   disturbance=ExoModel.sinusoid(np.pi)))
    t = reject.trajectory.times
    print(f"perturbation {factor:+.0%}: error before 3rd reset "
          f"{track.metrics.pre_reset_errors[2][1]:.1e}, "
          f"max |y| for t >= 10 under d = sin(pi t): {np.max(np.abs(reject.trajectory.y[t >= 10])):.1e}")
