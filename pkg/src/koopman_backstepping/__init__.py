"""Data-driven robust output regulation for a boundary-controlled parabolic PDE.

Hankel-DMD of boundary/in-domain output data, inverse Sturm-Liouville
identification, backstepping regulator design and closed-loop verification.
"""

from .pde_sim import (
    DisturbanceCoupling,
    ExoModel,
    Grid,
    PlantParams,
    Trajectory,
    UncertaintyProfile,
    collect_output_data,
    exo_trajectory,
    sawtooth_reference,
    semidiscretize,
    simulate,
    sl_eigenvalues,
)

__version__ = "0.1.0"
