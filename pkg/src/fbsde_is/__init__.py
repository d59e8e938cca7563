"""Free energies of stopped diffusions by least-squares Monte Carlo FBSDE
solves, and adaptive importance sampling with the fitted feedback control."""

from .basis import BasisSet, CoefficientSchedule, adaptive_centres
from .control import ControlPolicy, ISReport, importance_sample, make_policy
from .lsmc import LsmcConfig, LsmcSolution, backward_solve, drift_changed_driver, free_energy_driver
from .model import ProblemSpec, exit_probability_from_value, make_double_well
from .pde import PdeGrid, reference_value, solve_exit_probability
from .sde import TimeGrid, TrajectoryBatch, simulate_controlled, simulate_forward

__version__ = "0.1.0"
