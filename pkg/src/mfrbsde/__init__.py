"""Mean-field reflected BSDEs driven by marked point processes, solved exactly on scenario trees."""

__version__ = "0.1.0"

from .errors import BudgetError, ConfigError, ConvergenceError, GridTooCoarseError, MfRbsdeError, RegimeError
from .measures import DiscreteLaw, EmpiricalMeasure, MeasureFlow, wasserstein
from .models import ContractionParams, DriverSpec, ModelConfig, ObstacleSpec, TerminalSpec, contraction_params, validate_assumptions
from .mpp_sim import ClockA, IntensityKernel, MarkSpace, ScenarioTree, build_tree, simulate_mpp
from .rbsde_core import SolutionTriple, snell_bruteforce, solve_bsde_tree, solve_rbsde_tree
from .meanfield import MfSolution, solve_mf_rbsde, solve_with_stitching
from .particles import ParticleSolution, coupled_error, sample_iid_copies, solve_particle_system_exact
from .convergence import ChaosReport, backward_gronwall, chaos_bound_check, lln_study, rate_fit
