"""Simulation and Malliavin sensitivity engine for mean-field SDEs driven by pure-jump noise."""

__version__ = "0.1.0"

from .coefficient_model import (CoefficientSet, MeasureFunctional, StableBottom, builtin_affine,
                                builtin_linear_meanfield, default_taper, first_moment, lm1, scalar_of_moment,
                                validate_coefficients)
from .errors import *  # noqa: F401,F403
from .jump_driver import EventFeed, LevyModel, assumption_a_limit, integrate_nu, sample_jumps, substream
from .malliavin_engine import (estimate_density_ibp, estimate_gradient_x, gamma_inverse_moment_scaling,
                               simulate_weights, weight_Z1, weight_Z2, weight_Zmu1)
from .measure_kit import EmpiricalMeasure, dirac, empirical_from_samples, moment, wasserstein2_1d
from .mv_simulator import (LawFlow, PathBundle, check_flow_property, picard_law_iteration, run_paths,
                           simulate_decoupled, simulate_particle_system, uniform_grid)
from .pde_lab import (PdeQuery, apply_generator_L, evaluate_U, grad_mu_U, grad_x_U, pde_residual,
                      verify_chain_rule)
from .runner_cli import list_experiments, run_experiment
from .tangent_flows import build_bank, run_linear_jump_sde, simulate_dmu_flow, simulate_dx_flow
