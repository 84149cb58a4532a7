"""Optimal exterior insulation of a body in a power-law medium: solvers, optimizer and diagnostics."""

from .diagnostics import (blowup_slope, density_report, flux_balance_report, lipschitz_report,
                          nondegeneracy_report, q_trace)
from .fbsolvers import (ACParams, B_eps, BoundaryData, ObstacleSpec, minimize_E_eps, minimize_E_tau,
                        obstacle_complementarity, solve_obstacle)
from .functionals import (Nonlinearity, PenaltyParams, Profile, coercivity_probe, flux_functional,
                          penalized_objective, penalty)
from .grid import (Configuration, DiskBody, GridDomain, MaskBody, PolygonBody, build_grid, collar,
                   disk_configuration, free_boundary_samples, perimeter_estimate, volume_excess)
from .manifest import ManifestError, parse_manifest
from .medium import Medium, axiom_check, energy_density, eval_A
from .optimizer import (OptimizerConfig, PerturbationSpec, Problem, brute_force_minimizer, energy_differential,
                        lambda_sweep, minimize_penalized, perturb_inward, volume_differential)
from .radial import RadialProblem, oracle_table
from .solver import (PotentialField, SolverError, SolverSettings, energy, flux_profile, harmonic_replacement,
                     residual_measure, solve_potential)

__version__ = "0.1.0"
