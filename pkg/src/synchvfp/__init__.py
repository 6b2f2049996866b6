"""Synchrotron Vlasov-Fokker-Planck model: kernels, equilibria, solvers, diagnostics."""
from .model import (DiagRecord, GridSpec, ModelParams, PhaseGrid, Profile1D, SolverFault,
                    current_density, gaussian_grid, grid_mass, marginal_density, trapezoid_1d)
from .propagator import Propagator, eval_B, eval_G, eval_Sigma, make_propagator
from .wakefield import (ExactOrbitPotential, Kernel, analytic_even_kernel, force_field,
                        free_space_kernel, kfs_deriv, kfs_eval, potential_exact, retarded_angle,
                        tabulated_kernel)
from .haissinski import (UNIQUENESS_CONSTANT, HaissinskiSolution, StabilityConstants, apply_T,
                         solve_haissinski, stability_constants, steady_state_2d,
                         uniqueness_threshold)
from .dynamics import (Ensemble, GridSolverState, deposit_density, langevin_step, make_state,
                       run_grid, strang_step, vlasov_kick)
from .diagnostics import (EntropyReport, fit_decay_rate, free_energy, hydro_projection,
                          l2mu_distance)

__version__ = "0.1.0"
