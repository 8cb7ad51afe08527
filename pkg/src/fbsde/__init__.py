"""Fractional Brownian motion, fractional stochastic calculus primitives,
and a numerical solver + verification harness for anticipative backward
stochastic differential equations driven by fBm with Hurst index H > 1/2."""

from .fbm import PathBatch, TimeGrid, covariance, covariance_matrix, decimate, sample_paths
from .frac_calc import (KernelTable, build_kernel_table, divergence_integral_deterministic,
                        hat_transform, heat_smooth, inner_product, phi)
from .model import (CoefficientSet, DelaySpec, DriverSpec, FuncSpec, ModelSpec,
                    TerminalData, ValidationReport, constant, eta_marginal, eta_paths,
                    linear, load_model, parse_model, save_model, serialize_model, validate)
from .solver import (AprioriReport, ContractionTrace, SolutionField, SolverParams,
                     SpaceGrid, apriori_report, default_space_grid, picard_solve,
                     solve_frozen, terminal_field, weighted_norms)
from .verify import (MomentReport, OrderingReport, PathProcess, ResidualReport,
                     bsde_residual, compare, integral_moment_suite, ito_residual,
                     product_rule_residual)

__version__ = "0.1.0"
