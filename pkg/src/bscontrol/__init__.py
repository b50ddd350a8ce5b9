"""Insensitizing-control synthesis for 1D bulk-surface reaction-diffusion
equations with dynamic boundary conditions.

Pipeline: SBP geometry -> Carleman weight system -> weighted space-time
least squares (null control of the linearized cascade) -> frozen-derivative
outer loop for the quasilinear cascade -> two-sided insensitivity
verification of the energy functional.
"""

from .errors import (BSControlError, ConditioningError, ConfigurationError,
                     ContractError, GeometryAssumptionError, ParameterError,
                     ResolutionError, SmallnessViolationError)
from .geometry import (BulkSurfaceField, RegionMasks, SpaceTimeField,
                       SpatialGrid, TimeGrid, build_grid, build_masks,
                       build_time_grid, l2_inner, l2_norm)
from .weights import (ChiBump, EtaProfile, WeightParams, WeightTables,
                      build_chi, build_eta, build_weight_tables,
                      carleman_functional_I, carleman_functional_Jw,
                      check_elementary_estimates, empirical_carleman_check,
                      m_threshold, validate_params)
from .solvers import (CoefficientSet, LinearOperatorSet, apply_L,
                      coefficient_preset, solve_adjoint_cascade,
                      solve_linear_backward, solve_linear_forward,
                      solve_linearized_cascade, solve_quasilinear,
                      solve_quasilinear_cascade, solve_sensitivity,
                      validate_coefficients)
from .fi import (FIProblem, FISolution, apply_residual_R, bilinear_B,
                 cascade_residual_check, galerkin_check, linear_F, solve_fi,
                 verify_p1, verify_p2)
from .insensitize import (FunctionalConfig, PerturbationSpec, SynthesisBundle,
                          SynthesisReport, apply_A_derivative,
                          duality_identity_check, evaluate_J,
                          insensitivity_check, nonlinear_parts_A, synthesize,
                          x_norm_sq_log, y_norm_sq_log)

__version__ = "0.1.0"
