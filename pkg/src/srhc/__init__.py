"""Stochastic receding-horizon control with saturated output feedback."""
from .controller import (BatchStats, SimulationConfig, TrajectoryRecord, conditional_drift,
                         mean_square_slope, run_batch, run_receding_horizon)
from .estimator import (CovarianceBounds, ErrorLift, FilterState, RiccatiSolution,
                        build_error_lift, covariance_bounds, measurement_update,
                        riccati_limit, time_update)
from .exceptions import SRHCError
from .lambdas import (LambdaSet, SaturationFunction, assemble_lambda_phi_x, estimate_lambdas,
                      lambda_cache_get_or_compute, sample_innovation_batch)
from .optimizer import (ConvexProgram, ProgramBuilder, SoftConstraintSpec,
                        compute_alpha_beta_star, solve, bisect_soft_levels)
from .pipeline import (ControlProblem, StochasticRecedingHorizonController, load_problem,
                       problem_from_dict)
from .policy import Policy, apply_policy
from .stability import (StabilityParams, candidate_policy, compute_umax_star, compute_zeta,
                        drift_constraint_data, stability_params)
from .sysmodel import (CostWeights, HorizonConfig, JordanSplit, LiftedSystem, SystemModel,
                       build_lifted, compute_kappa, reachability_matrix, validate_model,
                       validate_split)

__version__ = "0.1.0"
