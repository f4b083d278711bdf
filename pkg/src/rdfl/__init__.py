"""Recursive decision-focused learning.

A predictor ``F_theta(x, v)`` and a regularised linear program ``G`` are
closed into a loop ``x -> G(F_theta(x, v))``. The loop is trained either by
unrolling it ``K`` times or by differentiating its fixed point.
"""

from .errors import (DimensionMismatch, Infeasible, InfeasibleSpec, MaxIterations,
                     NotConverged, ParseError, RdflError, ShapeMismatch, SingularKKT,
                     SingularMatrix, TrainingAborted, UnstableEquilibrium, WorldModelDiverges)
from .numerics import finite_difference_jacobian, lu_solve, spectral_radius_estimate
from .optlayer import (ConvexProgram, PrimalDualSolution, build_matching_program,
                       build_newsvendor_program, kkt_sensitivity, solve)
from .predictor import (MlpParams, PredictorGradients, adam_step, init_mlp,
                        predictor_forward, predictor_input_jacobian, predictor_param_vjp)
from .recursive import (AffineLayer, DecisionLayer, fixed_point_solve,
                        gradient_equivalence_report, implicit_gradient,
                        neumann_truncated_inverse, unroll_forward, unroll_gradient)

__version__ = "0.1.0"
