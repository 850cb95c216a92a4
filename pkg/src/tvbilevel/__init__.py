"""Bilevel learning of spatially dependent total-variation parameters.

The lower level denoises ``f`` by minimizing
``1/2 |u - f|^2 + sum_i sum_j alpha^i_j |(K_i u)_j|``; the upper level fits
the nonnegative parameter fields ``alpha^i`` to training pairs with a
two-phase trust-region method driven by adjoint gradients.
"""
from .activesets import (ActiveSetPartition, MStationarityCertificate, check_m_stationarity, classify,
                         cone_membership, directional_derivative_fd, solve_sensitivity_system)
from .data import (Dataset, TrainingPair, add_gaussian_noise, load_image, load_manifest,
                   piecewise_smooth_image, save_image, synthetic_dataset, two_pixel_dataset)
from .denoise import (DenoiseProblem, DenoiseSolution, HuberParams, Residuals,
                      primal_dual_residual, solve_tv, solve_tv_huber)
from .exceptions import *  # noqa: F401,F403
from .gradient import (Evaluator, ReducedEvaluation, SolverOptions, bouligand_gradient,
                       huber_gradient, reduced_cost)
from .grid import (GradientOperator, Scheme, apply_K, apply_KT, make_gradient_operator,
                   operator_norm_estimate, stacked_norm)
from .kernels import BACKEND
from .metrics import psnr, ssim
from .multi import MultiTermSpec, build_multi_problem, multi_gradient
from .params import ParamField, aggregate, lift, make_patch_map
from .trust_region import TRConfig, dogleg_step, quality_ratio, run

__version__ = "0.1.0"
