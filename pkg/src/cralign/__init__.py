"""Affine multi-modal registration by instance-specific optimization.

The moving image is aligned to the fixed image by gradient descent on a
Parzen-window correlation ratio (or mutual information) over a coarse to
fine image pyramid, with exact analytic gradients.
"""

__version__ = "0.1.0"

from .affine import (AffineParams, build_matrix, compose, invert, params_from_matrix, params_to_world_matrix, warp,
                     warp_matrix)
from .errors import (ConstantTargetError, InvalidArgumentError, NiftiError, NoAdmissiblePatchesError,
                     NoOverlapError, RegistrationError, SingularMatrixError)
from .optimizer import OptimizerConfig, RegistrationResult, ScaleSchedule, multiscale_iso, single_scale_optimize
from .similarity import (ParzenConfig, PatchConfig, correlation_ratio, cr_loss_patch, cr_loss_symmetric,
                         discrete_cr_oracle, loss_and_gradient, mutual_information)
from .synth import (PhantomSpec, TransformRanges, dice, displacement_error, make_moving_pet, make_phantom_pair,
                    random_affine)
from .volume import NormalizationPolicy, Volume, gaussian_downsample, normalize_intensity

__all__ = [
    "AffineParams", "build_matrix", "compose", "invert", "params_from_matrix", "params_to_world_matrix", "warp",
    "warp_matrix",
    "ConstantTargetError", "InvalidArgumentError", "NiftiError", "NoAdmissiblePatchesError", "NoOverlapError",
    "RegistrationError", "SingularMatrixError",
    "OptimizerConfig", "RegistrationResult", "ScaleSchedule", "multiscale_iso", "single_scale_optimize",
    "ParzenConfig", "PatchConfig", "correlation_ratio", "cr_loss_patch", "cr_loss_symmetric",
    "discrete_cr_oracle", "loss_and_gradient", "mutual_information",
    "PhantomSpec", "TransformRanges", "dice", "displacement_error", "make_moving_pet", "make_phantom_pair",
    "random_affine",
    "NormalizationPolicy", "Volume", "gaussian_downsample", "normalize_intensity",
]
