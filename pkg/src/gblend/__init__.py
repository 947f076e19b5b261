"""Animatable head avatars as 3D Gaussian blendshapes.

A head is a neutral set of 3D Gaussians plus per-expression delta sets,
blended linearly in raw parameter space, posed with linear blend skinning,
and rendered by a differentiable tile-based splatting rasterizer.  The
package covers the full loop: data types (`model`), blending and posing
(`blendpose`), forward/backward rendering (`rasterizer`), the training
objective (`losses`), quality and stability metrics (`metrics`), Adam
optimization (`trainer`), file formats and synthetic data (`assets`), and
the `gblend` command line (`cli`).
"""

from .blendpose import (
    PosedGaussianSet,
    blend_expression,
    lbs,
    merge,
    pose_model,
    pose_mouth,
)
from .errors import (
    AssetError,
    BadMagicError,
    CountMismatchError,
    GBlendError,
    TruncatedFileError,
    ValidationError,
    VersionError,
)
from .losses import (
    CylinderVolume,
    LossWeights,
    TotalLoss,
    alpha_loss,
    cylinder_sdf,
    dssim,
    fit_mouth_cylinder,
    l1,
    reg_loss,
    rgb_loss,
    total_loss,
)
from .metrics import (
    VideoSequence,
    inject_jitter,
    isi,
    itf,
    psnr,
    quality_report,
    ssim,
    stability_report,
)
from .model import (
    ActivatedGaussianSet,
    BlendshapeModel,
    Camera,
    ExpressionCoeffs,
    GaussianSet,
    PoseParams,
    covariance3d,
)
from .rasterizer import (
    GradientSet,
    RenderOutput,
    project,
    rasterize,
    rasterize_backward,
    rasterize_reference,
    render,
)
from .trainer import (
    InitSpec,
    TrainConfig,
    TrainState,
    adam_step,
    evaluate,
    initialize_model,
    train,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "ActivatedGaussianSet",
    "AssetError",
    "BadMagicError",
    "BlendshapeModel",
    "Camera",
    "CountMismatchError",
    "CylinderVolume",
    "ExpressionCoeffs",
    "GBlendError",
    "GaussianSet",
    "GradientSet",
    "InitSpec",
    "LossWeights",
    "PoseParams",
    "PosedGaussianSet",
    "RenderOutput",
    "TotalLoss",
    "TrainConfig",
    "TrainState",
    "TruncatedFileError",
    "ValidationError",
    "VersionError",
    "VideoSequence",
    "adam_step",
    "alpha_loss",
    "blend_expression",
    "covariance3d",
    "cylinder_sdf",
    "dssim",
    "evaluate",
    "fit_mouth_cylinder",
    "initialize_model",
    "inject_jitter",
    "isi",
    "itf",
    "l1",
    "lbs",
    "merge",
    "pose_model",
    "pose_mouth",
    "project",
    "psnr",
    "quality_report",
    "rasterize",
    "rasterize_backward",
    "rasterize_reference",
    "reg_loss",
    "render",
    "rgb_loss",
    "ssim",
    "stability_report",
    "total_loss",
    "train",
    "train_step",
    "__version__",
]
