"""Expression-aware 3D Gaussian head avatars at desk scale."""
from .control import ControlConfig, SplitReport
from .core import (
    ExpressionParams,
    GaussianSet,
    PoseParams,
    RigidTransform,
    WorldGaussians,
    assemble_avatar,
    deform_geometry,
    predict_colors,
    to_world,
    validate_neutral_set,
)
from .fields import LinearBlendField, RBFField, ResidualFieldBank

__version__ = "0.1.0"

__all__ = [
    "ControlConfig",
    "ExpressionParams",
    "GaussianSet",
    "LinearBlendField",
    "PoseParams",
    "RBFField",
    "ResidualFieldBank",
    "RigidTransform",
    "SplitReport",
    "WorldGaussians",
    "assemble_avatar",
    "deform_geometry",
    "predict_colors",
    "to_world",
    "validate_neutral_set",
]
