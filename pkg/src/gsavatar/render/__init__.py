"""Software Gaussian splatting."""
from .camera import AA_FLOOR, NEAR_PLANE, Camera, Frame, project, project_gaussian, project_vjp
from .losses import silhouette_loss
from .raster import (
    RasterGrads,
    RenderState,
    available_backends,
    composite_reference,
    default_backend,
    rasterize,
    rasterize_backward,
)

__all__ = [
    "AA_FLOOR",
    "Camera",
    "Frame",
    "NEAR_PLANE",
    "RasterGrads",
    "RenderState",
    "available_backends",
    "composite_reference",
    "default_backend",
    "project",
    "project_gaussian",
    "project_vjp",
    "rasterize",
    "rasterize_backward",
    "silhouette_loss",
]
