from .projection import ALPHA_MAX, ALPHA_MIN, DILATION, Projection, project_gaussians
from .raster import (MapGradients, PoseGradients, Projected2DGaussian, RenderOutput, ResidualGrad,
                     alpha_at, backward, bin_projection, project_gaussian, rasterize,
                     rasterize_with_gradients)

__all__ = [
    "ALPHA_MAX", "ALPHA_MIN", "DILATION", "Projection", "project_gaussians", "MapGradients",
    "PoseGradients", "Projected2DGaussian", "RenderOutput", "ResidualGrad", "alpha_at",
    "backward", "bin_projection", "project_gaussian", "rasterize", "rasterize_with_gradients",
]
