"""Normed-deformable convolution with a small numpy training harness for
density-map crowd counting."""

__version__ = "0.1.0"

from .deform import GridGeometry, bilinear_sample, deform_conv2d, deform_conv2d_backward
from .ndloss import NdLossBreakdown, UniformityReport, nd_loss, nd_loss_backward, nd_loss_corner_variant, uniformity_report
from .ops import conv2d, conv2d_backward, mse_density_loss, relu

__all__ = [
    "GridGeometry", "bilinear_sample", "deform_conv2d", "deform_conv2d_backward",
    "NdLossBreakdown", "UniformityReport", "nd_loss", "nd_loss_backward", "nd_loss_corner_variant",
    "uniformity_report", "conv2d", "conv2d_backward", "mse_density_loss", "relu",
]
