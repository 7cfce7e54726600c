"""Stage-wise 2D Gaussian splatting for images: render, measure, predict,
refine, quantize and store."""

__version__ = "0.1.0"
