"""LiDAR-conditioned street scene synthesis core.

Subpackages cover the full non-neural pipeline: scene I/O, LiDAR
colorization/aggregation, condition-image rasterization, dynamic Gaussian
splatting with analytic gradients, the distillation trainer, and the
diffusion sampling math over pluggable denoiser/codec interfaces.
"""

__version__ = "0.1.0"

from . import errors  # noqa: F401
