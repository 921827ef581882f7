"""Clippable Gaussian splatting.

Train a cloud of 3D Gaussian primitives with per-primitive plane visibility
(learnable truncation through a straight-through estimator) and a small
plane-conditioned deformation MLP, against volume renders with a clipping
plane; then render and explore the result at arbitrary plane offsets.
"""

__version__ = "0.1.0"

from .core import Camera, ClipPlane, GaussianCloud

__all__ = ["Camera", "ClipPlane", "GaussianCloud", "__version__"]
