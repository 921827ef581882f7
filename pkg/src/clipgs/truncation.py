"""Plane visibility of primitives: hard truncation and the learnable mask.

The hard scheme decides visibility directly from the mean's plane coordinate
and has no gradient path. The learnable scheme stores a per-primitive scalar
m (the plane coordinate of the effective barycenter) and decides visibility
from it: the forward value is exactly binary, while the backward pass routes
gradients through a sigmoid surrogate (straight-through estimator), so m can
move primitives across the plane during optimization.

Sign convention: the surrogate is sigmoid(offset - m), which increases as a
primitive moves deeper into the visible half-space and therefore agrees in
direction with the binary indicator it stands in for.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClipPlane, GaussianCloud, sigmoid

# Beyond |offset - m| = 8 the sigmoid slope is < 3.4e-4; gradients are cut to
# exactly zero there to bound the set of primitives the rasterizer must carry.
DEFAULT_BAND_WIDTH = 8.0
DEFAULT_EPSILON = 0.5


@dataclass
class VisibilityResult:
    """Forward visibility decision plus the state the backward pass needs.

    mask_binary is the exact {0,1} forward value; surrogate is the sigmoid the
    gradient flows through; in_band marks primitives close enough to the plane
    for that gradient to be nonzero.
    """

    mask_binary: np.ndarray  # (N,) float64 in {0.0, 1.0}
    surrogate: np.ndarray    # (N,) in (0,1)
    in_band: np.ndarray      # (N,) bool
    plane_offset: float
    trunc_values: np.ndarray  # (N,) m at forward time


def visibility_hard(cloud: GaussianCloud, plane: ClipPlane) -> np.ndarray:
    """Binary visibility from the mean position: visible iff mu.n < offset."""
    return (cloud.positions @ plane.normal) < plane.offset


def visibility_ste_forward(cloud: GaussianCloud, plane: ClipPlane,
                           epsilon: float = DEFAULT_EPSILON,
                           band_width: float = DEFAULT_BAND_WIDTH) -> VisibilityResult:
    """Learnable-truncation forward pass.

    The binary mask is 1 iff sigmoid(offset - m) > epsilon, which for
    epsilon = 0.5 is exactly m < offset (boundary primitives invisible).
    """
    if not (0.0 < epsilon < 1.0):
        raise ValueError("epsilon must lie in (0,1)")
    m = cloud.trunc_values
    surrogate = sigmoid(plane.offset - m)
    mask = (surrogate > epsilon).astype(np.float64)
    in_band = np.abs(plane.offset - m) <= band_width
    return VisibilityResult(mask, surrogate, in_band, float(plane.offset), m.copy())


def visibility_ste_backward(result: VisibilityResult, upstream: np.ndarray) -> np.ndarray:
    """Map dL/dmask to dL/dm through the sigmoid surrogate.

    dL/dm = -upstream * sigma'(offset - m) inside the band, exactly zero
    outside it.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != result.mask_binary.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match mask shape "
            f"{result.mask_binary.shape}")
    s = result.surrogate
    grad = -upstream * s * (1.0 - s)
    grad[~result.in_band] = 0.0
    return grad


def init_trunc_values(cloud: GaussianCloud, plane_normal: np.ndarray) -> None:
    """Set m = mu.n in place, so the learnable mask starts equal to the hard one."""
    normal = np.asarray(plane_normal, dtype=np.float64)
    cloud.trunc_values[:] = cloud.positions @ normal
