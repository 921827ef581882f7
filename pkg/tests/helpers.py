"""Shared test utilities: scene builders and finite-difference safety checks.

Finite-difference oracles need a smooth neighborhood: the renderer has two
hard thresholds (the density cutoff at squared Mahalanobis 24 and the
transmittance stop at 1e-4), so scenes are rejected when any pixel sits close
enough to either threshold for a 1e-6 stencil to flip it.
"""

import numpy as np

from clipgs.core import (Camera, GaussianCloud, build_covariance,
                         inverse_sigmoid, project_gaussians)
from clipgs.rasterizer import render

FD_STEP = 1e-6


def make_camera(width=32, height=32, fx=35.0, fy=35.0):
    return Camera(width=width, height=height, fx=fx, fy=fy,
                  cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  rotation=np.eye(3), translation=np.zeros(3))


def random_cloud(rng, n, spread=0.8, depth=4.0, scale_range=(-2.5, -1.0),
                 opacity_range=(0.05, 0.6)):
    pos = rng.normal(scale=spread, size=(n, 3))
    pos[:, 2] = depth + rng.uniform(-1.0, 1.0, size=n)
    return GaussianCloud(
        positions=pos,
        rotations=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(*scale_range, size=(n, 3)),
        color_logits=rng.normal(size=(n, 3)),
        opacity_logits=inverse_sigmoid(rng.uniform(*opacity_range, size=n)),
        trunc_values=pos[:, 2].copy(),
    )


def scene_is_fd_safe(cloud, cam, plane, visibility, deformation=None):
    """Reject scenes where a hard threshold sits inside the FD stencil."""
    out = render(cloud, cam, plane, visibility, deformation=deformation,
                 with_state=False)
    if out.final_transmittance.min() < 3e-4:
        return False
    q_eff = cloud.rotations.copy()
    s_eff = cloud.log_scales.copy()
    mu_eff = cloud.positions.copy()
    if deformation is not None:
        mask = (visibility.mask_binary == 1.0 if hasattr(visibility, "mask_binary")
                else np.asarray(visibility))
        vis_idx = np.flatnonzero(mask)
        mu_eff[vis_idx] += deformation.d_mu
        q_eff[vis_idx] += deformation.d_rot
        s_eff[vis_idx] += deformation.d_scale
    covs = build_covariance(q_eff, s_eff)
    proj = project_gaussians(mu_eff, covs, cam)
    for i in np.flatnonzero(proj.valid):
        x0, x1, y0, y1 = proj.bbox[i]
        xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        d = np.stack([xs.ravel() - proj.mean2d[i, 0],
                      ys.ravel() - proj.mean2d[i, 1]], axis=1)
        inv = np.linalg.inv(proj.cov2d[i])
        q = np.einsum("ni,ij,nj->n", d, inv, d)
        # FD steps of 1e-6 move q by under 1e-4; keep a 100x margin clear of
        # the density cutoff so no pixel flips across it inside a stencil.
        if np.any((q > 23.99) & (q < 24.01)):
            return False
    return True
