"""Differentiable rendering of the masked, deformed Gaussian cloud.

Forward: active primitives (visible, plus invisible ones near the plane that
keep a gradient path alive) are projected, depth-sorted, binned into 16x16
tiles and alpha-blended front to back per pixel. Blending for a pixel stops
once transmittance drops below 1e-4, and densities vanish beyond the
squared-Mahalanobis cutoff of 24; a naive reference renderer mirrors both
constants so the two paths agree to floating-point noise.

Backward: exact reverse-mode gradients of the blend, recomputed per pixel in
reverse order from the stored final transmittance and per-pixel contribution
lists, then chained through the screen-space Gaussian, the EWA projection and
the covariance parameterization back to every stored parameter. Mask-value
gradients are routed through the straight-through estimator when the forward
pass used the learnable visibility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .aam import Deformation
from .core import (Camera, ClipPlane, GaussianCloud, ProjectedGaussians,
                   build_covariance, covariance_backward, project_gaussians,
                   project_gaussians_backward, sigmoid, sigmoid_derivative)
from .truncation import VisibilityResult, visibility_ste_backward

DEFAULT_BACKGROUND = np.zeros(3)


@dataclass
class RenderOutput:
    image: np.ndarray                # (H,W,3) in [0,1] for background in [0,1]
    final_transmittance: np.ndarray  # (H,W)
    contrib_count: np.ndarray        # (H,W) int32, primitives blended per pixel
    saved_state: Optional["FrameState"]


@dataclass
class CloudGradients:
    d_positions: np.ndarray       # (N,3)
    d_rotations: np.ndarray       # (N,4)
    d_log_scales: np.ndarray      # (N,3)
    d_color_logits: np.ndarray    # (N,3)
    d_opacity_logits: np.ndarray  # (N,)
    d_trunc_values: np.ndarray    # (N,)
    d_mask: np.ndarray            # (N,) dL/dM, pre straight-through chain
    d_dmu: Optional[np.ndarray]    # (V,3) upstream for the deformation heads
    d_drot: Optional[np.ndarray]   # (V,4)
    d_dscale: Optional[np.ndarray]  # (V,3)


@dataclass
class FrameState:
    """Everything render_backward needs; single-use."""

    camera: Camera
    background: np.ndarray
    n_cloud: int
    cloud_idx_rank: np.ndarray   # (K,) cloud index per rank
    visible_idx: np.ndarray      # (V,) cloud indices the deformation covered
    proj_rank: ProjectedGaussians
    covs_rank: np.ndarray        # (K,3,3) world covariances
    q_eff_rank: np.ndarray       # (K,4) rendered quaternion parameters
    s_eff_rank: np.ndarray       # (K,3) rendered log-scales
    inv_cov_rank: np.ndarray     # (K,3) inverse floored cov2d (xx, xy, yy)
    alpha_rank: np.ndarray
    mvis_rank: np.ndarray
    colors_rank: np.ndarray
    op_logit_rank: np.ndarray
    col_logit_rank: np.ndarray
    csr_offsets: np.ndarray
    csr_prim: np.ndarray
    csr_g: np.ndarray
    csr_n: np.ndarray
    t_final: np.ndarray
    visibility: object
    has_deformation: bool
    consumed: bool = field(default=False)


def depth_sort(depth: np.ndarray) -> np.ndarray:
    """Stable ascending order by depth; equal depths keep index order."""
    return np.argsort(np.asarray(depth), kind="stable")


def _mask_arrays(visibility, n):
    if isinstance(visibility, VisibilityResult):
        return visibility.mask_binary, visibility.in_band
    mask = np.asarray(visibility)
    if mask.shape != (n,):
        raise ValueError(f"visibility mask has shape {mask.shape}, expected ({n},)")
    return mask.astype(np.float64), np.zeros(n, dtype=bool)


def _inverse_2x2(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    inv = np.empty((cov2d.shape[0], 3))
    inv[:, 0] = c / det
    inv[:, 1] = -b / det
    inv[:, 2] = a / det
    return inv


def _prepare(cloud: GaussianCloud, camera: Camera, visibility,
             deformation: Optional[Deformation]):
    n = cloud.count
    mvals, in_band = _mask_arrays(visibility, n)
    # Fractional mask values are legal inputs (the blend is smooth in M and
    # gradient checks relax it continuously); binary visibility is the special
    # case mvals in {0,1}, where the in-band invisible primitives are carried
    # with zero contribution purely for their dL/dM path.
    active_idx = np.flatnonzero((mvals > 0.0) | in_band)
    visible_idx = np.flatnonzero(mvals == 1.0)

    mu = cloud.positions[active_idx].copy()
    q = cloud.rotations[active_idx].copy()
    s = cloud.log_scales[active_idx].copy()
    if deformation is not None:
        if deformation.d_mu.shape[0] != visible_idx.shape[0]:
            raise ValueError("deformation rows must match the visible subset")
        vis_in_active = np.searchsorted(active_idx, visible_idx)
        mu[vis_in_active] += deformation.d_mu
        q[vis_in_active] += deformation.d_rot
        s[vis_in_active] += deformation.d_scale

    if active_idx.size == 0:
        return None, active_idx, visible_idx

    covs = build_covariance(q, s)
    proj = project_gaussians(mu, covs, camera)
    live = np.flatnonzero(proj.valid)
    order = live[depth_sort(proj.depth[live])]

    proj_rank = ProjectedGaussians(
        mean2d=np.ascontiguousarray(proj.mean2d[order]),
        cov2d=np.ascontiguousarray(proj.cov2d[order]),
        depth=proj.depth[order],
        valid=np.ones(order.size, dtype=bool),
        bbox=np.ascontiguousarray(proj.bbox[order]),
        cam_points=np.ascontiguousarray(proj.cam_points[order]))
    prep = {
        "proj_rank": proj_rank,
        "covs_rank": np.ascontiguousarray(covs[order]),
        "q_eff_rank": np.ascontiguousarray(q[order]),
        "s_eff_rank": np.ascontiguousarray(s[order]),
        "inv_cov_rank": _inverse_2x2(proj_rank.cov2d),
        "alpha_rank": sigmoid(cloud.opacity_logits[active_idx][order]),
        "mvis_rank": np.ascontiguousarray(mvals[active_idx][order]),
        "colors_rank": sigmoid(cloud.color_logits[active_idx][order]),
        "op_logit_rank": np.ascontiguousarray(cloud.opacity_logits[active_idx][order]),
        "col_logit_rank": np.ascontiguousarray(cloud.color_logits[active_idx][order]),
        "cloud_idx_rank": active_idx[order],
    }
    return prep, active_idx, visible_idx


def _background_array(background):
    bg = DEFAULT_BACKGROUND if background is None else np.asarray(background, dtype=np.float64)
    if bg.shape != (3,):
        raise ValueError("background must be an RGB 3-vector")
    return np.ascontiguousarray(bg)


def render(cloud: GaussianCloud, camera: Camera, plane: ClipPlane,
           visibility, deformation: Optional[Deformation] = None,
           background=None, with_state: bool = True) -> RenderOutput:
    """Tiled forward rendering; set with_state for a later backward pass."""
    if not isinstance(camera, Camera):
        raise ValueError("camera must be a Camera")
    if isinstance(visibility, VisibilityResult) and plane is not None:
        if visibility.plane_offset != float(plane.offset):
            raise ValueError("visibility was computed for a different plane offset")
    bg = _background_array(background)
    h, w = camera.height, camera.width
    prep, active_idx, visible_idx = _prepare(cloud, camera, visibility, deformation)

    image = np.empty((h, w, 3))
    t_final = np.ones((h, w))
    contrib = np.zeros((h, w), dtype=np.int32)
    if prep is None or prep["cloud_idx_rank"].size == 0:
        image[:] = bg
        state = None
        if with_state:
            state = _empty_state(cloud, camera, bg, visible_idx, visibility,
                                 deformation is not None)
        return RenderOutput(image, t_final, contrib, state)

    bbox = prep["proj_rank"].bbox
    n_tiles_x = (w + _kernels.TILE - 1) // _kernels.TILE
    n_tiles_y = (h + _kernels.TILE - 1) // _kernels.TILE
    tile_counts = np.zeros(n_tiles_x * n_tiles_y, dtype=np.int64)
    _kernels.count_tile_entries(bbox, n_tiles_x, n_tiles_y, tile_counts)
    tile_offsets = np.zeros(tile_counts.size + 1, dtype=np.int64)
    np.cumsum(tile_counts, out=tile_offsets[1:])
    tile_prims = np.empty(int(tile_offsets[-1]), dtype=np.int32)
    _kernels.fill_tile_entries(bbox, n_tiles_x, tile_offsets,
                               np.zeros(tile_counts.size, dtype=np.int64), tile_prims)

    # Per-pixel record capacity from bounding-box coverage (a superset of what
    # the cutoff ellipse can touch), via a 2D difference array.
    acc = np.zeros((h + 1, w + 1), dtype=np.int64)
    np.add.at(acc, (bbox[:, 2], bbox[:, 0]), 1)
    np.add.at(acc, (bbox[:, 2], bbox[:, 1] + 1), -1)
    np.add.at(acc, (bbox[:, 3] + 1, bbox[:, 0]), -1)
    np.add.at(acc, (bbox[:, 3] + 1, bbox[:, 1] + 1), 1)
    coverage = acc.cumsum(axis=0).cumsum(axis=1)[:h, :w]
    csr_offsets = np.zeros(h * w + 1, dtype=np.int64)
    np.cumsum(coverage.ravel(), out=csr_offsets[1:])
    n_slots = int(csr_offsets[-1])
    csr_prim = np.empty(n_slots, dtype=np.int32)
    csr_g = np.empty(n_slots)
    csr_n = np.zeros(h * w, dtype=np.int32)

    _kernels.forward_kernel(h, w, n_tiles_x, n_tiles_y, tile_offsets, tile_prims,
                            prep["proj_rank"].mean2d, prep["inv_cov_rank"],
                            prep["alpha_rank"], prep["mvis_rank"],
                            prep["colors_rank"], bbox, bg,
                            csr_offsets, csr_prim, csr_g, csr_n,
                            image, t_final, contrib)

    state = None
    if with_state:
        state = FrameState(
            camera=camera, background=bg, n_cloud=cloud.count,
            cloud_idx_rank=prep["cloud_idx_rank"], visible_idx=visible_idx,
            proj_rank=prep["proj_rank"], covs_rank=prep["covs_rank"],
            q_eff_rank=prep["q_eff_rank"], s_eff_rank=prep["s_eff_rank"],
            inv_cov_rank=prep["inv_cov_rank"], alpha_rank=prep["alpha_rank"],
            mvis_rank=prep["mvis_rank"], colors_rank=prep["colors_rank"],
            op_logit_rank=prep["op_logit_rank"], col_logit_rank=prep["col_logit_rank"],
            csr_offsets=csr_offsets, csr_prim=csr_prim, csr_g=csr_g,
            csr_n=csr_n, t_final=t_final, visibility=visibility,
            has_deformation=deformation is not None)
    return RenderOutput(image, t_final, contrib, state)


def _empty_state(cloud, camera, bg, visible_idx, visibility, has_deformation):
    k0 = np.zeros(0, dtype=np.int64)
    return FrameState(
        camera=camera, background=bg, n_cloud=cloud.count,
        cloud_idx_rank=np.zeros(0, dtype=np.int64), visible_idx=visible_idx,
        proj_rank=None, covs_rank=None, q_eff_rank=None, s_eff_rank=None,
        inv_cov_rank=None, alpha_rank=None, mvis_rank=None, colors_rank=None,
        op_logit_rank=None, col_logit_rank=None,
        csr_offsets=k0, csr_prim=k0, csr_g=k0, csr_n=k0,
        t_final=np.ones((camera.height, camera.width)), visibility=visibility,
        has_deformation=has_deformation)


def reference_render(cloud: GaussianCloud, camera: Camera, plane: ClipPlane,
                     visibility, deformation: Optional[Deformation] = None,
                     background=None) -> np.ndarray:
    """Naive per-pixel blend over every live primitive; the oracle for render."""
    bg = _background_array(background)
    h, w = camera.height, camera.width
    prep, _, _ = _prepare(cloud, camera, visibility, deformation)
    image = np.empty((h, w, 3))
    if prep is None or prep["cloud_idx_rank"].size == 0:
        image[:] = bg
        return image
    _kernels.reference_kernel(h, w, prep["proj_rank"].mean2d, prep["inv_cov_rank"],
                              prep["alpha_rank"], prep["mvis_rank"],
                              prep["colors_rank"], bg, image)
    return image


def render_backward(state: FrameState, d_image: np.ndarray) -> CloudGradients:
    """Exact gradients of the forward blend w.r.t. every cloud parameter."""
    if state is None:
        raise ValueError("render was called without with_state")
    if state.consumed:
        raise ValueError("saved state already consumed by a previous backward call")
    state.consumed = True
    h, w = state.camera.height, state.camera.width
    d_image = np.ascontiguousarray(d_image, dtype=np.float64)
    if d_image.shape != (h, w, 3):
        raise ValueError(f"d_image has shape {d_image.shape}, expected {(h, w, 3)}")

    n = state.n_cloud
    grads = CloudGradients(
        d_positions=np.zeros((n, 3)), d_rotations=np.zeros((n, 4)),
        d_log_scales=np.zeros((n, 3)), d_color_logits=np.zeros((n, 3)),
        d_opacity_logits=np.zeros(n), d_trunc_values=np.zeros(n),
        d_mask=np.zeros(n),
        d_dmu=None, d_drot=None, d_dscale=None)
    if state.has_deformation:
        v = state.visible_idx.size
        grads.d_dmu = np.zeros((v, 3))
        grads.d_drot = np.zeros((v, 4))
        grads.d_dscale = np.zeros((v, 3))

    k = state.cloud_idx_rank.size
    if k == 0:
        return grads

    n_slots = state.csr_prim.size
    dl_da = np.zeros(n_slots)
    wgt = np.zeros(n_slots)
    _kernels.backward_pixel_kernel(h, w, d_image, state.background,
                                   state.t_final, state.csr_offsets,
                                   state.csr_prim, state.csr_g, state.csr_n,
                                   state.alpha_rank, state.mvis_rank,
                                   state.colors_rank, dl_da, wgt)

    total = int(state.csr_n.sum())
    starts = np.zeros(k + 1, dtype=np.int64)
    t_pix = np.empty(total, dtype=np.int32)
    t_g = np.empty(total)
    t_dlda = np.empty(total)
    t_wgt = np.empty(total)
    _kernels.transpose_records(state.csr_offsets, state.csr_n, state.csr_prim,
                               state.csr_g, dl_da, wgt, k, starts,
                               t_pix, t_g, t_dlda, t_wgt)

    d_mean2d = np.zeros((k, 2))
    d_cov2d_flat = np.zeros((k, 3))
    d_alpha_raw = np.zeros(k)
    d_mask_rank = np.zeros(k)
    d_color_act = np.zeros((k, 3))
    _kernels.backward_prim_kernel(w, starts, t_pix, t_g, t_dlda, t_wgt,
                                  d_image, state.proj_rank.mean2d,
                                  state.inv_cov_rank, state.alpha_rank,
                                  state.mvis_rank, d_mean2d, d_cov2d_flat,
                                  d_alpha_raw, d_mask_rank, d_color_act)

    # Activation chains, then projection and covariance chains on rank arrays.
    d_op_logit = d_alpha_raw * sigmoid_derivative(state.op_logit_rank)
    d_col_logit = d_color_act * sigmoid_derivative(state.col_logit_rank)
    d_cov2d = np.empty((k, 2, 2))
    d_cov2d[:, 0, 0] = d_cov2d_flat[:, 0]
    d_cov2d[:, 0, 1] = 0.5 * d_cov2d_flat[:, 1]
    d_cov2d[:, 1, 0] = 0.5 * d_cov2d_flat[:, 1]
    d_cov2d[:, 1, 1] = d_cov2d_flat[:, 2]
    d_mu_rank, d_cov3d = project_gaussians_backward(
        state.proj_rank, state.covs_rank, state.camera, d_mean2d, d_cov2d)
    d_q_rank, d_s_rank = covariance_backward(state.q_eff_rank, state.s_eff_rank, d_cov3d)

    idx = state.cloud_idx_rank
    grads.d_positions[idx] = d_mu_rank
    grads.d_rotations[idx] = d_q_rank
    grads.d_log_scales[idx] = d_s_rank
    grads.d_color_logits[idx] = d_col_logit
    grads.d_opacity_logits[idx] = d_op_logit
    grads.d_mask[idx] = d_mask_rank

    if isinstance(state.visibility, VisibilityResult):
        grads.d_trunc_values = visibility_ste_backward(state.visibility, grads.d_mask)

    if state.has_deformation:
        grads.d_dmu[:] = grads.d_positions[state.visible_idx]
        grads.d_drot[:] = grads.d_rotations[state.visible_idx]
        grads.d_dscale[:] = grads.d_log_scales[state.visible_idx]
    return grads
