"""Primitive parameterization, covariance construction, and screen-space projection.

All functions are pure array math over struct-of-arrays inputs. Quaternions are
stored unnormalized with the scalar part first; normalization happens inside the
rotation construction so the stored parameters stay unconstrained. Projection
uses the affine (EWA) approximation of the pinhole map, with an additive
low-pass floor on the 2D covariance so every on-screen footprint is invertible.

Gradients are derived by hand (no autodiff anywhere in this package); each
forward here has a matching *_backward that consumes upstream gradients in the
same parameterization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Additive diagonal floor on the projected 2D covariance, in pixel^2.
LOWPASS_FLOOR = 0.3
# Camera-space near plane in scene units; primitives behind it are culled.
NEAR_PLANE = 0.01
# Squared-Mahalanobis cutoff: density is treated as exactly zero where the
# Gaussian exponent -q/2 < -12, i.e. q > 24. Screen-space bounding boxes are
# sized from this same constant so culling never changes rendered output.
DENSITY_CUTOFF_Q = 24.0


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_derivative(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def inverse_sigmoid(y):
    y = np.asarray(y, dtype=np.float64)
    return np.log(y / (1.0 - y))


@dataclass
class GaussianCloud:
    """Struct-of-arrays parameter storage for a set of 3D Gaussian primitives.

    positions      (N,3) world-space means
    rotations      (N,4) unnormalized quaternions, scalar part first
    log_scales     (N,3) log of per-axis extent
    color_logits   (N,3) pre-sigmoid RGB
    opacity_logits (N,)  pre-sigmoid opacity
    trunc_values   (N,)  signed plane coordinate of the effective barycenter
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    color_logits: np.ndarray
    opacity_logits: np.ndarray
    trunc_values: np.ndarray

    def __post_init__(self):
        n = self.positions.shape[0]
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "log_scales": (n, 3),
            "color_logits": (n, 3),
            "opacity_logits": (n,),
            "trunc_values": (n,),
        }
        for name, shape in shapes.items():
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            setattr(self, name, arr)

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    def validate(self):
        """Check the storage invariants; raises ValueError on violation."""
        for name in ("positions", "rotations", "log_scales", "color_logits",
                     "opacity_logits", "trunc_values"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")
        if not np.all(np.linalg.norm(self.rotations, axis=1) > 0):
            raise ValueError("zero-norm quaternion")

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in _CLOUD_FIELDS))

    def select(self, index) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[index].copy() for f in _CLOUD_FIELDS))

    @staticmethod
    def concatenate(a: "GaussianCloud", b: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(a, f), getattr(b, f)])
                               for f in _CLOUD_FIELDS))


_CLOUD_FIELDS = ("positions", "rotations", "log_scales", "color_logits",
                 "opacity_logits", "trunc_values")


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels plus a rigid world-to-camera transform.

    Camera space is x-right, y-down, z-forward; pixel (row i, col j) is sampled
    at continuous coordinates (x=j, y=i).
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3,3) world-to-camera rotation
    translation: np.ndarray  # (3,)  world-to-camera translation

    def __post_init__(self):
        self.rotation = np.ascontiguousarray(self.rotation, dtype=np.float64)
        self.translation = np.ascontiguousarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("bad extrinsics shape")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class ClipPlane:
    """Half-space boundary: points with p.normal < offset are on the visible side."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        self.normal = np.ascontiguousarray(self.normal, dtype=np.float64)
        if self.normal.shape != (3,):
            raise ValueError("plane normal must be a 3-vector")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")


@dataclass
class ProjectedGaussians:
    """Screen-space footprints for a batch of primitives.

    cov2d already includes the low-pass floor; `valid` is true only for
    primitives in front of the near plane whose cutoff ellipse overlaps the
    image, and everything downstream must ignore invalid rows. `bbox` holds
    inclusive integer pixel bounds (x0, x1, y0, y1) of the cutoff ellipse.
    """

    mean2d: np.ndarray   # (N,2)
    cov2d: np.ndarray    # (N,2,2)
    depth: np.ndarray    # (N,)
    valid: np.ndarray    # (N,) bool
    bbox: np.ndarray     # (N,4) int32
    cam_points: np.ndarray = field(repr=False, default=None)  # (N,3), saved for backward


def quat_to_rotation(q):
    """Rotation matrix of the normalized quaternion(s) q (scalar part first).

    Accepts a single 4-vector or an (N,4) batch; scale-invariant in q.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    if qb.shape[-1] != 4:
        raise ValueError("quaternions must have 4 components")
    if not np.all(np.isfinite(qb)):
        raise ValueError("non-finite quaternion")
    norm = np.linalg.norm(qb, axis=1)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion")
    w, x, y, z = (qb / norm[:, None]).T
    R = np.empty((qb.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_to_rotation_backward(q, d_rot):
    """Gradient of quat_to_rotation w.r.t. the *unnormalized* quaternion.

    d_rot holds dL/dR with independent entries; the normalization Jacobian
    (I - u u^T)/|q| is folded in so callers can update stored parameters
    directly.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    dR = d_rot.reshape(qb.shape[0], 3, 3)
    norm = np.linalg.norm(qb, axis=1)
    u = qb / norm[:, None]
    w, x, y, z = u.T
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = 2 * mat([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = 2 * mat([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = 2 * mat([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])
    d_unit = np.stack([np.einsum("nij,nij->n", dR, d) for d in (dRdw, dRdx, dRdy, dRdz)],
                      axis=-1)
    # Through the normalization u = q/|q|:  du/dq = (I - u u^T)/|q|
    dq = (d_unit - u * np.einsum("ni,ni->n", d_unit, u)[:, None]) / norm[:, None]
    return dq[0] if single else dq


def build_covariance(q, log_scales):
    """World-space covariance R diag(exp(s))^2 R^T for each primitive."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(log_scales, dtype=np.float64)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(s))):
        raise ValueError("non-finite covariance parameters")
    single = q.ndim == 1
    R = np.atleast_3d(quat_to_rotation(q)).reshape(-1, 3, 3)
    d = np.exp(np.atleast_2d(s))
    A = R * d[:, None, :]          # R @ diag(d)
    cov = A @ np.swapaxes(A, 1, 2)
    return cov[0] if single else cov


def covariance_backward(q, log_scales, d_cov):
    """Gradients of build_covariance w.r.t. (q, log_scales).

    d_cov holds dL/dSigma with independent entries (pass a symmetric matrix
    when the loss only depends on the symmetric part).
    """
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(log_scales, dtype=np.float64)
    single = q.ndim == 1
    qb = np.atleast_2d(q)
    sb = np.atleast_2d(s)
    G = d_cov.reshape(qb.shape[0], 3, 3)
    R = np.atleast_3d(quat_to_rotation(qb)).reshape(-1, 3, 3)
    d = np.exp(sb)
    A = R * d[:, None, :]
    # Sigma = A A^T  =>  dL/dA = (G + G^T) A
    dA = (G + np.swapaxes(G, 1, 2)) @ A
    dR = dA * d[:, None, :]
    ds = np.einsum("nij,nij->nj", dA, R) * d
    dq = quat_to_rotation_backward(qb, dR)
    if single:
        return dq[0], ds[0]
    return dq, ds


def project_gaussians(means, covs, camera: Camera, near: float = NEAR_PLANE) -> ProjectedGaussians:
    """EWA projection of world-space Gaussians to screen space.

    mean2d is the pinhole image of the mean; cov2d = (J W) Sigma (J W)^T plus
    the low-pass floor, with J the Jacobian of the perspective map at the mean
    and W the camera rotation. Rows with depth <= near or with an off-screen
    cutoff ellipse come back valid=False (their remaining fields are unusable).
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    n = means.shape[0]
    W = camera.rotation
    p = means @ W.T + camera.translation
    depth = p[:, 2].copy()
    in_front = depth > near
    zs = np.where(in_front, depth, 1.0)  # placeholder depth for culled rows

    inv_z = 1.0 / zs
    mean2d = np.empty((n, 2))
    mean2d[:, 0] = camera.fx * p[:, 0] * inv_z + camera.cx
    mean2d[:, 1] = camera.fy * p[:, 1] * inv_z + camera.cy

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * p[:, 0] * inv_z * inv_z
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * p[:, 1] * inv_z * inv_z
    M = J @ W
    cov2d = M @ covs @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += LOWPASS_FLOOR
    cov2d[:, 1, 1] += LOWPASS_FLOOR

    # Inclusive pixel bounds of the q <= DENSITY_CUTOFF_Q ellipse. The ellipse
    # bounding box has half extents sqrt(q_max * diag(cov2d)).
    rx = np.sqrt(DENSITY_CUTOFF_Q * np.maximum(cov2d[:, 0, 0], 0.0))
    ry = np.sqrt(DENSITY_CUTOFF_Q * np.maximum(cov2d[:, 1, 1], 0.0))
    bbox = np.empty((n, 4), dtype=np.int32)
    bbox[:, 0] = np.maximum(np.ceil(mean2d[:, 0] - rx), 0).astype(np.int32)
    bbox[:, 1] = np.minimum(np.floor(mean2d[:, 0] + rx), camera.width - 1).astype(np.int32)
    bbox[:, 2] = np.maximum(np.ceil(mean2d[:, 1] - ry), 0).astype(np.int32)
    bbox[:, 3] = np.minimum(np.floor(mean2d[:, 1] + ry), camera.height - 1).astype(np.int32)
    on_screen = (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])
    valid = in_front & on_screen
    return ProjectedGaussians(mean2d, cov2d, depth, valid, bbox, cam_points=p)


def project_gaussians_backward(proj: ProjectedGaussians, covs, camera: Camera,
                               d_mean2d, d_cov2d):
    """Gradients of project_gaussians w.r.t. world means and 3D covariances.

    d_cov2d must hold dL/dcov2d with independent entries (symmetric upstream:
    put half of each mixed-partial on each off-diagonal). The dependence of the
    Jacobian J on the camera-space mean is included, so means receive gradient
    through both the pinhole map and the covariance push-forward. Invalid rows
    yield zeros.
    """
    covs = np.asarray(covs, dtype=np.float64).reshape(-1, 3, 3)
    p = proj.cam_points
    n = p.shape[0]
    W = camera.rotation
    live = proj.valid
    zs = np.where(proj.depth > 0, proj.depth, 1.0)
    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * p[:, 0] * inv_z2
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * p[:, 1] * inv_z2
    M = J @ W

    G = np.where(live[:, None, None], d_cov2d.reshape(n, 2, 2), 0.0)
    du = np.where(live[:, None], d_mean2d.reshape(n, 2), 0.0)

    d_cov3d = np.swapaxes(M, 1, 2) @ G @ M
    dM = (G + np.swapaxes(G, 1, 2)) @ M @ covs
    dJ = dM @ W.T

    # Pinhole-mean path plus the J(p) dependence of the covariance push-forward.
    dp = np.einsum("nij,ni->nj", J, du)
    dp[:, 0] += dJ[:, 0, 2] * (-camera.fx * inv_z2)
    dp[:, 1] += dJ[:, 1, 2] * (-camera.fy * inv_z2)
    dp[:, 2] += (dJ[:, 0, 0] * (-camera.fx * inv_z2)
                 + dJ[:, 1, 1] * (-camera.fy * inv_z2)
                 + dJ[:, 0, 2] * (2.0 * camera.fx * p[:, 0] * inv_z2 * inv_z)
                 + dJ[:, 1, 2] * (2.0 * camera.fy * p[:, 1] * inv_z2 * inv_z))
    d_means = dp @ W
    return d_means, d_cov3d


def eval_gaussian_2d(x, mean2d, cov2d) -> float:
    """Screen-space density exp(-q/2) at pixel x, zero beyond the cutoff."""
    dx = float(x[0]) - float(mean2d[0])
    dy = float(x[1]) - float(mean2d[1])
    a, b, c = float(cov2d[0][0]), float(cov2d[0][1]), float(cov2d[1][1])
    det = a * c - b * b
    q = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    if q > DENSITY_CUTOFF_Q:
        return 0.0
    return float(np.exp(-0.5 * q))
