"""Synthetic ground truth: procedural volumes, a clip-aware emission-absorption
ray marcher, and dataset emission.

Each dataset frame is an image rendered from a camera on a fixed-radius view
sphere with a clipping plane at a random offset along +z; the manifest records
intrinsics, per-frame world-to-camera matrices (3x4 row-major), plane offsets
and the train/test split. Everything is deterministic in the seed, down to the
PNG bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import _kernels
from .core import Camera, ClipPlane

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
DEFAULT_STEPS = 192
PLANE_NORMAL = np.array([0.0, 0.0, 1.0])

PRESETS = ("nested-shells", "blobs", "slab-grid")


@dataclass
class Volume:
    dims: tuple
    density: np.ndarray   # (nx,ny,nz) absorption per unit length, >= 0
    colors: np.ndarray    # (nx,ny,nz,3) in [0,1]
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    def __post_init__(self):
        assert self.density.shape == tuple(self.dims)
        assert self.colors.shape == tuple(self.dims) + (3,)


@dataclass
class Frame:
    camera: Camera
    plane_offset: float
    split: str
    image_path: str
    image: np.ndarray | None = None


@dataclass
class Dataset:
    root: Path
    frames: list
    plane_normal: np.ndarray
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    background: np.ndarray
    meta: dict = field(default_factory=dict)

    def split(self, name: str):
        return [f for f in self.frames if f.split == name]


def _grid(dims, bounds_min, bounds_max):
    axes = [np.linspace(bounds_min[i], bounds_max[i], dims[i]) for i in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _smooth_band(r, lo, hi, edge):
    """1 inside [lo,hi], smooth rolloff of width edge outside."""
    up = np.clip((r - lo + edge) / edge, 0.0, 1.0)
    down = np.clip((hi + edge - r) / edge, 0.0, 1.0)
    sm = lambda t: t * t * (3.0 - 2.0 * t)
    return sm(up) * sm(down)


def make_volume(preset: str, dims=(64, 64, 64), seed: int = 0) -> Volume:
    """Deterministic procedural volume in the unit cube [-0.5, 0.5]^3."""
    if preset not in PRESETS:
        raise ValueError(f"unknown volume preset {preset!r}; expected one of {PRESETS}")
    dims = tuple(int(d) for d in dims)
    bmin = np.array([-0.5, -0.5, -0.5])
    bmax = np.array([0.5, 0.5, 0.5])
    x, y, z = _grid(dims, bmin, bmax)
    density = np.zeros(dims)
    colors = np.zeros(dims + (3,))
    edge = 1.5 / (max(dims) - 1)  # rolloff ~1.5 voxels to limit aliasing

    if preset == "nested-shells":
        r = np.sqrt(x * x + y * y + z * z)
        layers = [
            (0.0, 0.12, 40.0, (1.0, 0.95, 0.85)),   # core
            (0.18, 0.26, 28.0, (0.9, 0.15, 0.1)),
            (0.32, 0.40, 28.0, (0.1, 0.75, 0.25)),
            (0.44, 0.48, 28.0, (0.3, 0.4, 0.9)),    # outermost hides the rest
        ]
        for lo, hi, dens, col in layers:
            band = _smooth_band(r, lo, hi, edge)
            density += dens * band
            colors += band[..., None] * np.asarray(col)
        weight = np.maximum(sum(_smooth_band(r, lo, hi, edge) for lo, hi, _, _ in layers),
                            1e-12)
        colors /= weight[..., None]

    elif preset == "blobs":
        rng = np.random.default_rng(seed)
        n_blobs = 8
        centers = rng.uniform(-0.28, 0.28, size=(n_blobs, 3))
        sigmas = rng.uniform(0.04, 0.09, size=n_blobs)
        amps = rng.uniform(15.0, 35.0, size=n_blobs)
        cols = rng.uniform(0.15, 1.0, size=(n_blobs, 3))
        wsum = np.zeros(dims)
        for c, s, a, col in zip(centers, sigmas, amps, cols):
            d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
            w = a * np.exp(-d2 / (2.0 * s * s))
            density += w
            colors += w[..., None] * col
            wsum += w
        colors /= np.maximum(wsum, 1e-12)[..., None]

    elif preset == "slab-grid":
        cells = np.floor((x + 0.5) * 4) + np.floor((y + 0.5) * 4) + np.floor((z + 0.5) * 4)
        inside = (np.abs(x) < 0.42) & (np.abs(y) < 0.42) & (np.abs(z) < 0.42)
        parity = (cells.astype(np.int64) % 2 == 0) & inside
        density[parity] = 30.0
        colors[parity & (z < 0)] = (0.95, 0.7, 0.1)
        colors[parity & (z >= 0)] = (0.2, 0.5, 0.95)

    return Volume(dims, density, colors, bmin, bmax)


def raymarch_render(volume: Volume, camera: Camera, plane: ClipPlane | None,
                    steps: int = DEFAULT_STEPS, background=(0.0, 0.0, 0.0),
                    return_alpha: bool = False):
    """Front-to-back emission-absorption integral along each pixel ray."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    bg = np.ascontiguousarray(background, dtype=np.float64)
    image = np.empty((camera.height, camera.width, 3))
    alpha = np.empty((camera.height, camera.width))
    clip_on = plane is not None
    plane_n = plane.normal if clip_on else PLANE_NORMAL
    plane_z = float(plane.offset) if clip_on else 0.0
    _kernels.raymarch_kernel(
        camera.height, camera.width, camera.fx, camera.fy, camera.cx, camera.cy,
        np.ascontiguousarray(camera.rotation.T), np.ascontiguousarray(camera.position),
        volume.density, volume.colors, volume.bounds_min, volume.bounds_max,
        steps, plane_n, plane_z, clip_on, bg, image, alpha)
    return (image, alpha) if return_alpha else image


def orbit_camera(center, radius: float, direction, width: int, height: int,
                 fov_deg: float = 50.0) -> Camera:
    """Camera at center + radius*direction looking at center, y-down image."""
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    pos = np.asarray(center, dtype=np.float64) + radius * direction
    fwd = -direction
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    fy = height / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    return Camera(width=width, height=height, fx=fy, fy=fy,
                  cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                  rotation=rot, translation=-rot @ pos)


def camera_from_angles(azimuth_deg: float, elevation_deg: float, radius: float,
                       center, width: int, height: int, fov_deg: float = 50.0) -> Camera:
    az = np.radians(azimuth_deg)
    el = np.radians(elevation_deg)
    direction = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return orbit_camera(center, radius, direction, width, height, fov_deg)


def generate_dataset(volume: Volume, n_train: int, n_test: int, image_size: int,
                     z_range, seed: int, out_dir, steps: int = DEFAULT_STEPS,
                     background=(0.0, 0.0, 0.0), radius: float | None = None,
                     fov_deg: float = 50.0) -> dict:
    """Render and write a dataset; returns the manifest dict."""
    out = Path(out_dir)
    images_dir = out / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {images_dir}: {e}") from e

    center = 0.5 * (volume.bounds_min + volume.bounds_max)
    half_diag = 0.5 * float(np.linalg.norm(volume.bounds_max - volume.bounds_min))
    if radius is None:
        radius = 2.4 * half_diag
    if z_range is None:
        margin = 0.1 * (volume.bounds_max[2] - volume.bounds_min[2])
        z_range = (float(volume.bounds_min[2] - margin),
                   float(volume.bounds_max[2] + margin))

    rng = np.random.default_rng(seed)
    frames = []
    for split, count in (("train", n_train), ("test", n_test)):
        for idx in range(count):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            z = float(rng.uniform(z_range[0], z_range[1]))
            cam = orbit_camera(center, radius, direction, image_size, image_size,
                               fov_deg)
            img = raymarch_render(volume, cam, ClipPlane(PLANE_NORMAL, z),
                                  steps=steps, background=background)
            rel = f"images/{split}_{idx:04d}.png"
            arr = np.clip(img * 255.0 + 0.5, 0.0, 255.0).astype(np.uint8)
            try:
                Image.fromarray(arr).save(out / rel)
            except OSError as e:
                raise OSError(f"failed to write {out / rel}: {e}") from e
            w2c = np.concatenate([cam.rotation, cam.translation[:, None]], axis=1)
            frames.append({
                "file": rel,
                "split": split,
                "plane_z": z,
                "world_to_camera": [float(v) for v in w2c.ravel()],
            })

    focal = image_size / (2.0 * np.tan(np.radians(fov_deg) / 2.0))
    manifest = {
        "version": MANIFEST_VERSION,
        "width": image_size,
        "height": image_size,
        "fx": focal,
        "fy": focal,
        "cx": (image_size - 1) / 2.0,
        "cy": (image_size - 1) / 2.0,
        "plane_normal": [0.0, 0.0, 1.0],
        "bounds_min": [float(v) for v in volume.bounds_min],
        "bounds_max": [float(v) for v in volume.bounds_max],
        "background": [float(v) for v in background],
        "z_range": [float(z_range[0]), float(z_range[1])],
        "radius": float(radius),
        "fov_deg": float(fov_deg),
        "seed": int(seed),
        "frames": frames,
    }
    try:
        (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as e:
        raise OSError(f"failed to write manifest {out / MANIFEST_NAME}: {e}") from e
    return manifest


def load_dataset(root, load_images: bool = True) -> Dataset:
    """Parse a dataset directory back into cameras, offsets and image arrays."""
    root = Path(root)
    manifest = json.loads((root / MANIFEST_NAME).read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    frames = []
    for entry in manifest["frames"]:
        w2c = np.array(entry["world_to_camera"], dtype=np.float64).reshape(3, 4)
        cam = Camera(width=manifest["width"], height=manifest["height"],
                     fx=manifest["fx"], fy=manifest["fy"],
                     cx=manifest["cx"], cy=manifest["cy"],
                     rotation=w2c[:, :3], translation=w2c[:, 3])
        image = None
        path = root / entry["file"]
        if load_images:
            if not path.exists():
                raise FileNotFoundError(f"dataset image missing: {path}")
            image = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        frames.append(Frame(camera=cam, plane_offset=float(entry["plane_z"]),
                            split=entry["split"], image_path=str(path), image=image))
    return Dataset(root=root, frames=frames,
                   plane_normal=np.array(manifest["plane_normal"]),
                   bounds_min=np.array(manifest["bounds_min"]),
                   bounds_max=np.array(manifest["bounds_max"]),
                   background=np.array(manifest["background"]),
                   meta=manifest)
