"""Held-out evaluation, the ablation harness, and render-speed benchmarks.

The ablation harness trains five variants on identical data, seed and
iteration budget (hard truncation, learnable truncation, deformation-only,
and deformation combined with each truncation scheme) and reports quality,
training time, render speed and storage per variant, averaged over seeds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .aam import aam_forward
from .core import ClipPlane, GaussianCloud
from .datagen import camera_from_angles
from .metrics import psnr, ssim
from .rasterizer import render
from .trainer import TrainConfig, train_full
from .truncation import visibility_hard, visibility_ste_forward

VARIANTS = ("HT", "LT", "AAM", "AAM+HT", "AAM+LT")

_VARIANT_FLAGS = {
    "HT": {"truncation_mode": "hard", "use_aam": False},
    "LT": {"truncation_mode": "learnable", "use_aam": False},
    "AAM": {"truncation_mode": "none", "use_aam": True},
    "AAM+HT": {"truncation_mode": "hard", "use_aam": True},
    "AAM+LT": {"truncation_mode": "learnable", "use_aam": True},
}


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    return replace(base, **_VARIANT_FLAGS[variant])


def model_visibility(cloud: GaussianCloud, plane: ClipPlane,
                     mode: str = "learnable", epsilon: float = 0.5):
    """Forward-only visibility under the model's trained truncation semantics."""
    if mode == "learnable":
        return visibility_ste_forward(cloud, plane, epsilon).mask_binary == 1.0
    if mode == "hard":
        return visibility_hard(cloud, plane)
    if mode == "none":
        return np.ones(cloud.count, dtype=bool)
    raise ValueError(f"unknown truncation mode {mode!r}")


def render_model(cloud: GaussianCloud, aam, camera, plane_z: float,
                 plane_normal, background, mode: str = "learnable"):
    """One inference render: mask, optional deformation, blend."""
    plane = ClipPlane(np.asarray(plane_normal, dtype=np.float64), float(plane_z))
    mask = model_visibility(cloud, plane, mode)
    deform = None
    if aam is not None:
        visible = np.flatnonzero(mask)
        deform, _ = aam_forward(aam, cloud.positions[visible], float(plane_z))
    return render(cloud, camera, plane, mask, deformation=deform,
                  background=background, with_state=False).image


@dataclass
class EvalReport:
    split: str
    n_frames: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    n_exact: int = 0   # frames whose render matched the target exactly (PSNR sentinel)
    per_frame: list = field(default_factory=list)

    def summary(self) -> str:
        exact = f", {self.n_exact} exact" if self.n_exact else ""
        return (f"{self.split}: PSNR {self.psnr_mean:.3f} +/- {self.psnr_std:.3f}  "
                f"SSIM {self.ssim_mean:.4f} +/- {self.ssim_std:.4f}  "
                f"({self.n_frames} frames{exact})")


def evaluate(cloud: GaussianCloud, aam, dataset, split: str = "test",
             mode: str = "learnable") -> EvalReport:
    """Render every frame of the split at its recorded camera/plane."""
    frames = dataset.split(split)
    if not frames:
        raise ValueError(f"dataset split {split!r} is empty")
    per_frame = []
    for i, frame in enumerate(frames):
        if frame.image is None:
            raise FileNotFoundError(f"frame image not loaded: {frame.image_path}")
        img = render_model(cloud, aam, frame.camera, frame.plane_offset,
                           dataset.plane_normal, dataset.background, mode)
        per_frame.append({"index": i, "plane_z": frame.plane_offset,
                          "psnr": psnr(img, frame.image),
                          "ssim": ssim(img, frame.image)})
    ps = np.array([f["psnr"] for f in per_frame])
    ss = np.array([f["ssim"] for f in per_frame])
    # Fully clipped frames render exactly equal to their target (both pure
    # background) and hit the infinite-PSNR sentinel; they are counted aside
    # so the mean stays meaningful (and strictly harder to pass).
    finite = np.isfinite(ps)
    psf = ps[finite] if finite.any() else np.array([np.inf])
    return EvalReport(split=split, n_frames=len(frames),
                      psnr_mean=float(psf.mean()),
                      psnr_std=float(psf.std()) if finite.any() else 0.0,
                      ssim_mean=float(ss.mean()), ssim_std=float(ss.std()),
                      n_exact=int((~finite).sum()), per_frame=per_frame)


def bench_fps(cloud: GaussianCloud, aam, image_size: int, center, radius: float,
              plane_range, plane_normal, duration: float,
              mode: str = "learnable", background=(0, 0, 0)) -> dict:
    """Scripted orbit + plane sweep for `duration` seconds of wall time."""
    if duration <= 0:
        raise ValueError("benchmark duration must be positive")
    times = []
    start = time.perf_counter()
    i = 0
    while time.perf_counter() - start < duration:
        az = (i * 11.25) % 360.0
        el = 20.0 * np.sin(i / 7.0)
        z = plane_range[0] + (plane_range[1] - plane_range[0]) * ((i % 29) / 28.0)
        cam = camera_from_angles(az, el, radius, center, image_size, image_size)
        t0 = time.perf_counter()
        render_model(cloud, aam, cam, z, plane_normal, background, mode)
        times.append(time.perf_counter() - t0)
        i += 1
    fps = 1.0 / np.array(times)
    return {"frames": len(times), "fps_median": float(np.median(fps)),
            "fps_p5": float(np.percentile(fps, 5.0)),
            "fps_mean": float(len(times) / sum(times))}


@dataclass
class AblationRow:
    variant: str
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    train_time_s: float
    fps_median: float
    storage_bytes: int
    aam_bytes: int
    per_seed: list = field(default_factory=list)


def ablate(dataset, base_config: TrainConfig, seeds=(0, 1, 2),
           bench_duration: float = 2.0, eval_split: str = "test",
           save_dir=None) -> list:
    """Train every variant per seed on identical data; emit one row per variant.

    Storage is measured by serializing each trained model; the deformation
    model's share is the exact byte difference between saving with and without
    it, so storage(X+AAM) - storage(X) arithmetic is checkable downstream.
    """
    import hashlib
    import tempfile
    from pathlib import Path

    from .model_io import save_model
    from .trainer import init_cloud

    center = 0.5 * (dataset.bounds_min + dataset.bounds_max)
    radius = dataset.meta.get("radius", 2.4 * 0.5 * float(
        np.linalg.norm(dataset.bounds_max - dataset.bounds_min)))
    z_range = dataset.meta.get("z_range",
                               (float(dataset.bounds_min[2]), float(dataset.bounds_max[2])))
    rows = []
    for variant in VARIANTS:
        per_seed = []
        for seed in seeds:
            cfg = replace(variant_config(base_config, variant), seed=seed)
            # Seed audit: the initialization must be identical bits across
            # variants for a given seed (flags must not leak into init).
            probe = init_cloud(cfg, dataset.bounds_min, dataset.bounds_max,
                               dataset.plane_normal)
            init_hash = hashlib.sha256(probe.positions.tobytes()
                                       + probe.opacity_logits.tobytes()).hexdigest()
            t0 = time.perf_counter()
            cloud, aam, _ = train_full(dataset, cfg)
            train_time = time.perf_counter() - t0
            report = evaluate(cloud, aam, dataset, split=eval_split,
                              mode=cfg.truncation_mode)
            bench = bench_fps(cloud, aam, dataset.meta.get("width", 128), center,
                              radius, z_range, dataset.plane_normal,
                              bench_duration, mode=cfg.truncation_mode,
                              background=dataset.background)
            # header kept variant-invariant so storage differences between
            # variants reduce exactly to the deformation-model payload
            meta = {"scene": {"bounds_min": list(map(float, dataset.bounds_min)),
                              "bounds_max": list(map(float, dataset.bounds_max))},
                    "plane_normal": list(map(float, dataset.plane_normal)),
                    "train_config": {"seed": seed}}
            with tempfile.TemporaryDirectory() as td:
                with_path = Path(td) / "with.cgs"
                storage = save_model(cloud, aam, meta, with_path)
                aam_bytes = 0
                if aam is not None:
                    aam_bytes = storage - save_model(cloud, None, meta,
                                                     Path(td) / "without.cgs")
                if save_dir is not None:
                    out = Path(save_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    save_model(cloud, aam, meta,
                               out / f"{variant.replace('+', '_')}_seed{seed}.cgs")
            per_seed.append({"seed": seed, "psnr": report.psnr_mean,
                             "ssim": report.ssim_mean, "time_s": train_time,
                             "fps_median": bench["fps_median"],
                             "storage_bytes": storage, "aam_bytes": aam_bytes,
                             "init_sha256": init_hash})
        ps = np.array([s["psnr"] for s in per_seed])
        ss = np.array([s["ssim"] for s in per_seed])
        rows.append(AblationRow(
            variant=variant,
            psnr_mean=float(ps.mean()), psnr_std=float(ps.std()),
            ssim_mean=float(ss.mean()), ssim_std=float(ss.std()),
            train_time_s=float(np.mean([s["time_s"] for s in per_seed])),
            fps_median=float(np.mean([s["fps_median"] for s in per_seed])),
            storage_bytes=int(np.mean([s["storage_bytes"] for s in per_seed])),
            aam_bytes=int(np.mean([s["aam_bytes"] for s in per_seed])),
            per_seed=per_seed))
    return rows


def format_ablation_table(rows) -> str:
    header = (f"{'variant':<8} {'PSNR':>16} {'SSIM':>16} {'time[s]':>9} "
              f"{'FPS':>7} {'storage':>10}")
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r.variant:<8} {r.psnr_mean:>8.3f} +/- {r.psnr_std:<5.3f}"
                     f" {r.ssim_mean:>8.4f} +/- {r.ssim_std:<5.4f}"
                     f" {r.train_time_s:>9.1f} {r.fps_median:>7.1f}"
                     f" {r.storage_bytes:>10d}")
    return "\n".join(lines)
