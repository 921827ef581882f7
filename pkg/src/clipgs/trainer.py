"""Two-stage optimization of the splat cloud and deformation model.

Stage 1 trains the raw cloud (with the learnable plane mask) for a coarse
fit; stage 2 attaches the deformation MLP with zero-initialized heads (so the
first joint iteration starts exactly at the stage-1 solution) and optimizes
everything jointly. One optimization step is a strict forward -> backward ->
Adam-update sequence over a uniformly sampled training frame.

All randomness (cloud init, frame sampling, MLP init) derives from the config
seed through separate SeedSequence children, so a fixed seed reproduces the
whole trajectory bit for bit in single-thread mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .aam import aam_backward, aam_forward, init_aam
from .core import ClipPlane, GaussianCloud, inverse_sigmoid, sigmoid
from .metrics import compute_loss, psnr
from .rasterizer import render, render_backward
from .truncation import (DEFAULT_BAND_WIDTH, DEFAULT_EPSILON,
                         init_trunc_values, visibility_hard,
                         visibility_ste_forward)

CLOUD_GROUPS = ("positions", "rotations", "log_scales", "color_logits",
                "opacity_logits", "trunc_values")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    iters_stage1: int = 1000
    iters_stage2: int = 2000
    init_points: int = 5000
    # learning rates; position and deformation-model rates decay exponentially
    lr_position: float = 1.6e-4        # times scene extent
    lr_position_final: float = 1.6e-6  # times scene extent
    lr_rotation: float = 1e-3
    lr_scale: float = 5e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_trunc: float = 1e-3
    lr_aam: float = 1.6e-3
    lr_aam_final: float = 1.6e-5
    lam: float = 0.2
    epsilon: float = DEFAULT_EPSILON
    band_width: float = DEFAULT_BAND_WIDTH
    truncation_mode: str = "learnable"   # learnable | hard | none
    use_aam: bool = True
    aam_hidden: int = 64
    aam_pe_pos: int = 10
    aam_pe_z: int = 4
    aam_pos_scale_frac: float = 0.01     # delta-mu scale as fraction of extent
    densify: bool = False
    densify_interval: int = 300
    densify_stop_frac: float = 0.6
    densify_grad_threshold: float = 2e-4  # times scene extent
    prune_opacity: float = 0.005
    opacity_init: float = 0.1
    scene_extent: float | None = None   # default: derived from dataset bounds
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 0
    checkpoint_dir: str | None = None

    def validate(self):
        if self.iters_stage1 < 0 or self.iters_stage2 < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.truncation_mode not in ("learnable", "hard", "none"):
            raise ValueError(f"unknown truncation mode {self.truncation_mode!r}")
        for name in ("lr_position", "lr_rotation", "lr_scale", "lr_color",
                     "lr_opacity", "lr_trunc", "lr_aam"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def desk_config(**overrides) -> TrainConfig:
    """Workstation-scale defaults (thousands of splats, minutes of training)."""
    return replace(TrainConfig(), **overrides)


def paper_config(**overrides) -> TrainConfig:
    """Full-scale preset: 100k random points, 7000 + 33000 iterations, density
    control on. Expect GPU-scale runtimes on a CPU; provided for completeness."""
    base = TrainConfig(iters_stage1=7000, iters_stage2=33000, init_points=100_000,
                       densify=True)
    return replace(base, **overrides)


class Adam:
    """Per-group Adam with bias correction; moments live as flat views."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float):
        if param.shape != grad.shape:
            raise ValueError(f"group {name!r}: grad shape {grad.shape} != param "
                             f"shape {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"NaN/inf gradient in parameter group {name!r}")
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def resize(self, name: str, keep_idx: np.ndarray, n_new: int):
        """Keep moments of surviving rows, zero-init rows for new primitives."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            kept = store[name][keep_idx]
            pad = np.zeros((n_new,) + kept.shape[1:], dtype=kept.dtype)
            store[name] = np.concatenate([kept, pad])


@dataclass
class DensifyState:
    grad_norm_sum: np.ndarray
    step_count: np.ndarray

    @staticmethod
    def zeros(n):
        return DensifyState(np.zeros(n), np.zeros(n))

    def accumulate(self, d_positions):
        norms = np.linalg.norm(d_positions, axis=1)
        touched = norms > 0
        self.grad_norm_sum[touched] += norms[touched]
        self.step_count[touched] += 1


def _seed_rng(seed: int, *tag):
    """Independent deterministic stream for one purpose within a run."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tag))


def init_cloud(config: TrainConfig, bounds_min, bounds_max,
               plane_normal) -> GaussianCloud:
    """Random cloud in the cube spanning the scene bounds."""
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    if np.any(bounds_max <= bounds_min):
        raise ValueError("empty scene bounds")
    edge = float(np.max(bounds_max - bounds_min))
    center = 0.5 * (bounds_min + bounds_max)
    rng = _seed_rng(config.seed, 0)
    n = config.init_points
    positions = center + rng.uniform(-0.5, 0.5, size=(n, 3)) * edge
    scale = np.log(edge / n ** (1.0 / 3.0))
    cloud = GaussianCloud(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.full((n, 3), scale),
        color_logits=np.zeros((n, 3)),
        opacity_logits=np.full(n, float(inverse_sigmoid(config.opacity_init))),
        trunc_values=np.zeros(n),
    )
    init_trunc_values(cloud, plane_normal)
    return cloud


def _position_lr(config, extent, it, total):
    lr0 = config.lr_position * extent
    lr1 = config.lr_position_final * extent
    frac = it / max(total, 1)
    return lr0 * (lr1 / lr0) ** frac


def _aam_lr(config, it_stage2, total_stage2):
    frac = it_stage2 / max(total_stage2, 1)
    return config.lr_aam * (config.lr_aam_final / config.lr_aam) ** frac


def densify_and_prune(cloud: GaussianCloud, stats: DensifyState, adam: Adam,
                      config: TrainConfig, extent: float, rng) -> GaussianCloud:
    """Prune transparent primitives, clone high-gradient ones (jittered copies
    inheriting every parameter including m); optimizer moments stay aligned."""
    keep = sigmoid(cloud.opacity_logits) >= config.prune_opacity
    mean_norm = np.where(stats.step_count > 0,
                         stats.grad_norm_sum / np.maximum(stats.step_count, 1), 0.0)
    clone = keep & (mean_norm > config.densify_grad_threshold * extent)

    keep_idx = np.flatnonzero(keep)
    clone_idx = np.flatnonzero(clone)
    survivors = cloud.select(keep_idx)
    if clone_idx.size:
        clones = cloud.select(clone_idx)
        jitter_scale = np.exp(clones.log_scales).mean(axis=1, keepdims=True)
        clones.positions += rng.normal(scale=0.3, size=clones.positions.shape) * jitter_scale
        merged = GaussianCloud.concatenate(survivors, clones)
    else:
        merged = survivors
    for name in CLOUD_GROUPS:
        adam.resize(name, keep_idx, clone_idx.size)
    return merged


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)

    def add(self, **kw):
        self.entries.append(kw)

    def last_loss(self):
        return self.entries[-1]["loss"] if self.entries else None


class _Loop:
    def __init__(self, dataset, config: TrainConfig, stage: int,
                 cloud=None, aam=None):
        config.validate()
        if not dataset.frames or not dataset.split("train"):
            raise ValueError("dataset has no training frames")
        self.dataset = dataset
        self.config = config
        self.frames = dataset.split("train")
        self.extent = (config.scene_extent if config.scene_extent is not None
                       else float(np.max(dataset.bounds_max - dataset.bounds_min)))
        self.background = dataset.background
        self.normal = dataset.plane_normal
        self.frame_rng = _seed_rng(config.seed, 1, stage)
        self.densify_rng = _seed_rng(config.seed, 2, stage)
        self.cloud = cloud if cloud is not None else init_cloud(
            config, dataset.bounds_min, dataset.bounds_max, self.normal)
        self.aam = aam
        self.adam = Adam()
        self.total_iters = config.iters_stage1 + config.iters_stage2
        self.densify_stats = DensifyState.zeros(self.cloud.count)
        self.log = TrainLog()

    def visibility(self, plane):
        mode = self.config.truncation_mode
        if mode == "learnable":
            return visibility_ste_forward(self.cloud, plane, self.config.epsilon,
                                          self.config.band_width)
        if mode == "hard":
            return visibility_hard(self.cloud, plane)
        return np.ones(self.cloud.count, dtype=bool)

    def step(self, it_global: int, stage: int, stage_it: int):
        cfg = self.config
        fi = int(self.frame_rng.integers(len(self.frames)))
        frame = self.frames[fi]
        plane = ClipPlane(self.normal, frame.plane_offset)
        vis = self.visibility(plane)

        deform = cache = None
        visible_idx = None
        if self.aam is not None:
            mask = vis.mask_binary == 1.0 if hasattr(vis, "mask_binary") else vis
            visible_idx = np.flatnonzero(mask)
            deform, cache = aam_forward(self.aam, self.cloud.positions[visible_idx],
                                        frame.plane_offset)

        out = render(self.cloud, frame.camera, plane, vis, deformation=deform,
                     background=self.background)
        report, d_image = compute_loss(out.image, frame.image, cfg.lam)
        if not np.isfinite(report.total):
            raise TrainingDiverged(
                f"loss diverged at iteration {it_global}",
                diagnostics={"iteration": it_global, "stage": stage,
                             "frame": fi, "loss": report.total,
                             "n_primitives": self.cloud.count})
        grads = render_backward(out.saved_state, d_image)

        if self.aam is not None:
            aam_grads, d_pos_enc = aam_backward(self.aam, cache, grads.d_dmu,
                                                grads.d_drot, grads.d_dscale)
            grads.d_positions[visible_idx] += d_pos_enc
            lr = _aam_lr(cfg, stage_it, cfg.iters_stage2)
            for key, _ in self.aam.param_items():
                name, part = key.split(".")
                self.adam.step(f"aam.{key}", self.aam.weights[name][part],
                               aam_grads[key], lr)

        self.densify_stats.accumulate(grads.d_positions)

        lrs = {
            "positions": _position_lr(cfg, self.extent, it_global, self.total_iters),
            "rotations": cfg.lr_rotation,
            "log_scales": cfg.lr_scale,
            "color_logits": cfg.lr_color,
            "opacity_logits": cfg.lr_opacity,
            "trunc_values": cfg.lr_trunc,
        }
        grad_map = {
            "positions": grads.d_positions,
            "rotations": grads.d_rotations,
            "log_scales": grads.d_log_scales,
            "color_logits": grads.d_color_logits,
            "opacity_logits": grads.d_opacity_logits,
            "trunc_values": grads.d_trunc_values,
        }
        groups = list(CLOUD_GROUPS)
        if cfg.truncation_mode != "learnable":
            groups.remove("trunc_values")
        for name in groups:
            self.adam.step(name, getattr(self.cloud, name), grad_map[name], lrs[name])

        if (cfg.densify and (it_global + 1) % cfg.densify_interval == 0
                and it_global < cfg.densify_stop_frac * self.total_iters):
            self.cloud = densify_and_prune(self.cloud, self.densify_stats,
                                           self.adam, cfg, self.extent,
                                           self.densify_rng)
            self.densify_stats = DensifyState.zeros(self.cloud.count)

        if it_global % cfg.log_interval == 0 or stage_it == 0:
            self.log.add(iteration=it_global, stage=stage, loss=report.total,
                         l1=report.l1, d_ssim=report.d_ssim,
                         psnr=psnr(out.image, frame.image), frame=fi,
                         n_primitives=self.cloud.count, time=time.time())
        return report.total

    def run_stage(self, stage: int, iters: int, start_iter: int):
        ckpt = self.config.checkpoint_interval
        for i in range(iters):
            self.step(start_iter + i, stage, i)
            if ckpt and self.config.checkpoint_dir and (start_iter + i + 1) % ckpt == 0:
                self.checkpoint(start_iter + i + 1)

    def checkpoint(self, it):
        from .model_io import save_model
        meta = {"scene": {"bounds_min": list(map(float, self.dataset.bounds_min)),
                          "bounds_max": list(map(float, self.dataset.bounds_max)),
                          "extent": self.extent},
                "plane_normal": list(map(float, self.normal)),
                "train_config": {"iteration": it}}
        save_model(self.cloud, self.aam, meta,
                   f"{self.config.checkpoint_dir}/ckpt_{it:06d}.cgs")


def train_stage1(dataset, config: TrainConfig):
    """Coarse cloud fit with the configured truncation scheme; no deformation."""
    loop = _Loop(dataset, config, stage=1)
    loop.run_stage(stage=1, iters=config.iters_stage1, start_iter=0)
    return loop.cloud, loop.log


def make_aam_for_config(dataset, config: TrainConfig):
    """Deformation model matching the config; zero heads, trunk seeded."""
    extent = (config.scene_extent if config.scene_extent is not None
              else float(np.max(dataset.bounds_max - dataset.bounds_min)))
    return init_aam(pe_levels_pos=config.aam_pe_pos,
                    pe_levels_z=config.aam_pe_z,
                    hidden=config.aam_hidden,
                    pos_scale=config.aam_pos_scale_frac * extent,
                    seed=int(_seed_rng(config.seed, 3).integers(2 ** 31)))


def train_stage2(cloud: GaussianCloud, dataset, config: TrainConfig):
    """Joint refinement of cloud + deformation model (identity at handover)."""
    aam = make_aam_for_config(dataset, config) if config.use_aam else None
    loop = _Loop(dataset, config, stage=2, cloud=cloud, aam=aam)
    loop.run_stage(stage=2, iters=config.iters_stage2,
                   start_iter=config.iters_stage1)
    return loop.cloud, aam, loop.log


def train_full(dataset, config: TrainConfig):
    """Both stages back to back; returns (cloud, aam_or_none, combined log)."""
    cloud, log1 = train_stage1(dataset, config)
    cloud, aam, log2 = train_stage2(cloud, dataset, config)
    log = TrainLog(entries=log1.entries + log2.entries)
    return cloud, aam, log
