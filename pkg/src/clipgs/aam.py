"""Plane-conditioned deformation model.

A positional-encoded MLP maps (primitive position, plane offset) to small
per-primitive adjustments of position, rotation and scale. The trunk is two
rectifier layers; three linear heads emit the deltas. Heads are
zero-initialized so a freshly attached model is an exact identity: rendering
with it is bit-identical to rendering without it, which makes the handover
from plain-cloud training seamless.

Position deltas are scaled by pos_scale (a fraction of the scene extent) so
early adjustments stay small; rotation deltas add to the unnormalized
quaternion and scale deltas add in log-space, which keeps activated scales
positive for free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_PE_LEVELS_POS = 10
DEFAULT_PE_LEVELS_Z = 4
DEFAULT_HIDDEN = 64

# (name, output width) of the heads, in weight-storage order.
HEAD_SPECS = (("head_mu", 3), ("head_rot", 4), ("head_scale", 3))


def encoding_width(dim: int, levels: int) -> int:
    return dim * (2 * levels + 1)


@dataclass
class AamParams:
    """Encoding configuration plus all dense-layer weights.

    weights maps layer name to a dict {"w": (in,out), "b": (out,)}; layer
    order is trunk0, trunk1, head_mu, head_rot, head_scale.
    """

    pe_levels_pos: int
    pe_levels_z: int
    hidden: int
    pos_scale: float
    weights: dict = field(default_factory=dict)

    @property
    def input_width(self) -> int:
        return encoding_width(3, self.pe_levels_pos) + encoding_width(1, self.pe_levels_z)

    def layer_names(self):
        return ["trunk0", "trunk1"] + [name for name, _ in HEAD_SPECS]

    def validate(self):
        widths = {"trunk0": (self.input_width, self.hidden),
                  "trunk1": (self.hidden, self.hidden)}
        for name, out in HEAD_SPECS:
            widths[name] = (self.hidden, out)
        for name, (w_in, w_out) in widths.items():
            if name not in self.weights:
                raise ValueError(f"missing layer {name}")
            w, b = self.weights[name]["w"], self.weights[name]["b"]
            if w.shape != (w_in, w_out) or b.shape != (w_out,):
                raise ValueError(
                    f"layer {name} has shape {w.shape}/{b.shape}, expected "
                    f"({w_in},{w_out})/({w_out},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"non-finite weights in layer {name}")

    def param_items(self):
        """Flat (key, array) view over every trainable tensor."""
        for name in self.layer_names():
            yield f"{name}.w", self.weights[name]["w"]
            yield f"{name}.b", self.weights[name]["b"]


@dataclass
class Deformation:
    d_mu: np.ndarray     # (N,3)
    d_rot: np.ndarray    # (N,4)
    d_scale: np.ndarray  # (N,3)


@dataclass
class AamCache:
    """Saved forward activations for the backward pass."""

    enc: np.ndarray
    h0: np.ndarray
    h1: np.ndarray
    positions: np.ndarray
    z: float


def init_aam(pe_levels_pos: int = DEFAULT_PE_LEVELS_POS,
             pe_levels_z: int = DEFAULT_PE_LEVELS_Z,
             hidden: int = DEFAULT_HIDDEN,
             pos_scale: float = 0.01,
             seed: int = 0) -> AamParams:
    """He-initialized trunk, zero-initialized heads (identity at start)."""
    params = AamParams(pe_levels_pos, pe_levels_z, hidden, pos_scale)
    rng = np.random.default_rng(seed)
    d_in = params.input_width

    def dense(n_in, n_out, zero):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_in, n_out))
        return {"w": w, "b": np.zeros(n_out)}

    params.weights["trunk0"] = dense(d_in, hidden, zero=False)
    params.weights["trunk1"] = dense(hidden, hidden, zero=False)
    for name, out in HEAD_SPECS:
        params.weights[name] = dense(hidden, out, zero=True)
    params.validate()
    return params


def positional_encoding(v, levels: int) -> np.ndarray:
    """Concatenate v with sin/cos at frequencies 2^k pi, k = 0..levels-1.

    Componentwise: for (N,D) input the output is (N, D*(2*levels+1)) laid out
    as [v | sin(2^0 pi v) | cos(2^0 pi v) | sin(2^1 pi v) | ...].
    """
    if levels < 0:
        raise ValueError("levels must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    scalar = v.ndim == 0
    arr = v.reshape(1, 1) if scalar else (v[:, None] if v.ndim == 1 else v)
    parts = [arr]
    for k in range(levels):
        phase = (2.0 ** k) * np.pi * arr
        parts.append(np.sin(phase))
        parts.append(np.cos(phase))
    out = np.concatenate(parts, axis=1)
    return out[0] if scalar else out


def positional_encoding_backward(v, levels: int, d_enc: np.ndarray) -> np.ndarray:
    """Gradient of positional_encoding w.r.t. its input."""
    v = np.asarray(v, dtype=np.float64)
    arr = v if v.ndim == 2 else v.reshape(-1, 1)
    d = arr.shape[1]
    grad = d_enc[:, :d].copy()
    for k in range(levels):
        f = (2.0 ** k) * np.pi
        phase = f * arr
        d_sin = d_enc[:, d * (1 + 2 * k): d * (2 + 2 * k)]
        d_cos = d_enc[:, d * (2 + 2 * k): d * (3 + 2 * k)]
        grad += d_sin * f * np.cos(phase) - d_cos * f * np.sin(phase)
    return grad.reshape(v.shape)


def aam_forward(params: AamParams, positions: np.ndarray, z: float):
    """Deformations for the visible primitives at plane offset z.

    Returns (Deformation, AamCache); feed the cache to aam_backward.
    """
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    n = positions.shape[0]
    enc_pos = positional_encoding(positions, params.pe_levels_pos)
    enc_z = positional_encoding(np.array([[float(z)]]), params.pe_levels_z)
    enc = np.concatenate([enc_pos, np.repeat(enc_z, n, axis=0)], axis=1)

    w = params.weights
    h0 = np.maximum(enc @ w["trunk0"]["w"] + w["trunk0"]["b"], 0.0)
    h1 = np.maximum(h0 @ w["trunk1"]["w"] + w["trunk1"]["b"], 0.0)
    d_mu = (h1 @ w["head_mu"]["w"] + w["head_mu"]["b"]) * params.pos_scale
    d_rot = h1 @ w["head_rot"]["w"] + w["head_rot"]["b"]
    d_scale = h1 @ w["head_scale"]["w"] + w["head_scale"]["b"]
    cache = AamCache(enc=enc, h0=h0, h1=h1, positions=positions, z=float(z))
    return Deformation(d_mu, d_rot, d_scale), cache


def aam_backward(params: AamParams, cache: AamCache,
                 d_mu_up: np.ndarray, d_rot_up: np.ndarray, d_scale_up: np.ndarray):
    """Backprop through heads, trunk and the positional encoding.

    Returns (grads, d_positions) where grads maps the same keys as
    params.param_items() and d_positions is dL/d(input positions).
    """
    w = params.weights
    grads = {}

    def dense_backward(name, x, d_out):
        grads[f"{name}.w"] = x.T @ d_out
        grads[f"{name}.b"] = d_out.sum(axis=0)
        return d_out @ w[name]["w"].T

    d_h1 = dense_backward("head_mu", cache.h1, np.asarray(d_mu_up) * params.pos_scale)
    d_h1 += dense_backward("head_rot", cache.h1, np.asarray(d_rot_up))
    d_h1 += dense_backward("head_scale", cache.h1, np.asarray(d_scale_up))

    d_h1 = d_h1 * (cache.h1 > 0)
    d_h0 = dense_backward("trunk1", cache.h0, d_h1)
    d_h0 = d_h0 * (cache.h0 > 0)
    d_enc = dense_backward("trunk0", cache.enc, d_h0)

    pos_width = encoding_width(3, params.pe_levels_pos)
    d_positions = positional_encoding_backward(
        cache.positions, params.pe_levels_pos, d_enc[:, :pos_width])
    return grads, d_positions
