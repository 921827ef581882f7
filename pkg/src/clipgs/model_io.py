"""Model file serialization.

Single self-contained binary, consumed byte-for-byte by the browser viewer:

    bytes 0..7    magic b"CGSPLAT1"
    bytes 8..11   uint32 little-endian header length (multiple of 4)
    header        UTF-8 JSON, space-padded so the payload starts 4-byte aligned
    payload       raw little-endian float32 arrays, C-order

The header declares cloud field order/shapes, the deformation-model
architecture (with layer shapes in storage order: for each layer the weight
matrix (in,out) row-major, then the bias), scene bounds, the plane normal and
a training-config snapshot. Payload length must equal the sum of declared
sizes. Arrays come back as float64 for the numeric core, so a file round-trips
exactly (save(load(f)) == f) and parameters round-trip at float32 resolution.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .aam import AamParams
from .core import GaussianCloud

MAGIC = b"CGSPLAT1"
VERSION = 1

CLOUD_FIELDS = (
    ("positions", 3),
    ("rotations", 4),
    ("log_scales", 3),
    ("color_logits", 3),
    ("opacity_logits", 1),
    ("trunc_values", 1),
)


class ModelFormatError(ValueError):
    """Base class for model-file validation failures."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class PayloadLengthError(ModelFormatError):
    pass


class CorruptValuesError(ModelFormatError):
    pass


def _aam_header(aam: AamParams | None):
    if aam is None:
        return None
    layers = [{"name": name, "rows": int(aam.weights[name]["w"].shape[0]),
               "cols": int(aam.weights[name]["w"].shape[1])}
              for name in aam.layer_names()]
    return {"pe_levels_pos": aam.pe_levels_pos, "pe_levels_z": aam.pe_levels_z,
            "hidden": aam.hidden, "pos_scale": aam.pos_scale, "layers": layers}


def save_model(cloud: GaussianCloud, aam: AamParams | None, meta: dict,
               path) -> int:
    """Write the model file; returns bytes written (the storage metric)."""
    cloud.validate()
    if aam is not None:
        aam.validate()
    n = cloud.count
    fields = [{"name": name, "shape": [n, width] if width > 1 else [n]}
              for name, width in CLOUD_FIELDS]
    header = {
        "magic": MAGIC.decode(),
        "version": VERSION,
        "count": n,
        "fields": fields,
        "aam": _aam_header(aam),
        "scene": meta.get("scene", {}),
        "plane_normal": list(meta.get("plane_normal", [0.0, 0.0, 1.0])),
        "train_config": meta.get("train_config", {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-len(header_bytes)) % 4
    header_bytes += b" " * pad

    chunks = [MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for name, _ in CLOUD_FIELDS:
        chunks.append(np.ascontiguousarray(
            getattr(cloud, name), dtype="<f4").tobytes())
    if aam is not None:
        for name in aam.layer_names():
            chunks.append(np.ascontiguousarray(aam.weights[name]["w"], dtype="<f4").tobytes())
            chunks.append(np.ascontiguousarray(aam.weights[name]["b"], dtype="<f4").tobytes())
    blob = b"".join(chunks)
    try:
        Path(path).write_bytes(blob)
    except OSError as e:
        raise OSError(f"failed to write model file {path}: {e}") from e
    return len(blob)


def load_model(path):
    """Read and validate a model file; returns (cloud, aam_or_none, header)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"failed to read model file {path}: {e}") from e
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise BadMagicError(f"{path}: not a model file (bad magic)")
    (header_len,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + header_len:
        raise PayloadLengthError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f"{path}: unreadable header: {e}") from e
    if header.get("version") != VERSION:
        raise UnsupportedVersionError(
            f"{path}: unsupported version {header.get('version')!r}")

    n = int(header["count"])
    expected = sum(int(np.prod(f["shape"])) for f in header["fields"])
    aam_hdr = header.get("aam")
    if aam_hdr is not None:
        for layer in aam_hdr["layers"]:
            expected += layer["rows"] * layer["cols"] + layer["cols"]
    payload = blob[12 + header_len:]
    if len(payload) != expected * 4:
        raise PayloadLengthError(
            f"{path}: payload is {len(payload)} bytes, header declares {expected * 4}")

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CorruptValuesError(f"{path}: non-finite parameter values")

    offset = 0
    arrays = {}
    for f in header["fields"]:
        size = int(np.prod(f["shape"]))
        arrays[f["name"]] = flat[offset:offset + size].reshape(f["shape"])
        offset += size
    cloud = GaussianCloud(**{name: arrays[name] for name, _ in CLOUD_FIELDS})
    if cloud.count != n:
        raise ModelFormatError(f"{path}: field shapes disagree with count {n}")

    aam = None
    if aam_hdr is not None:
        aam = AamParams(pe_levels_pos=int(aam_hdr["pe_levels_pos"]),
                        pe_levels_z=int(aam_hdr["pe_levels_z"]),
                        hidden=int(aam_hdr["hidden"]),
                        pos_scale=float(aam_hdr["pos_scale"]))
        for layer in aam_hdr["layers"]:
            rows, cols = layer["rows"], layer["cols"]
            w = flat[offset:offset + rows * cols].reshape(rows, cols)
            offset += rows * cols
            b = flat[offset:offset + cols]
            offset += cols
            aam.weights[layer["name"]] = {"w": w.copy(), "b": b.copy()}
        aam.validate()  # rejects width mismatches vs the encoding config
    return cloud, aam, header
