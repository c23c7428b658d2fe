"""Checkpoint serialisation: JSON manifest + raw little-endian float64 blob.

A checkpoint with base path ``X`` is two files: ``X.json`` holding
``{"blob": ..., "meta": {...}, "tensors": {name: {shape, dtype, byte_offset,
byte_length}}}`` and ``X.bin`` holding the concatenated ``<f8`` data in
sorted-name order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os

import numpy as np

from ..errors import MissingArtifactError, ShapeError
from .core import Tensor

DTYPE_TAG = "f64"


def _paths(base: str) -> tuple[str, str]:
    if base.endswith(".json") or base.endswith(".bin"):
        base = base.rsplit(".", 1)[0]
    return base + ".json", base + ".bin"


def save_checkpoint(base: str, arrays: dict[str, np.ndarray | Tensor],
                    meta: dict | None = None) -> str:
    """Write arrays (sorted by name) to base.json + base.bin; returns base."""
    manifest_path, blob_path = _paths(base)
    os.makedirs(os.path.dirname(os.path.abspath(manifest_path)), exist_ok=True)
    entries: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = np.ascontiguousarray(data, dtype="<f8").tobytes()
        entries[name] = {
            "shape": list(data.shape),
            "dtype": DTYPE_TAG,
            "byte_offset": offset,
            "byte_length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "voximage-checkpoint-v1",
        "blob": os.path.basename(blob_path),
        "total_bytes": offset,
        "meta": meta or {},
        "tensors": entries,
    }
    with open(blob_path, "wb") as f:
        f.write(b"".join(chunks))
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return base if not base.endswith((".json", ".bin")) else base.rsplit(".", 1)[0]


def load_checkpoint(base: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (name -> float64 array, meta dict)."""
    manifest_path, blob_path = _paths(base)
    if not os.path.exists(manifest_path):
        raise MissingArtifactError(f"checkpoint manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    blob_path = os.path.join(os.path.dirname(manifest_path), manifest["blob"])
    if not os.path.exists(blob_path):
        raise MissingArtifactError(f"checkpoint blob not found: {blob_path}")
    with open(blob_path, "rb") as f:
        blob = f.read()
    if len(blob) != manifest["total_bytes"]:
        raise ShapeError(
            f"checkpoint blob {blob_path} has {len(blob)} bytes, "
            f"manifest says {manifest['total_bytes']}")
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        if entry["dtype"] != DTYPE_TAG:
            raise ShapeError(f"tensor '{name}' has dtype {entry['dtype']}, expected {DTYPE_TAG}")
        shape = tuple(entry["shape"])
        expect = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        if entry["byte_length"] != expect:
            raise ShapeError(
                f"tensor '{name}': byte_length {entry['byte_length']} != shape {shape} * 8")
        raw = blob[entry["byte_offset"]: entry["byte_offset"] + entry["byte_length"]]
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return arrays, manifest.get("meta", {})


def assign_params(params: dict[str, Tensor], arrays: dict[str, np.ndarray],
                  prefix: str = "") -> None:
    """Copy loaded arrays into parameters in place, shape-checked by name.

    With a prefix, only checkpoint entries under it are used (prefix
    stripped before matching).
    """
    if prefix:
        arrays = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise ShapeError(f"checkpoint is missing parameters: {missing[:5]}")
    for name, p in params.items():
        src = arrays[name]
        if src.shape != p.data.shape:
            raise ShapeError(
                f"parameter '{name}': checkpoint shape {src.shape} != model shape {p.data.shape}")
        p.data[...] = src
