"""Binary PPM (P6) image files: dependency-free, byte-exact to re-read."""

from __future__ import annotations

import json
import os
import re

import numpy as np

from .errors import MissingArtifactError, ShapeError


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a [H, W, 3] float image in [0, 1] as 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"write_ppm expects [H, W, 3], got {image.shape}")
    h, w, _ = image.shape
    quantised = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantised.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a [H, W, 3] float64 array in [0, 1]."""
    if not os.path.exists(path):
        raise MissingArtifactError(f"image not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    match = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if match is None:
        raise ShapeError(f"{path} is not a binary PPM")
    w, h, maxval = (int(match.group(i)) for i in (1, 2, 3))
    if maxval != 255:
        raise ShapeError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(data[match.end():], dtype=np.uint8)[: h * w * 3]
    if pixels.size != h * w * 3:
        raise ShapeError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_image_dir(directory: str, images: np.ndarray, prefix: str,
                   labels: np.ndarray | None = None) -> None:
    """Write images as prefix_00000.ppm ... plus an optional labels.json."""
    os.makedirs(directory, exist_ok=True)
    for i in range(images.shape[0]):
        write_ppm(os.path.join(directory, f"{prefix}_{i:05d}.ppm"), images[i])
    if labels is not None:
        with open(os.path.join(directory, "labels.json"), "w", encoding="utf-8") as f:
            json.dump({"labels": [int(x) for x in labels]}, f)
            f.write("\n")


def load_image_dir(directory: str, prefix: str) -> np.ndarray:
    """Read back prefix_*.ppm in index order as one [N, H, W, 3] array."""
    if not os.path.isdir(directory):
        raise MissingArtifactError(f"image directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory)
                   if n.startswith(prefix + "_") and n.endswith(".ppm"))
    if not names:
        raise MissingArtifactError(f"no {prefix}_*.ppm files in {directory}")
    return np.stack([read_ppm(os.path.join(directory, n)) for n in names])


def load_labels(directory: str) -> np.ndarray | None:
    path = os.path.join(directory, "labels.json")
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as f:
        return np.asarray(json.load(f)["labels"], dtype=np.int64)
