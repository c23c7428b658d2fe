"""Synthetic paired (voxel, image, label) data with a known latent structure.

Classes are shape x colour combinations rendered as parametric scenes with
per-sample jitter.  Voxel vectors are a fixed per-subject random linear read
of coarse image features, smoothed along the voxel axis to mimic spatial
redundancy, plus white and low-rank background noise scaled by 1/snr.  By
construction a linear probe can decode the class from the voxels at
reasonable snr, so downstream failures are attributable to the models, not
the data.

Generation is deterministic: every sample owns an rng stream spawned from
the master seed, so the dataset is a pure function of its config.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, MissingArtifactError, ShapeError
from .rng import child_rng, spawn

DATASET_VERSION = 1

SHAPE_NAMES = ("square", "circle", "triangle", "cross", "ring")


@dataclass
class SynthConfig:
    n_voxels: int = 1024
    image_size: int = 32
    n_classes: int = 10
    n_subjects: int = 3
    snr: float = 8.0
    smooth_window: int = 8
    noise_rank: int = 8
    n_train: int = 320
    n_test: int = 80
    held_out_classes: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if self.snr <= 0:
            raise ConfigError(f"snr must be positive, got {self.snr}")
        if self.held_out_classes >= self.n_classes:
            raise ConfigError("held_out_classes must leave at least one training class")
        if self.image_size % 8:
            raise ConfigError(f"image size must be a multiple of 8, got {self.image_size}")


def _palette(n_classes: int) -> list[tuple[float, float, float]]:
    return [colorsys.hsv_to_rgb(i / n_classes, 0.85, 0.9) for i in range(n_classes)]


def class_style(label: int, n_classes: int) -> tuple[int, tuple[float, float, float]]:
    """Class -> (shape index, base colour).

    Every class owns a distinct hue and the canonical shapes cycle, so the
    (shape, colour) pair identifies the class through either cue.
    """
    return label % len(SHAPE_NAMES), _palette(n_classes)[label]


def render_scene(shape_id: int, rgb, cx: float, cy: float, radius: float,
                 size: int) -> np.ndarray:
    """One [size, size, 3] scene in [0, 1], 2x supersampled for soft edges."""
    ss = 2 * size
    ys, xs = np.mgrid[0:ss, 0:ss] / 2.0 + 0.25
    dx, dy = xs - cx, ys - cy
    r = radius
    if shape_id == 0:
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= r
    elif shape_id == 1:
        mask = dx * dx + dy * dy <= r * r
    elif shape_id == 2:
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    elif shape_id == 3:
        mask = ((np.abs(dx) <= r / 3.0) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= r / 3.0) & (np.abs(dx) <= r))
    elif shape_id == 4:
        d2 = dx * dx + dy * dy
        mask = (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ShapeError(f"unknown shape id {shape_id}")
    canvas = np.full((ss, ss, 3), 0.08)
    canvas[mask] = np.asarray(rgb)
    pooled = canvas.reshape(size, 2, size, 2, 3).mean(axis=(1, 3))
    return pooled


def draw_sample_image(label: int, cfg: SynthConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Jittered rendering of one class instance."""
    shape_id, rgb = class_style(label, cfg.n_classes)
    half = cfg.image_size / 2.0
    cx = half + rng.uniform(-3.0, 3.0)
    cy = half + rng.uniform(-3.0, 3.0)
    radius = cfg.image_size * 0.25 * rng.uniform(0.85, 1.15)
    # Brightness-only jitter: a shared scalar keeps the hue (the colour half
    # of the class identity) untouched.
    rgb = np.clip(np.asarray(rgb) * rng.uniform(0.85, 1.15), 0.0, 1.0)
    img = render_scene(shape_id, rgb, cx, cy, radius, cfg.image_size)
    img = np.clip(img + rng.normal(0.0, 0.01, size=img.shape), 0.0, 1.0)
    return img


def image_features(images: np.ndarray) -> np.ndarray:
    """Coarse features the voxel code is built from: 4x4 mean pooling."""
    b, h, _, c = images.shape
    g = h // 4
    pooled = images.reshape(b, g, 4, g, 4, c).mean(axis=(2, 4))
    return pooled.reshape(b, g * g * c)


def smooth_voxels(voxels: np.ndarray, window: int) -> np.ndarray:
    """Circular moving average along the voxel axis (spatial redundancy)."""
    if window <= 1:
        return voxels
    acc = np.zeros_like(voxels)
    for off in range(-(window // 2), window - window // 2):
        acc += np.roll(voxels, off, axis=1)
    return acc / window


@dataclass
class PairedDataset:
    """Generated corpus plus its split and normalisation constants."""
    voxels: np.ndarray
    images: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    config: SynthConfig
    voxel_std: float
    voxel_mean: np.ndarray = field(repr=False)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    def split(self, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = {"train": self.train_idx, "test": self.test_idx}[which]
        return self.voxels[idx], self.images[idx], self.labels[idx]


def _round_robin_labels(count: int, classes: np.ndarray) -> np.ndarray:
    return classes[np.arange(count) % classes.size]


def generate(cfg: SynthConfig, seed: int) -> PairedDataset:
    """Deterministic paired dataset for a config and master seed."""
    all_classes = np.arange(cfg.n_classes)
    if cfg.held_out_classes > 0:
        train_classes = all_classes[:-cfg.held_out_classes]
        test_classes = all_classes[-cfg.held_out_classes:]
    else:
        train_classes = test_classes = all_classes
    labels = np.concatenate([
        _round_robin_labels(cfg.n_train, train_classes),
        _round_robin_labels(cfg.n_test, test_classes),
    ]).astype(np.int64)
    n = labels.size
    subjects = (np.arange(n) % cfg.n_subjects).astype(np.int64)
    train_idx = np.arange(cfg.n_train, dtype=np.int64)
    test_idx = np.arange(cfg.n_train, n, dtype=np.int64)

    sample_rngs = spawn(child_rng(seed, "synth", "samples"), n)
    images = np.stack([draw_sample_image(int(labels[i]), cfg, sample_rngs[i])
                       for i in range(n)])
    feats = image_features(images)

    subject_reads = []
    for s in range(cfg.n_subjects):
        w_rng = child_rng(seed, "synth", "subject", s)
        subject_reads.append(w_rng.normal(0.0, 1.0 / np.sqrt(feats.shape[1]),
                                          size=(cfg.n_voxels, feats.shape[1])))
    bg_bases = []
    for s in range(cfg.n_subjects):
        b_rng = child_rng(seed, "synth", "background", s)
        bg_bases.append(b_rng.normal(0.0, 1.0 / np.sqrt(cfg.noise_rank),
                                     size=(cfg.n_voxels, cfg.noise_rank)))

    clean = np.empty((n, cfg.n_voxels))
    for i in range(n):
        clean[i] = subject_reads[subjects[i]] @ feats[i]
    clean = smooth_voxels(clean, cfg.smooth_window)
    signal_std = float(clean[train_idx].std())
    noise_std = signal_std / cfg.snr

    voxels = np.empty_like(clean)
    for i in range(n):
        rng_i = sample_rngs[i]
        white = rng_i.standard_normal(cfg.n_voxels)
        bg = bg_bases[subjects[i]] @ rng_i.standard_normal(cfg.noise_rank)
        voxels[i] = clean[i] + noise_std * (np.sqrt(0.7) * white + np.sqrt(0.3) * bg)

    voxel_mean = voxels[train_idx].mean(axis=0)
    voxels -= voxel_mean
    voxel_std = float(voxels[train_idx].std())
    voxels /= voxel_std
    return PairedDataset(voxels, images, labels, subjects, train_idx, test_idx,
                         cfg, voxel_std, voxel_mean)


# ---------------------------------------------------------------------------
# serialisation: manifest + one binary blob, f64/i64 little endian
# ---------------------------------------------------------------------------

_DTYPES = {"f64": "<f8", "i64": "<i8"}


def save_dataset(directory: str, ds: PairedDataset) -> None:
    os.makedirs(directory, exist_ok=True)
    arrays = {
        "voxels": (ds.voxels, "f64"),
        "images": (ds.images, "f64"),
        "labels": (ds.labels, "i64"),
        "subjects": (ds.subjects, "i64"),
        "train_idx": (ds.train_idx, "i64"),
        "test_idx": (ds.test_idx, "i64"),
        "voxel_mean": (ds.voxel_mean, "f64"),
    }
    entries, chunks, offset = {}, [], 0
    for name in sorted(arrays):
        arr, tag = arrays[name]
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": tag,
                         "byte_offset": offset, "byte_length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": "voximage-dataset",
        "version": DATASET_VERSION,
        "blob": "data.bin",
        "total_bytes": offset,
        "config": asdict(ds.config),
        "voxel_std": ds.voxel_std,
        "tensors": entries,
    }
    with open(os.path.join(directory, "data.bin"), "wb") as f:
        f.write(b"".join(chunks))
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(directory: str) -> PairedDataset:
    manifest_path = os.path.join(directory, "manifest.json")
    if not os.path.exists(manifest_path):
        raise MissingArtifactError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != DATASET_VERSION:
        raise ConfigError(
            f"dataset version {manifest.get('version')} != supported {DATASET_VERSION}")
    with open(os.path.join(directory, manifest["blob"]), "rb") as f:
        blob = f.read()
    if len(blob) != manifest["total_bytes"]:
        raise ShapeError("dataset blob size does not match manifest")
    out = {}
    for name, entry in manifest["tensors"].items():
        raw = blob[entry["byte_offset"]: entry["byte_offset"] + entry["byte_length"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        out[name] = arr.astype(arr.dtype.newbyteorder("=")).reshape(entry["shape"])
    cfg = SynthConfig(**manifest["config"])
    return PairedDataset(out["voxels"], out["images"], out["labels"],
                         out["subjects"], out["train_idx"], out["test_idx"],
                         cfg, float(manifest["voxel_std"]), out["voxel_mean"])


def ridge_probe_accuracy(ds: PairedDataset, l2: float = 1.0) -> float:
    """Linear decodability oracle: one-hot ridge regression train -> test."""
    xtr, _, ytr = ds.split("train")
    xte, _, yte = ds.split("test")
    onehot = np.eye(ds.n_classes)[ytr]
    gram = xtr.T @ xtr + l2 * np.eye(xtr.shape[1])
    weights = np.linalg.solve(gram, xtr.T @ onehot)
    pred = (xte @ weights).argmax(axis=1)
    return float((pred == yte).mean())
