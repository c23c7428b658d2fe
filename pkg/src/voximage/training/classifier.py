"""Training for the evaluation classifier (kept separate from the pipeline
models: it only scores generated images, it never shapes them)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericalError
from ..models.classifier import ConvClassifier, cross_entropy
from ..rng import child_rng
from ..tensor import (AdamW, WarmupCosine, assign_params, backward,
                      load_checkpoint, save_checkpoint)
from .common import CsvLog, epoch_batches
from .phase1 import check_nonnegative, check_positive, check_unit_half_open


@dataclass
class ClassifierConfig:
    base_channels: int = 16
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05

    def __post_init__(self):
        check_positive(base_channels=self.base_channels, epochs=self.epochs,
                       batch_size=self.batch_size, lr=self.lr)
        check_unit_half_open(warmup_frac=self.warmup_frac)
        check_nonnegative(weight_decay=self.weight_decay)


def train_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int,
                     cfg: ClassifierConfig, seed: int,
                     out_base: str | None = None,
                     log_path: str | None = None) -> ConvClassifier:
    if np.unique(labels).size < 2:
        raise ConfigError("classifier training needs at least two classes present")
    model = ConvClassifier(child_rng(seed, "classifier", "init"), n_classes,
                           images.shape[1], cfg.base_channels)
    order_rng = child_rng(seed, "classifier", "order")
    opt = AdamW(model.named_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = images.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss", "lr"])
    step = 0
    for _ in range(cfg.epochs):
        total, lr = 0.0, cfg.lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            opt.zero_grad()
            loss = cross_entropy(model.logits(images[idx]), labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"classifier loss is not finite: {value}")
            backward(loss)
            opt.step(lr)
            total += value
            step += 1
        log.add(step, total / steps_per_epoch, lr)
    if out_base is not None:
        save_classifier(out_base, model, cfg)
    return model


def accuracy(model: ConvClassifier, images: np.ndarray, labels: np.ndarray) -> float:
    pred = model.probs(images).argmax(axis=1)
    return float((pred == labels).mean())


def save_classifier(base: str, model: ConvClassifier, cfg: ClassifierConfig) -> None:
    meta = {"stage": "classifier", "n_classes": model.n_classes,
            "image_size": model.image_size, "config": asdict(cfg)}
    save_checkpoint(base, model.named_params(), meta)


def load_classifier(base: str) -> ConvClassifier:
    arrays, meta = load_checkpoint(base)
    cfg = ClassifierConfig(**meta["config"])
    model = ConvClassifier(child_rng(0, "rebuild"), meta["n_classes"],
                           meta["image_size"], cfg.base_channels)
    assign_params(model.named_params(), arrays)
    return model
