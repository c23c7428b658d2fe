"""Training for the image-to-latent autoencoder.

After reconstruction training, the std of the encoded training latents is
stored as ``latent_scale``; the diffusion model always works on latents
divided by this scale, so its targets are unit variance.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import NumericalError
from ..models.latent_ae import ConvLatentAE
from ..rng import child_rng
from ..tensor import (AdamW, Tensor, WarmupCosine, assign_params, backward,
                      load_checkpoint, save_checkpoint)
from .common import CsvLog, epoch_batches
from .phase1 import check_nonnegative, check_positive, check_unit_half_open


@dataclass
class LatentAEConfig:
    channels: int = 32
    latent_channels: int = 4
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.05

    def __post_init__(self):
        check_positive(channels=self.channels, latent_channels=self.latent_channels,
                       epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        check_unit_half_open(warmup_frac=self.warmup_frac)
        check_nonnegative(weight_decay=self.weight_decay)


def train_latent_ae(images: np.ndarray, cfg: LatentAEConfig, seed: int,
                    out_base: str | None = None,
                    log_path: str | None = None) -> ConvLatentAE:
    model = ConvLatentAE(child_rng(seed, "latent-ae", "init"), images.shape[1],
                         cfg.channels, cfg.latent_channels)
    order_rng = child_rng(seed, "latent-ae", "order")
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
            rec = model(Tensor(images[idx]))
            loss = ((rec - Tensor(images[idx])) ** 2).mean()
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"latent-AE loss is not finite: {value}")
            backward(loss)
            opt.step(lr)
            total += value
            step += 1
        log.add(step, total / steps_per_epoch, lr)
    latents = model.encode_np(images)
    model.latent_scale = float(latents.std())
    if model.latent_scale <= 0:
        raise NumericalError("latent scale collapsed to zero")
    if out_base is not None:
        save_latent_ae(out_base, model, cfg)
    return model


def save_latent_ae(base: str, model: ConvLatentAE, cfg: LatentAEConfig) -> None:
    meta = {"stage": "latent_ae", "image_size": model.image_size,
            "latent_scale": model.latent_scale, "config": asdict(cfg)}
    save_checkpoint(base, model.named_params(), meta)


def load_latent_ae(base: str) -> tuple[ConvLatentAE, LatentAEConfig]:
    arrays, meta = load_checkpoint(base)
    cfg = LatentAEConfig(**meta["config"])
    model = ConvLatentAE(child_rng(0, "rebuild"), meta["image_size"],
                         cfg.channels, cfg.latent_channels)
    assign_params(model.named_params(), arrays)
    model.latent_scale = float(meta["latent_scale"])
    return model, cfg
