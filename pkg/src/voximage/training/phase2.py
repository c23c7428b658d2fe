"""Phase 2: cross-modality tuning.

An image masked autoencoder is first pretrained alone on reconstruction,
then its decoder is frozen and both autoencoders are tuned jointly through
the cross-attention fusers, minimising
``gamma_fmri * |v - v_rec|^2 + gamma_image * |u - u_rec|^2`` where each
reconstruction is guided by the other modality's encoding.  The exported
artifact for the downstream diffusion stage is the voxel encoder subtree
only.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, NumericalError
from ..models.mae import FmriMae, ImageMae
from ..models.xmodal import CrossModalModel
from ..nn import TransformerConfig
from ..rng import child_rng
from ..tensor import (AdamW, Tensor, WarmupCosine, assign_params, backward,
                      load_checkpoint, save_checkpoint)
from .common import CsvLog, epoch_batches
from .phase1 import (Phase1Config, build_fmri_mae, check_nonnegative,
                     check_positive, check_unit_half_open, check_unit_open,
                     load_phase1_model)


@dataclass
class Phase2Config:
    """Image-side architecture and joint-tuning settings."""
    image_patch: int = 4
    image_dim: int = 48
    image_enc_depth: int = 3
    image_dec_depth: int = 2
    image_heads: int = 4
    image_mlp_ratio: float = 2.0
    image_pretrain_epochs: int = 10
    fmri_mask_ratio: float = 0.75
    image_mask_ratio: float = 0.5
    gamma_fmri: float = 0.25
    gamma_image: float = 1.5
    epochs: int = 15
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_frac: float = 0.05

    def __post_init__(self):
        check_positive(image_patch=self.image_patch, image_dim=self.image_dim,
                       image_enc_depth=self.image_enc_depth,
                       image_dec_depth=self.image_dec_depth,
                       image_heads=self.image_heads,
                       image_pretrain_epochs=self.image_pretrain_epochs,
                       epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        check_unit_open(fmri_mask_ratio=self.fmri_mask_ratio,
                        image_mask_ratio=self.image_mask_ratio)
        check_unit_half_open(warmup_frac=self.warmup_frac)
        check_nonnegative(gamma_fmri=self.gamma_fmri, gamma_image=self.gamma_image,
                          weight_decay=self.weight_decay,
                          image_mlp_ratio=self.image_mlp_ratio)
        if self.image_dim % self.image_heads != 0:
            raise ConfigError(
                f"image_dim {self.image_dim} not divisible by heads {self.image_heads}")


def build_image_mae(cfg: Phase2Config, image_size: int, channels: int,
                    rng: np.random.Generator) -> ImageMae:
    enc = TransformerConfig(cfg.image_dim, cfg.image_enc_depth, cfg.image_heads,
                            cfg.image_mlp_ratio)
    dec = TransformerConfig(cfg.image_dim, cfg.image_dec_depth, cfg.image_heads,
                            cfg.image_mlp_ratio)
    return ImageMae(rng, image_size, cfg.image_patch, channels, enc, dec)


def pretrain_image_mae(images: np.ndarray, cfg: Phase2Config, seed: int,
                       log_path: str | None = None) -> ImageMae:
    """Plain masked reconstruction pretraining of the image autoencoder."""
    model = build_image_mae(cfg, images.shape[1], images.shape[3],
                            child_rng(seed, "image-mae", "init"))
    step_rng = child_rng(seed, "image-mae", "steps")
    order_rng = child_rng(seed, "image-mae", "order")
    opt = AdamW(model.named_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = images.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.lr, cfg.image_pretrain_epochs * steps_per_epoch,
                         cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss", "lr"])
    step = 0
    for _ in range(cfg.image_pretrain_epochs):
        total, lr = 0.0, cfg.lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            opt.zero_grad()
            rec, _ = model.reconstruct(images[idx], cfg.image_mask_ratio, step_rng)
            loss = ((rec - Tensor(images[idx])) ** 2).mean()
            backward(loss)
            opt.step(lr)
            total += loss.item()
            step += 1
        log.add(step, total / steps_per_epoch, lr)
    return model


def trainable_phase2_params(model: CrossModalModel) -> dict[str, Tensor]:
    """Everything except the frozen image decoder."""
    frozen = set(model.image.decoder_params("image."))
    return {name: p for name, p in model.named_params().items() if name not in frozen}


def phase2_step(model: CrossModalModel, opt: AdamW, voxels: np.ndarray,
                images: np.ndarray, cfg: Phase2Config, rng: np.random.Generator,
                lr: float | None = None) -> dict[str, float]:
    """One joint-tuning step; returns the scalar losses."""
    opt.zero_grad()
    v_rec, u_rec = model.guided_reconstructions(
        voxels, images, cfg.fmri_mask_ratio, cfg.image_mask_ratio, rng)
    loss_fmri = ((v_rec - Tensor(voxels)) ** 2).mean()
    loss_image = ((u_rec - Tensor(images)) ** 2).mean()
    total = loss_fmri * cfg.gamma_fmri + loss_image * cfg.gamma_image
    value = total.item()
    if not math.isfinite(value):
        raise NumericalError(f"phase-2 loss is not finite: {value}")
    backward(total)
    opt.step(lr)
    return {"loss_fmri": loss_fmri.item(), "loss_image": loss_image.item(), "loss": value}


def train_phase2(voxels: np.ndarray, images: np.ndarray, phase1_base: str,
                 cfg: Phase2Config, seed: int, out_base: str | None = None,
                 encoder_out_base: str | None = None,
                 log_path: str | None = None,
                 image_log_path: str | None = None) -> tuple[CrossModalModel, list[dict]]:
    """Image pretraining + joint tuning from a phase-1 checkpoint."""
    fmri, phase1_cfg = load_phase1_model(phase1_base)
    image = pretrain_image_mae(images, cfg, seed, image_log_path)
    image.set_trainable(True)
    for p in image.decoder_params("").values():
        p.requires_grad = False
        p.grad = None
    model = CrossModalModel(child_rng(seed, "phase2", "init"), fmri, image)
    # frozen params carry requires_grad=False; also keep them out of the optimizer
    for p in model.image.decoder_params("image.").values():
        p.requires_grad = False
    opt = AdamW(trainable_phase2_params(model), lr=cfg.lr, weight_decay=cfg.weight_decay)
    step_rng = child_rng(seed, "phase2", "steps")
    order_rng = child_rng(seed, "phase2", "order")
    n = voxels.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss_fmri", "loss_image", "loss", "lr"])
    history: list[dict] = []
    step = 0
    for _ in range(cfg.epochs):
        sums = {"loss_fmri": 0.0, "loss_image": 0.0, "loss": 0.0}
        lr = cfg.lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            metrics = phase2_step(model, opt, voxels[idx], images[idx], cfg, step_rng, lr)
            for key in sums:
                sums[key] += metrics[key]
            step += 1
        means = {key: val / steps_per_epoch for key, val in sums.items()}
        means["step"] = step
        means["lr"] = lr
        history.append(means)
        log.add(step, means["loss_fmri"], means["loss_image"], means["loss"], lr)
    if out_base is not None:
        meta = {"stage": "xmodal", "n_voxels": voxels.shape[1],
                "image_size": images.shape[1], "channels": images.shape[3],
                "phase1_config": asdict(phase1_cfg), "config": asdict(cfg)}
        save_checkpoint(out_base, model.named_params(), meta)
    if encoder_out_base is not None:
        save_encoder_checkpoint(encoder_out_base, model.fmri, phase1_cfg, voxels.shape[1])
    return model, history


def save_encoder_checkpoint(base: str, fmri: FmriMae, phase1_cfg: Phase1Config,
                            n_voxels: int) -> None:
    """Export only the voxel encoder subtree (the representation artifact)."""
    meta = {"stage": "voxel_encoder", "n_voxels": n_voxels,
            "config": asdict(phase1_cfg)}
    save_checkpoint(base, fmri.encoder_params(), meta)


def load_encoder(base: str) -> tuple[FmriMae, Phase1Config]:
    """Rebuild a voxel autoencoder and load the exported encoder subtree.

    Decoder weights stay at a fixed init and are marked non-trainable; only
    the encoding pathway of the returned model is meaningful.
    """
    arrays, meta = load_checkpoint(base)
    cfg = Phase1Config(**meta["config"])
    model = build_fmri_mae(cfg, meta["n_voxels"], child_rng(0, "rebuild"))
    assign_params(model.encoder_params(), arrays)
    for p in model.decoder_params().values():
        p.requires_grad = False
    return model, cfg
