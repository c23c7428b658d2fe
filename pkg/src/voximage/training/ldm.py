"""Latent diffusion training: class-conditioned pretraining, voxel-encoder
fine-tuning, and generation.

Pretraining teaches the denoiser the latent distribution with cheap class
embeddings as condition tokens.  Fine-tuning swaps the condition source to
the voxel encoder and trains only the cross-attention blocks, the
condition-to-time projection, and the voxel encoder itself; everything else
in the denoiser stays frozen.  Generation encodes held-out voxel vectors,
samples latents with DDPM or PLMS, and decodes through the latent
autoencoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..diffusion import NoiseSchedule, ddpm_sample, plms_sample, q_sample
from ..errors import ConfigError, NumericalError
from ..models.denoiser import CondUNet
from ..models.latent_ae import ConvLatentAE
from ..models.mae import FmriMae
from ..rng import child_rng
from ..tensor import (AdamW, Tensor, WarmupCosine, assign_params, backward,
                      load_checkpoint, no_grad, save_checkpoint)
from .common import CsvLog, epoch_batches
from .phase1 import (Phase1Config, build_fmri_mae, check_nonnegative,
                     check_positive, check_unit_half_open)
from .phase2 import load_encoder


@dataclass
class LdmConfig:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 32
    temb_dim: int = 64
    pretrain_epochs: int = 200
    finetune_epochs: int = 80
    batch_size: int = 32
    pretrain_lr: float = 1e-3
    finetune_lr: float = 5e-4
    weight_decay: float = 0.01
    warmup_frac: float = 0.05
    finetune_pairs: int = 256

    def __post_init__(self):
        check_positive(timesteps=self.timesteps, base_channels=self.base_channels,
                       temb_dim=self.temb_dim, pretrain_epochs=self.pretrain_epochs,
                       finetune_epochs=self.finetune_epochs,
                       batch_size=self.batch_size, pretrain_lr=self.pretrain_lr,
                       finetune_lr=self.finetune_lr,
                       finetune_pairs=self.finetune_pairs)
        check_unit_half_open(warmup_frac=self.warmup_frac)
        check_nonnegative(weight_decay=self.weight_decay)
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ConfigError(
                f"need 0 < beta_start <= beta_end < 1, got "
                f"{self.beta_start}, {self.beta_end}")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.timesteps, self.beta_start, self.beta_end)


def build_denoiser(cfg: LdmConfig, latent_channels: int, latent_size: int,
                   cond_dim: int, n_classes: int, rng: np.random.Generator) -> CondUNet:
    return CondUNet(rng, latent_channels, latent_size, cfg.base_channels,
                    cfg.temb_dim, cond_dim, n_classes, max_t=cfg.timesteps)


def diffusion_loss(model: CondUNet, latents: np.ndarray, t: np.ndarray,
                   eps: np.ndarray, cond: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Noise-prediction MSE on latents diffused to per-sample levels t."""
    z_t = q_sample(latents, t, eps, schedule)
    eps_hat = model(z_t, t, cond)
    return ((eps_hat - Tensor(eps)) ** 2).mean()


def pretrain_ldm(latents: np.ndarray, labels: np.ndarray, n_classes: int,
                 cond_dim: int, cfg: LdmConfig, seed: int,
                 out_base: str | None = None,
                 log_path: str | None = None) -> CondUNet:
    """Class-conditioned denoiser training on unit-variance latents."""
    schedule = cfg.schedule()
    model = build_denoiser(cfg, latents.shape[1], latents.shape[2], cond_dim,
                           n_classes, child_rng(seed, "ldm-pre", "init"))
    step_rng = child_rng(seed, "ldm-pre", "steps")
    order_rng = child_rng(seed, "ldm-pre", "order")
    opt = AdamW(model.named_params(), lr=cfg.pretrain_lr, weight_decay=cfg.weight_decay)
    n = latents.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.pretrain_lr, cfg.pretrain_epochs * steps_per_epoch,
                         cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss", "lr"])
    step = 0
    for _ in range(cfg.pretrain_epochs):
        total, lr = 0.0, cfg.pretrain_lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            opt.zero_grad()
            z0 = latents[idx]
            t = step_rng.integers(0, schedule.T, size=z0.shape[0])
            eps = step_rng.standard_normal(z0.shape)
            cond = model.class_condition(labels[idx])
            loss = diffusion_loss(model, z0, t, eps, cond, schedule)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"diffusion pretrain loss is not finite: {value}")
            backward(loss)
            opt.step(lr)
            total += value
            step += 1
        log.add(step, total / steps_per_epoch, lr)
    if out_base is not None:
        save_denoiser(out_base, model, cfg, n_classes, stage="ldm_pretrained")
    return model


def finetune_trainable_params(model: CondUNet, encoder: FmriMae) -> dict[str, Tensor]:
    """Cross-attention blocks, condition-to-time projection, voxel encoder."""
    params: dict[str, Tensor] = {}
    params.update(model.cross_attention_params("denoiser."))
    params.update(model.conditioning_params("denoiser."))
    params.update(encoder.encoder_params("encoder."))
    return params


def finetune_ldm(latents: np.ndarray, voxels: np.ndarray, encoder: FmriMae,
                 model: CondUNet, cfg: LdmConfig, seed: int,
                 out_base: str | None = None, log_path: str | None = None,
                 encoder_cfg: Phase1Config | None = None) -> tuple[CondUNet, list[dict]]:
    """Condition the pretrained denoiser on voxel encodings.

    Only the cross-attention blocks, the condition pooling projection, and
    the voxel encoder train; all other denoiser parameters are frozen and
    must come out bit-identical.
    """
    if latents.shape[0] != voxels.shape[0]:
        raise ConfigError(
            f"finetune needs paired data, got {latents.shape[0]} latents "
            f"vs {voxels.shape[0]} voxel vectors")
    if encoder.dim != model.cond_dim:
        raise ConfigError(
            f"voxel encoder token width {encoder.dim} does not match the "
            f"denoiser condition width {model.cond_dim}")
    schedule = cfg.schedule()
    subset_rng = child_rng(seed, "ldm-ft", "subset")
    n_pairs = min(cfg.finetune_pairs, latents.shape[0])
    keep = np.sort(subset_rng.permutation(latents.shape[0])[:n_pairs])
    latents, voxels = latents[keep], voxels[keep]

    trainable = finetune_trainable_params(model, encoder)
    for name, p in model.named_params("denoiser.").items():
        if name not in trainable:
            p.requires_grad = False
            p.grad = None
    for name, p in encoder.named_params("encoder.").items():
        if name not in trainable:
            p.requires_grad = False
            p.grad = None

    opt = AdamW(trainable, lr=cfg.finetune_lr, weight_decay=cfg.weight_decay)
    step_rng = child_rng(seed, "ldm-ft", "steps")
    order_rng = child_rng(seed, "ldm-ft", "order")
    n = latents.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.finetune_lr, cfg.finetune_epochs * steps_per_epoch,
                         cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss", "lr"])
    history: list[dict] = []
    step = 0
    for _ in range(cfg.finetune_epochs):
        total, lr = 0.0, cfg.finetune_lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            opt.zero_grad()
            z0 = latents[idx]
            t = step_rng.integers(0, schedule.T, size=z0.shape[0])
            eps = step_rng.standard_normal(z0.shape)
            cond = encoder.encode_full(voxels[idx])
            loss = diffusion_loss(model, z0, t, eps, cond, schedule)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"diffusion finetune loss is not finite: {value}")
            backward(loss)
            opt.step(lr)
            total += value
            step += 1
        row = {"step": step, "loss": total / steps_per_epoch, "lr": lr}
        history.append(row)
        log.add(step, row["loss"], lr)
    if out_base is not None and encoder_cfg is not None:
        save_finetuned(out_base, model, encoder, cfg, encoder_cfg, voxels.shape[1])
    return model, history


def conditioning_gap(model: CondUNet, encoder: FmriMae, latents: np.ndarray,
                     voxels: np.ndarray, schedule: NoiseSchedule, seed: int,
                     n_passes: int = 4) -> dict:
    """Average denoising loss with matched vs mismatched voxel pairing.

    Paired comparison: both pairings see the same noise draws and noise
    levels, so the difference isolates the conditioning signal.  The
    mismatched pairing rolls the voxel batch by one, so every latent gets
    a wrong partner.  A positive gap means matched conditioning helps.

    Parameters
    ----------
    latents, voxels : paired arrays over the evaluation split.
    n_passes : independent (t, eps) redraws averaged per pairing.

    Returns
    -------
    dict with matched_loss, shuffled_loss, and gap = shuffled - matched.
    """
    if latents.shape[0] != voxels.shape[0]:
        raise ConfigError(
            f"paired comparison needs paired data, got {latents.shape[0]} "
            f"latents vs {voxels.shape[0]} voxel vectors")
    if latents.shape[0] < 2:
        raise ConfigError("paired comparison needs at least 2 samples")
    rng = child_rng(seed, "cond-gap")
    matched = shuffled = 0.0
    with no_grad():
        cond_m = encoder.encode_full(voxels)
        cond_s = encoder.encode_full(np.roll(voxels, 1, axis=0))
        for _ in range(n_passes):
            t = rng.integers(0, schedule.T, size=latents.shape[0])
            eps = rng.standard_normal(latents.shape)
            matched += diffusion_loss(model, latents, t, eps, cond_m, schedule).item()
            shuffled += diffusion_loss(model, latents, t, eps, cond_s, schedule).item()
    matched /= n_passes
    shuffled /= n_passes
    return {"matched_loss": matched, "shuffled_loss": shuffled,
            "gap": shuffled - matched}


# ---------------------------------------------------------------------------
# checkpoint helpers
# ---------------------------------------------------------------------------

def save_denoiser(base: str, model: CondUNet, cfg: LdmConfig, n_classes: int,
                  stage: str) -> None:
    meta = {"stage": stage, "config": asdict(cfg),
            "arch": {"latent_channels": model.latent_channels,
                     "latent_size": model.latent_size,
                     "cond_dim": model.cond_dim, "n_classes": n_classes}}
    save_checkpoint(base, model.named_params(), meta)


def load_denoiser(base: str) -> tuple[CondUNet, LdmConfig]:
    arrays, meta = load_checkpoint(base)
    cfg = LdmConfig(**meta["config"])
    arch = meta["arch"]
    model = build_denoiser(cfg, arch["latent_channels"], arch["latent_size"],
                           arch["cond_dim"], arch["n_classes"], child_rng(0, "rebuild"))
    assign_params(model.named_params(), arrays)
    return model, cfg


def save_finetuned(base: str, model: CondUNet, encoder: FmriMae, cfg: LdmConfig,
                   encoder_cfg: Phase1Config, n_voxels: int) -> None:
    """One artifact holding the tuned denoiser plus its condition encoder."""
    arrays: dict[str, Tensor] = {}
    arrays.update(model.named_params("denoiser."))
    arrays.update(encoder.encoder_params("encoder."))
    meta = {"stage": "ldm_finetuned", "config": asdict(cfg),
            "arch": {"latent_channels": model.latent_channels,
                     "latent_size": model.latent_size,
                     "cond_dim": model.cond_dim,
                     "n_classes": model.class_emb.shape[0]},
            "encoder": {"n_voxels": n_voxels, "config": asdict(encoder_cfg)}}
    save_checkpoint(base, arrays, meta)


def load_finetuned(base: str) -> tuple[CondUNet, FmriMae, LdmConfig]:
    arrays, meta = load_checkpoint(base)
    cfg = LdmConfig(**meta["config"])
    arch = meta["arch"]
    model = build_denoiser(cfg, arch["latent_channels"], arch["latent_size"],
                           arch["cond_dim"], arch["n_classes"], child_rng(0, "rebuild"))
    assign_params(model.named_params(),
                  {k[len("denoiser."):]: v for k, v in arrays.items()
                   if k.startswith("denoiser.")})
    enc_cfg = Phase1Config(**meta["encoder"]["config"])
    encoder = build_fmri_mae(enc_cfg, meta["encoder"]["n_voxels"], child_rng(0, "rebuild"))
    assign_params(encoder.encoder_params(),
                  {k[len("encoder."):]: v for k, v in arrays.items()
                   if k.startswith("encoder.")})
    for p in encoder.decoder_params().values():
        p.requires_grad = False
    return model, encoder, cfg


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

SAMPLERS = {"ddpm": ddpm_sample, "plms": plms_sample}

# The denoiser works on unit-variance latents, so the clean-latent estimate
# implied by any eps prediction should stay within a few standard
# deviations.  Clamping that estimate (and folding the clamp back into the
# returned eps) keeps small prediction errors at high noise levels from
# compounding across the reverse chain.
PRED_LATENT_CLAMP = 3.0


def clamped_eps_fn(model: CondUNet, cond: Tensor, schedule: NoiseSchedule,
                   clamp: float = PRED_LATENT_CLAMP):
    """Noise callback whose implied clean latent is clipped to +-clamp."""
    def eps_fn(z, t):
        eps_hat = model(z, t, cond).data
        abar = schedule.alpha_bars[t]
        pred_z0 = (z - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
        pred_z0 = np.clip(pred_z0, -clamp, clamp)
        return (z - math.sqrt(abar) * pred_z0) / math.sqrt(1.0 - abar)
    return eps_fn


def generate_images(voxels: np.ndarray, encoder: FmriMae, model: CondUNet,
                    latent_ae: ConvLatentAE, cfg: LdmConfig, sampler: str,
                    steps: int, seed: int) -> np.ndarray:
    """Images [M, H, H, 3] in [0, 1] decoded from sampled latents.

    All requested samples are drawn as one batch, so the output is a pure
    function of (voxels, weights, sampler, steps, seed).
    """
    if sampler not in SAMPLERS:
        raise ConfigError(f"unknown sampler '{sampler}', choose from {sorted(SAMPLERS)}")
    schedule = cfg.schedule()
    with no_grad():
        cond = encoder.encode_full(voxels)
        shape = (voxels.shape[0], model.latent_channels,
                 model.latent_size, model.latent_size)
        z = SAMPLERS[sampler](clamped_eps_fn(model, cond, schedule), shape,
                              schedule, steps, child_rng(seed, "generate"))
    return latent_ae.decode_np(z * latent_ae.latent_scale)
