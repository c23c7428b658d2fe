"""Phase 1: masked-autoencoder pretraining of the voxel encoder with the
double contrastive objective.

Each step corrupts the input vectors once (random sparsification), decodes
them under two independent random maskings, and minimises
``gamma_cross * L_cross + gamma_self * L_self`` where L_cross ties the two
decodings of a sample together and L_self ties each decoding to its
original (uncorrupted) vector.  L_self is averaged over the two decodings.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..contrastive import cross_contrastive_loss, self_contrastive_loss
from ..errors import ConfigError, NumericalError
from ..masking import random_sparsify
from ..models.mae import FmriMae
from ..nn import TransformerConfig
from ..rng import child_rng
from ..tensor import AdamW, Tensor, WarmupCosine, backward, save_checkpoint
from .common import CsvLog, epoch_batches


@dataclass
class Phase1Config:
    """Architecture and optimisation settings for voxel-encoder pretraining."""
    patch: int = 16
    dim: int = 64
    enc_depth: int = 4
    dec_depth: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    mask_ratio: float = 0.75
    sparsify_fraction: float = 0.2
    tau: float = 0.1
    gamma_cross: float = 1.0
    gamma_self: float = 1.0
    normalize_sim: bool = True
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_frac: float = 0.05

    def __post_init__(self):
        check_positive(patch=self.patch, dim=self.dim, enc_depth=self.enc_depth,
                       dec_depth=self.dec_depth, heads=self.heads, tau=self.tau,
                       epochs=self.epochs, batch_size=self.batch_size, lr=self.lr)
        check_unit_open(mask_ratio=self.mask_ratio)
        check_unit_half_open(sparsify_fraction=self.sparsify_fraction,
                             warmup_frac=self.warmup_frac)
        check_nonnegative(gamma_cross=self.gamma_cross, gamma_self=self.gamma_self,
                          weight_decay=self.weight_decay, mlp_ratio=self.mlp_ratio)
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


def check_positive(**named) -> None:
    for name, value in named.items():
        if not value > 0:
            raise ConfigError(f"{name} must be positive, got {value}")


def check_nonnegative(**named) -> None:
    for name, value in named.items():
        if value < 0:
            raise ConfigError(f"{name} must not be negative, got {value}")


def check_unit_open(**named) -> None:
    for name, value in named.items():
        if not 0.0 < value < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {value}")


def check_unit_half_open(**named) -> None:
    for name, value in named.items():
        if not 0.0 <= value < 1.0:
            raise ConfigError(f"{name} must be in [0, 1), got {value}")


def build_fmri_mae(cfg: Phase1Config, n_voxels: int, rng: np.random.Generator) -> FmriMae:
    enc = TransformerConfig(cfg.dim, cfg.enc_depth, cfg.heads, cfg.mlp_ratio)
    dec = TransformerConfig(cfg.dim, cfg.dec_depth, cfg.heads, cfg.mlp_ratio)
    return FmriMae(rng, n_voxels, cfg.patch, enc, dec)


def forward_twice(model: FmriMae, voxels: np.ndarray, cfg: Phase1Config,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Two decodings of one corrupted batch under independent maskings."""
    corrupted = random_sparsify(voxels, cfg.sparsify_fraction, rng)
    first, _ = model.reconstruct(corrupted, cfg.mask_ratio, rng)
    second, _ = model.reconstruct(corrupted, cfg.mask_ratio, rng)
    return first, second


def phase1_losses(model: FmriMae, voxels: np.ndarray, cfg: Phase1Config,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (L_cross, L_self, weighted total) for one batch."""
    first, second = forward_twice(model, voxels, cfg, rng)
    original = Tensor(voxels)
    l_cross = cross_contrastive_loss(first, second, cfg.tau, cfg.normalize_sim)
    l_self_1 = self_contrastive_loss(first, original, cfg.tau, cfg.normalize_sim)
    l_self_2 = self_contrastive_loss(second, original, cfg.tau, cfg.normalize_sim)
    l_self = (l_self_1 + l_self_2) * 0.5
    total = l_cross * cfg.gamma_cross + l_self * cfg.gamma_self
    return l_cross, l_self, total


def phase1_step(model: FmriMae, opt: AdamW, voxels: np.ndarray, cfg: Phase1Config,
                rng: np.random.Generator, lr: float | None = None) -> dict[str, float]:
    """One optimisation step; returns the scalar losses."""
    opt.zero_grad()
    l_cross, l_self, total = phase1_losses(model, voxels, cfg, rng)
    value = total.item()
    if not math.isfinite(value):
        raise NumericalError(f"phase-1 loss is not finite: {value}")
    backward(total)
    opt.step(lr)
    return {"loss_cross": l_cross.item(), "loss_self": l_self.item(), "loss": value}


def train_phase1(voxels: np.ndarray, cfg: Phase1Config, seed: int,
                 out_base: str | None = None,
                 log_path: str | None = None) -> tuple[FmriMae, list[dict]]:
    """Full pretraining loop over [N, n_voxels] vectors.

    Returns the model and one metrics dict per epoch; optionally writes the
    checkpoint to out_base and a per-epoch CSV log.
    """
    model = build_fmri_mae(cfg, voxels.shape[1], child_rng(seed, "phase1", "init"))
    step_rng = child_rng(seed, "phase1", "steps")
    order_rng = child_rng(seed, "phase1", "order")
    opt = AdamW(model.named_params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = voxels.shape[0]
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    sched = WarmupCosine(cfg.lr, cfg.epochs * steps_per_epoch, cfg.warmup_frac)
    log = CsvLog(log_path, ["step", "loss_cross", "loss_self", "loss", "lr"])
    history: list[dict] = []
    step = 0
    for _ in range(cfg.epochs):
        sums = {"loss_cross": 0.0, "loss_self": 0.0, "loss": 0.0}
        lr = cfg.lr
        for idx in epoch_batches(n, cfg.batch_size, order_rng):
            lr = sched.lr(step)
            metrics = phase1_step(model, opt, voxels[idx], cfg, step_rng, lr)
            for key in sums:
                sums[key] += metrics[key]
            step += 1
        means = {key: val / steps_per_epoch for key, val in sums.items()}
        means["step"] = step
        means["lr"] = lr
        history.append(means)
        log.add(step, means["loss_cross"], means["loss_self"], means["loss"], lr)
    if out_base is not None:
        save_phase1_checkpoint(out_base, model, cfg, voxels.shape[1])
    return model, history


def save_phase1_checkpoint(base: str, model: FmriMae, cfg: Phase1Config,
                           n_voxels: int) -> None:
    meta = {"stage": "phase1", "n_voxels": n_voxels, "config": asdict(cfg)}
    save_checkpoint(base, model.named_params(), meta)


def load_phase1_model(base: str) -> tuple[FmriMae, Phase1Config]:
    """Rebuild the voxel autoencoder from a phase-1 checkpoint."""
    from ..tensor import assign_params, load_checkpoint
    arrays, meta = load_checkpoint(base)
    cfg = Phase1Config(**meta["config"])
    model = build_fmri_mae(cfg, meta["n_voxels"], child_rng(0, "rebuild"))
    assign_params(model.named_params(), arrays)
    return model, cfg
