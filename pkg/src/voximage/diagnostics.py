"""Finite-difference gradient battery over representative model blocks.

Each entry builds a tiny instance of one differentiable component, runs
the central-difference checker against the tape gradients, and reports
the worst relative error.  The battery is the CLI's quick self-test for
a new install or a modified kernel.
"""

from __future__ import annotations

import numpy as np

from .contrastive import cross_contrastive_loss, self_contrastive_loss
from .models.denoiser import CondUNet
from .models.mae import FmriMae
from .nn import CrossAttention, Linear, TransformerBlock, TransformerConfig
from .rng import child_rng
from .tensor import Tensor, gelu, grad_check, layernorm, matmul, tmean

DEFAULT_TOL = 1e-4


def _mlp_entry(rng):
    lin1 = Linear(rng, 5, 7)
    lin2 = Linear(rng, 7, 3)
    gamma = Tensor(np.ones(7), requires_grad=True)
    beta = Tensor(np.zeros(7), requires_grad=True)
    x = rng.standard_normal((4, 5))

    def loss_fn():
        h = layernorm(gelu(lin1(Tensor(x))), gamma, beta)
        return tmean(lin2(h) ** 2)

    params = dict(lin1.named_params("lin1."), **lin2.named_params("lin2."))
    params["gamma"], params["beta"] = gamma, beta
    return loss_fn, params


def _attention_entry(rng):
    block = TransformerBlock(rng, 8, 2)
    x = rng.standard_normal((2, 5, 8))

    def loss_fn():
        return tmean(block(Tensor(x)) ** 2)

    return loss_fn, block.named_params("block.")


def _cross_attention_entry(rng):
    ca = CrossAttention(rng, q_dim=6, kv_dim=8, d_k=8)
    q = rng.standard_normal((2, 4, 6))
    kv = rng.standard_normal((2, 3, 8))

    def loss_fn():
        return tmean(ca(Tensor(q), Tensor(kv)) ** 2)

    return loss_fn, ca.named_params("ca.")


def _masked_autoencoder_entry(rng):
    enc = TransformerConfig(dim=16, depth=1, heads=2, mlp_ratio=2.0)
    dec = TransformerConfig(dim=16, depth=1, heads=2, mlp_ratio=2.0)
    model = FmriMae(rng, n_voxels=24, patch=4, enc=enc, dec=dec)
    voxels = rng.standard_normal((2, 24))
    mask_rng_state = rng.integers(0, 2**31)

    def loss_fn():
        recon, _ = model.reconstruct(voxels, 0.5, np.random.default_rng(mask_rng_state))
        return tmean((recon - Tensor(voxels)) ** 2)

    return loss_fn, model.named_params("mae.")


def _contrastive_entry(rng):
    proj = Linear(rng, 6, 6)
    a = rng.standard_normal((3, 6))
    b = rng.standard_normal((3, 6))

    def loss_fn():
        d1 = proj(Tensor(a))
        d2 = proj(Tensor(b))
        lc = cross_contrastive_loss(d1, d2, tau=0.5, normalize=True)
        ls = self_contrastive_loss(d1, Tensor(a), tau=0.5, normalize=True)
        return lc + ls

    return loss_fn, proj.named_params("proj.")


def _denoiser_entry(rng):
    model = CondUNet(rng, latent_channels=2, latent_size=4, base=4,
                     temb_dim=8, cond_dim=6, n_classes=3, max_t=10)
    z = rng.standard_normal((2, 2, 4, 4))
    t = np.array([1, 7])
    labels = np.array([0, 2])
    eps = rng.standard_normal(z.shape)

    def loss_fn():
        pred = model(z, t, model.class_condition(labels))
        return tmean((pred - Tensor(eps)) ** 2)

    # The output conv starts at zero, where MSE gradients w.r.t. many
    # upstream weights vanish; perturb it so the check sees real signal.
    params = model.named_params("unet.")
    params["unet.out_conv.w"].data[:] = 0.01 * rng.standard_normal(
        params["unet.out_conv.w"].data.shape)
    return loss_fn, params


_ENTRIES = (
    ("mlp_layernorm_gelu", _mlp_entry),
    ("transformer_block", _attention_entry),
    ("cross_attention", _cross_attention_entry),
    ("masked_autoencoder", _masked_autoencoder_entry),
    ("contrastive_losses", _contrastive_entry),
    ("conditioned_denoiser", _denoiser_entry),
)


def gradient_battery(seed: int = 0, max_coords: int = 24) -> list[tuple[str, float]]:
    """Worst finite-difference relative error per block, in battery order."""
    results = []
    for name, builder in _ENTRIES:
        rng = child_rng(seed, "gradcheck", name)
        loss_fn, params = builder(rng)
        report = grad_check(loss_fn, params, max_coords_per_param=max_coords,
                            rng=child_rng(seed, "gradcheck", name, "coords"))
        results.append((name, report.max_rel_err))
    return results
