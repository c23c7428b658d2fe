"""Conditional denoiser over diffusion latents.

A small two-resolution UNet.  Conditioning is applied twice per the
double-conditioning scheme: cross-attention blocks at every resolution read
the condition token sequence, and the mean-pooled condition is projected
and added to the time embedding.  The output convolution is zero-initialised
so an untrained model predicts zero noise exactly.

During pretraining the condition tokens come from a learned class-embedding
table; during fine-tuning they come from the voxel encoder.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..nn import (ChannelNorm, Conv2d, CrossAttention, Linear, Module,
                  TimeEmbedding)
from ..tensor import core as ops
from ..tensor.core import Tensor


class ResBlock(Module):
    """Norm-GELU-conv twice, with the time embedding added between convs."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, temb_dim: int):
        self.norm1 = ChannelNorm(cin)
        self.conv1 = Conv2d(rng, cin, cout)
        self.temb_proj = Linear(rng, temb_dim, cout)
        self.norm2 = ChannelNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout)
        self.skip = Conv2d(rng, cin, cout, k=1, stride=1, pad=0) if cin != cout else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.gelu(self.norm1(x)))
        b, c = temb.shape[0], h.shape[1]
        h = h + ops.reshape(self.temb_proj(temb), (b, c, 1, 1))
        h = self.conv2(ops.gelu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class CrossAttnBlock(Module):
    """Residual cross-attention from spatial positions onto condition tokens."""

    def __init__(self, rng: np.random.Generator, ch: int, cond_dim: int):
        self.norm = ChannelNorm(ch)
        self.attn = CrossAttention(rng, q_dim=ch, kv_dim=cond_dim, d_k=ch)
        # Zero-init output projection: the block is an identity until trained.
        self.proj = Linear(rng, ch, ch, zero_init=True)

    def __call__(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        q = ops.reshape(ops.transpose(self.norm(x), (0, 2, 3, 1)), (b, h * w, c))
        read = self.proj(self.attn(q, cond))
        read = ops.transpose(ops.reshape(read, (b, h, w, c)), (0, 3, 1, 2))
        return x + read


class CondUNet(Module):
    """Noise predictor eps(z_t, t, cond) on [B, C, S, S] latents."""

    def __init__(self, rng: np.random.Generator, latent_channels: int = 4,
                 latent_size: int = 8, base: int = 32, temb_dim: int = 64,
                 cond_dim: int = 64, n_classes: int = 10, max_t: int = 1000):
        if latent_size % 2:
            raise ShapeError(f"latent size {latent_size} must be even")
        self.time_embed = TimeEmbedding(rng, temb_dim, max_t)
        self.cond_pool = Linear(rng, cond_dim, temb_dim)
        self.class_emb = Tensor(rng.normal(0.0, 0.02, size=(n_classes, cond_dim)),
                                requires_grad=True)
        self.conv_in = Conv2d(rng, latent_channels, base)
        self.res_down = ResBlock(rng, base, base, temb_dim)
        self.attn_down = CrossAttnBlock(rng, base, cond_dim)
        self.down = Conv2d(rng, base, 2 * base, 3, stride=2, pad=1)
        self.res_mid1 = ResBlock(rng, 2 * base, 2 * base, temb_dim)
        self.attn_mid = CrossAttnBlock(rng, 2 * base, cond_dim)
        self.res_mid2 = ResBlock(rng, 2 * base, 2 * base, temb_dim)
        self.res_up = ResBlock(rng, 3 * base, base, temb_dim)
        self.attn_up = CrossAttnBlock(rng, base, cond_dim)
        self.out_norm = ChannelNorm(base)
        self.out_conv = Conv2d(rng, base, latent_channels, zero_init=True)
        self.latent_channels = latent_channels
        self.latent_size = latent_size
        self.cond_dim = cond_dim
        self.max_t = max_t

    def class_condition(self, labels: np.ndarray) -> Tensor:
        """One condition token per sample from the class-embedding table."""
        emb = ops.embedding(self.class_emb, np.asarray(labels, dtype=np.int64))
        return ops.reshape(emb, (emb.shape[0], 1, emb.shape[1]))

    def __call__(self, z_t, t, cond: Tensor) -> Tensor:
        z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(f"denoiser expects [B, {self.latent_channels}, S, S], got {z.shape}")
        if cond.ndim != 3 or cond.shape[2] != self.cond_dim:
            raise ShapeError(f"condition must be [B, L, {self.cond_dim}], got {cond.shape}")
        t = np.full(z.shape[0], t, dtype=np.int64) if np.ndim(t) == 0 else np.asarray(t)
        temb = self.time_embed(t) + self.cond_pool(ops.tmean(cond, axis=1))
        h0 = self.conv_in(z)
        h1 = self.attn_down(self.res_down(h0, temb), cond)
        d = self.down(h1)
        m = self.res_mid1(d, temb)
        m = self.attn_mid(m, cond)
        m = self.res_mid2(m, temb)
        u = ops.concat([ops.upsample_nearest2x(m), h1], axis=1)
        u = self.attn_up(self.res_up(u, temb), cond)
        return self.out_conv(ops.gelu(self.out_norm(u)))

    def _subset(self, attrs: tuple[str, ...], prefix: str = "") -> dict[str, Tensor]:
        params = self.named_params(prefix)
        keep = tuple(f"{prefix}{a}" for a in attrs)
        return {n: p for n, p in params.items()
                if any(n == k or n.startswith(k + ".") for k in keep)}

    def cross_attention_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self._subset(("attn_down", "attn_mid", "attn_up"), prefix)

    def conditioning_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self._subset(("cond_pool",), prefix)
