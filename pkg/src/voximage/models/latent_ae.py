"""Convolutional autoencoder that maps images to the diffusion latent space.

Two stride-2 stages compress a [H, H, 3] image to a [latent_channels,
H/4, H/4] map; the decoder mirrors them with nearest-neighbour upsampling.
``latent_scale`` (the std of encoded training latents, stored after
training) normalises latents to unit variance for the diffusion model.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..nn import Conv2d, Module
from ..tensor import core as ops
from ..tensor.core import Tensor


def to_chw(images: Tensor) -> Tensor:
    return ops.transpose(images, (0, 3, 1, 2))


def to_hwc(maps: Tensor) -> Tensor:
    return ops.transpose(maps, (0, 2, 3, 1))


class ConvLatentAE(Module):
    def __init__(self, rng: np.random.Generator, image_size: int = 32,
                 channels: int = 32, latent_channels: int = 4):
        if image_size % 4:
            raise ShapeError(f"image size {image_size} must be divisible by 4")
        self.enc1 = Conv2d(rng, 3, channels, 3, stride=2, pad=1)
        self.enc2 = Conv2d(rng, channels, 2 * channels, 3, stride=2, pad=1)
        self.enc3 = Conv2d(rng, 2 * channels, latent_channels, 3, stride=1, pad=1)
        self.dec1 = Conv2d(rng, latent_channels, 2 * channels, 3, stride=1, pad=1)
        self.dec2 = Conv2d(rng, 2 * channels, channels, 3, stride=1, pad=1)
        self.dec3 = Conv2d(rng, channels, channels, 3, stride=1, pad=1)
        self.out = Conv2d(rng, channels, 3, 3, stride=1, pad=1)
        self.image_size = image_size
        self.latent_channels = latent_channels
        self.latent_size = image_size // 4
        self.latent_scale = 1.0

    def encode(self, images: Tensor) -> Tensor:
        """[B, H, H, 3] -> [B, latent_channels, H/4, H/4]."""
        x = to_chw(images)
        x = ops.gelu(self.enc1(x))
        x = ops.gelu(self.enc2(x))
        return self.enc3(x)

    def decode(self, z: Tensor) -> Tensor:
        """[B, latent_channels, H/4, H/4] -> [B, H, H, 3]."""
        x = ops.gelu(self.dec1(z))
        x = ops.upsample_nearest2x(x)
        x = ops.gelu(self.dec2(x))
        x = ops.upsample_nearest2x(x)
        x = ops.gelu(self.dec3(x))
        return to_hwc(self.out(x))

    def __call__(self, images: Tensor) -> Tensor:
        return self.decode(self.encode(images))

    def encode_np(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        """Inference-mode encoding of an image array, batched."""
        from ..tensor.core import no_grad
        outs = []
        with no_grad():
            for i in range(0, images.shape[0], batch):
                outs.append(self.encode(Tensor(images[i:i + batch])).data)
        return np.concatenate(outs, axis=0)

    def decode_np(self, latents: np.ndarray, batch: int = 64) -> np.ndarray:
        """Inference-mode decoding, clipped to the [0, 1] image range."""
        from ..tensor.core import no_grad
        outs = []
        with no_grad():
            for i in range(0, latents.shape[0], batch):
                outs.append(self.decode(Tensor(latents[i:i + batch])).data)
        return np.clip(np.concatenate(outs, axis=0), 0.0, 1.0)
