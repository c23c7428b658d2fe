"""Masked autoencoders for voxel vectors and images.

Both modalities share one core: project patch tokens, add positions, encode
only the visible tokens, re-expand with a learned mask token at the masked
positions, then decode the full sequence back to patch space.  Encoder and
decoder run at the same width so a full-length encoder output can feed the
decoder directly (plain reconstruction) or after cross-modal fusion.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..masking import (MaskedSequence, full_visibility, patchify_image,
                       patchify_vector, random_mask, reassemble,
                       unpatchify_image)
from ..nn import LayerNorm, Linear, Module, TransformerBlock, TransformerConfig, init_normal
from ..tensor import core as ops
from ..tensor.core import Tensor

_ENC_ATTRS = ("patch_proj", "enc_pos", "enc_blocks", "enc_norm")
_DEC_ATTRS = ("mask_token", "dec_pos", "dec_blocks", "dec_norm", "head")


class MaskedAutoencoder(Module):
    """Token-level masked autoencoder; modality wrappers own patchification."""

    def __init__(self, rng: np.random.Generator, n_tokens: int, token_dim: int,
                 enc: TransformerConfig, dec: TransformerConfig, out_dim: int | None = None):
        if enc.dim != dec.dim:
            raise ShapeError(f"encoder dim {enc.dim} must equal decoder dim {dec.dim}")
        self.patch_proj = Linear(rng, token_dim, enc.dim)
        self.enc_pos = init_normal(rng, (1, n_tokens, enc.dim))
        self.enc_blocks = [TransformerBlock(rng, enc.dim, enc.heads, enc.mlp_ratio)
                           for _ in range(enc.depth)]
        self.enc_norm = LayerNorm(enc.dim)
        self.mask_token = init_normal(rng, (1, 1, dec.dim))
        self.dec_pos = init_normal(rng, (1, n_tokens, dec.dim))
        self.dec_blocks = [TransformerBlock(rng, dec.dim, dec.heads, dec.mlp_ratio)
                           for _ in range(dec.depth)]
        self.dec_norm = LayerNorm(dec.dim)
        self.head = Linear(rng, dec.dim, out_dim if out_dim is not None else token_dim)
        self.n_tokens = n_tokens
        self.dim = enc.dim

    def encode(self, tokens: Tensor, visible_indices: np.ndarray | None = None) -> Tensor:
        """Embed + position, gather visible tokens, run the encoder stack."""
        if tokens.shape[1] != self.n_tokens:
            raise ShapeError(f"expected {self.n_tokens} tokens, got {tokens.shape}")
        x = self.patch_proj(tokens) + self.enc_pos
        if visible_indices is not None:
            if visible_indices.shape[1] == 0:
                raise ShapeError("encoder needs at least one visible token")
            x = ops.take_tokens(x, visible_indices)
        for block in self.enc_blocks:
            x = block(x)
        return self.enc_norm(x)

    def expand_with_mask_tokens(self, h_visible: Tensor,
                                visible_indices: np.ndarray) -> Tensor:
        """Scatter encoded visible tokens into a mask-token canvas [B, P, dim]."""
        b = h_visible.shape[0]
        canvas = self.mask_token * Tensor(np.ones((b, self.n_tokens, 1)))
        return ops.scatter_tokens(canvas, visible_indices, h_visible)

    def decode(self, h_full: Tensor) -> Tensor:
        """Decode a full-length representation to patch predictions [B, P, out]."""
        if h_full.shape[1] != self.n_tokens:
            raise ShapeError(f"decoder expects {self.n_tokens} tokens, got {h_full.shape}")
        x = h_full + self.dec_pos
        for block in self.dec_blocks:
            x = block(x)
        return self.head(self.dec_norm(x))

    def forward_masked(self, tokens: Tensor, masked: MaskedSequence) -> Tensor:
        h = self.encode(tokens, masked.visible_indices)
        return self.decode(self.expand_with_mask_tokens(h, masked.visible_indices))

    def _subset(self, attrs: tuple[str, ...], prefix: str) -> dict[str, Tensor]:
        params = self.named_params(prefix)
        keep = tuple(f"{prefix}{a}" for a in attrs)
        return {n: p for n, p in params.items()
                if any(n == k or n.startswith(k + ".") for k in keep)}

    def encoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self._subset(_ENC_ATTRS, prefix)

    def decoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self._subset(_DEC_ATTRS, prefix)


class FmriMae(Module):
    """Masked autoencoder over voxel vectors, patched along the voxel axis."""

    def __init__(self, rng: np.random.Generator, n_voxels: int, patch: int,
                 enc: TransformerConfig, dec: TransformerConfig):
        padded = ((n_voxels + patch - 1) // patch) * patch
        self.core = MaskedAutoencoder(rng, padded // patch, patch, enc, dec)
        self.n_voxels = n_voxels
        self.patch = patch
        self.n_tokens = padded // patch
        self.dim = enc.dim

    def tokens(self, voxels: np.ndarray) -> Tensor:
        """Constant patch tokens [B, P, patch] from raw voxels [B, N]."""
        if voxels.ndim != 2 or voxels.shape[1] != self.n_voxels:
            raise ShapeError(f"expected voxels [B, {self.n_voxels}], got {voxels.shape}")
        toks, _ = patchify_vector(voxels, self.patch)
        return Tensor(toks)

    def mask(self, tokens: Tensor, ratio: float, rng: np.random.Generator) -> MaskedSequence:
        return random_mask(tokens, ratio, rng)

    def encode_full(self, voxels: np.ndarray) -> Tensor:
        """Unmasked encoding [B, P, dim]; the conditioning pathway."""
        return self.core.encode(self.tokens(voxels))

    def decode_to_vector(self, h_full: Tensor, masked: MaskedSequence) -> Tensor:
        return reassemble(masked, self.core.decode(h_full), self.n_voxels)

    def reconstruct(self, voxels: np.ndarray, ratio: float,
                    rng: np.random.Generator) -> tuple[Tensor, MaskedSequence]:
        """Mask, encode, decode; returns ([B, N] reconstruction, the masking)."""
        toks = self.tokens(voxels)
        masked = self.mask(toks, ratio, rng) if ratio > 0 else full_visibility(toks)
        h = self.core.encode(toks, masked.visible_indices)
        full = self.core.expand_with_mask_tokens(h, masked.visible_indices)
        return self.decode_to_vector(full, masked), masked

    def encoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self.core.encoder_params(f"{prefix}core.")

    def decoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self.core.decoder_params(f"{prefix}core.")


class ImageMae(Module):
    """Masked autoencoder over square RGB images, patched spatially."""

    def __init__(self, rng: np.random.Generator, image_size: int, patch: int,
                 channels: int, enc: TransformerConfig, dec: TransformerConfig):
        if image_size % patch:
            raise ShapeError(f"image size {image_size} not divisible by patch {patch}")
        g = image_size // patch
        self.core = MaskedAutoencoder(rng, g * g, patch * patch * channels, enc, dec)
        self.image_size = image_size
        self.patch = patch
        self.channels = channels
        self.n_tokens = g * g
        self.dim = enc.dim

    def tokens(self, images: np.ndarray) -> Tensor:
        """Constant patch tokens [B, P, p*p*C] from images [B, H, H, C]."""
        if images.ndim != 4 or images.shape[1] != self.image_size:
            raise ShapeError(
                f"expected images [B, {self.image_size}, {self.image_size}, "
                f"{self.channels}], got {images.shape}")
        return Tensor(patchify_image(images, self.patch))

    def mask(self, tokens: Tensor, ratio: float, rng: np.random.Generator) -> MaskedSequence:
        return random_mask(tokens, ratio, rng)

    def decode_to_image(self, h_full: Tensor) -> Tensor:
        toks = self.core.decode(h_full)
        return unpatchify_image(toks, self.image_size, self.patch, self.channels)

    def reconstruct(self, images: np.ndarray, ratio: float,
                    rng: np.random.Generator) -> tuple[Tensor, MaskedSequence]:
        toks = self.tokens(images)
        masked = self.mask(toks, ratio, rng) if ratio > 0 else full_visibility(toks)
        h = self.core.encode(toks, masked.visible_indices)
        full = self.core.expand_with_mask_tokens(h, masked.visible_indices)
        return self.decode_to_image(full), masked

    def encoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self.core.encoder_params(f"{prefix}core.")

    def decoder_params(self, prefix: str = "") -> dict[str, Tensor]:
        return self.core.decoder_params(f"{prefix}core.")
