"""Cross-modal coupling of the two masked autoencoders.

Each modality is guided by the other: the full-length encoder output of one
modality receives a residual cross-attention read of itself, with queries
drawn from the other modality's encoding, then runs through its own decoder.
The two modalities must tile to the same number of tokens so attention maps
align position for position.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..masking import MaskedSequence, full_visibility
from ..nn import CrossAttention, Module
from ..tensor.core import Tensor
from .mae import FmriMae, ImageMae


class CrossModalModel(Module):
    """The two autoencoders joined by a pair of cross-attention fusers."""

    def __init__(self, rng: np.random.Generator, fmri: FmriMae, image: ImageMae):
        if fmri.n_tokens != image.n_tokens:
            raise ShapeError(
                f"modalities must tile to equal token counts, got "
                f"{fmri.n_tokens} (voxel) vs {image.n_tokens} (image)")
        self.fmri = fmri
        self.image = image
        # Queries come from the opposite modality; keys/values (and hence the
        # output width) from the modality being reconstructed.
        self.fuse_fmri = CrossAttention(rng, q_dim=image.dim, kv_dim=fmri.dim, d_k=fmri.dim)
        self.fuse_image = CrossAttention(rng, q_dim=fmri.dim, kv_dim=image.dim, d_k=image.dim)

    def _encode_both(self, voxels: np.ndarray, images: np.ndarray,
                     fmri_ratio: float, image_ratio: float,
                     rng: np.random.Generator) -> tuple[Tensor, Tensor, MaskedSequence, MaskedSequence]:
        v_toks = self.fmri.tokens(voxels)
        u_toks = self.image.tokens(images)
        v_mask = (self.fmri.mask(v_toks, fmri_ratio, rng)
                  if fmri_ratio > 0 else full_visibility(v_toks))
        u_mask = (self.image.mask(u_toks, image_ratio, rng)
                  if image_ratio > 0 else full_visibility(u_toks))
        h_v = self.fmri.core.encode(v_toks, v_mask.visible_indices)
        h_u = self.image.core.encode(u_toks, u_mask.visible_indices)
        h_v_full = self.fmri.core.expand_with_mask_tokens(h_v, v_mask.visible_indices)
        h_u_full = self.image.core.expand_with_mask_tokens(h_u, u_mask.visible_indices)
        return h_v_full, h_u_full, v_mask, u_mask

    def guided_reconstructions(self, voxels: np.ndarray, images: np.ndarray,
                               fmri_ratio: float, image_ratio: float,
                               rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        """Both reconstructions from one shared pair of encodings.

        Returns (voxel reconstruction [B, N], image reconstruction
        [B, H, H, C]).
        """
        h_v, h_u, v_mask, _ = self._encode_both(voxels, images, fmri_ratio, image_ratio, rng)
        fused_v = h_v + self.fuse_fmri(h_u, h_v)
        fused_u = h_u + self.fuse_image(h_v, h_u)
        v_rec = self.fmri.decode_to_vector(fused_v, v_mask)
        u_rec = self.image.decode_to_image(fused_u)
        return v_rec, u_rec

    def reconstruct_fmri_guided(self, voxels: np.ndarray, images: np.ndarray,
                                fmri_ratio: float, image_ratio: float,
                                rng: np.random.Generator) -> Tensor:
        """Voxel reconstruction guided by image queries: [B, N]."""
        return self.guided_reconstructions(voxels, images, fmri_ratio, image_ratio, rng)[0]

    def reconstruct_image_guided(self, voxels: np.ndarray, images: np.ndarray,
                                 fmri_ratio: float, image_ratio: float,
                                 rng: np.random.Generator) -> Tensor:
        """Image reconstruction guided by voxel queries: [B, H, H, C]."""
        return self.guided_reconstructions(voxels, images, fmri_ratio, image_ratio, rng)[1]
