"""Patchification, random masking, sparsification, and reassembly.

Vectors are split into fixed-size patches (zero-padded to a multiple of the
patch size, pad length recorded); square images into non-overlapping
patch x patch x channel tokens.  Masking selects patch indices without
replacement; counts use round-half-up so ratio 0.5 of 7 patches masks 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import core as ops
from .tensor.core import Tensor


def round_half_up(x: float) -> int:
    """0.5 rounds toward +inf: round_half_up(3.5) == 4."""
    return int(math.floor(x + 0.5))


@dataclass
class MaskedSequence:
    """One random masking of a token batch.

    visible_tokens: Tensor [B, P-M, D] gathered in index order.
    visible_indices / mask_indices: int64 [B, P-M] / [B, M], each row sorted
    ascending and jointly a permutation of range(total_patches).
    """
    visible_tokens: Tensor
    visible_indices: np.ndarray
    mask_indices: np.ndarray
    total_patches: int
    mask_ratio: float


def mask_count(total_patches: int, ratio: float) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ShapeError(f"mask ratio must be in [0, 1], got {ratio}")
    return round_half_up(ratio * total_patches)


def random_mask(tokens: Tensor, ratio: float, rng: np.random.Generator) -> MaskedSequence:
    """Mask a round-half-up fraction of patches, uniformly without replacement."""
    if tokens.ndim != 3:
        raise ShapeError(f"random_mask expects [B, P, D] tokens, got {tokens.shape}")
    b, p, _ = tokens.shape
    m = mask_count(p, ratio)
    mask_idx = np.empty((b, m), dtype=np.int64)
    vis_idx = np.empty((b, p - m), dtype=np.int64)
    for i in range(b):
        perm = rng.permutation(p)
        mask_idx[i] = np.sort(perm[:m])
        vis_idx[i] = np.sort(perm[m:])
    visible = ops.take_tokens(tokens, vis_idx)
    return MaskedSequence(visible, vis_idx, mask_idx, p, ratio)


def full_visibility(tokens: Tensor) -> MaskedSequence:
    """The ratio-0 masking: every patch visible (used at inference)."""
    b, p, _ = tokens.shape
    vis_idx = np.tile(np.arange(p, dtype=np.int64), (b, 1))
    mask_idx = np.empty((b, 0), dtype=np.int64)
    return MaskedSequence(ops.take_tokens(tokens, vis_idx), vis_idx, mask_idx, p, 0.0)


def random_sparsify(x: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero a round-half-up fraction of entries per sample (input corruption).

    x: [B, N] or [N]; returns a copy with exactly round_half_up(fraction*N)
    zeros placed uniformly per row.
    """
    if not 0.0 <= fraction < 1.0:
        raise ShapeError(f"sparsify fraction must be in [0, 1), got {fraction}")
    squeeze = x.ndim == 1
    mat = np.array(x, dtype=np.float64, copy=True, ndmin=2)
    n = mat.shape[1]
    k = round_half_up(fraction * n)
    for i in range(mat.shape[0]):
        idx = rng.permutation(n)[:k]
        mat[i, idx] = 0.0
    return mat[0] if squeeze else mat


# ---------------------------------------------------------------------------
# vectors
# ---------------------------------------------------------------------------

def padded_length(n_values: int, patch: int) -> int:
    return ((n_values + patch - 1) // patch) * patch


def patchify_vector(v: np.ndarray, patch: int) -> tuple[np.ndarray, int]:
    """[B, N] -> ([B, ceil(N/patch), patch], pad_length). Pad values are zero."""
    if v.ndim != 2:
        raise ShapeError(f"patchify_vector expects [B, N], got {v.shape}")
    b, n = v.shape
    total = padded_length(n, patch)
    pad = total - n
    if pad:
        v = np.concatenate([v, np.zeros((b, pad))], axis=1)
    return v.reshape(b, total // patch, patch), pad


def reassemble(masked: MaskedSequence, decoded_tokens: Tensor,
               n_values: int | None = None) -> Tensor:
    """Inverse of patchify for position-ordered decoded tokens.

    decoded_tokens: [B, total_patches, patch]; scattering back to original
    positions has already happened on the decoder input side, so this
    flattens and strips padding.  Raises if the token count disagrees with
    the masking's total_patches.
    """
    b, p, patch = decoded_tokens.shape
    if p != masked.total_patches:
        raise ShapeError(
            f"reassemble: decoded {p} tokens but masking has {masked.total_patches}")
    flat = ops.reshape(decoded_tokens, (b, p * patch))
    if n_values is not None and n_values != p * patch:
        flat = ops.narrow(flat, 1, 0, n_values)
    return flat


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def patchify_image(img: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, (H/patch)*(W/patch), patch*patch*C], H == W required."""
    if img.ndim != 4 or img.shape[1] != img.shape[2]:
        raise ShapeError(f"patchify_image expects square [B, H, H, C], got {img.shape}")
    b, h, _, c = img.shape
    if h % patch:
        raise ShapeError(f"image size {h} not divisible by patch {patch}")
    g = h // patch
    x = img.reshape(b, g, patch, g, patch, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, g * g, patch * patch * c))


def unpatchify_image(tokens: Tensor, image_size: int, patch: int, channels: int) -> Tensor:
    """Differentiable inverse of patchify_image: [B, P, p*p*C] -> [B, H, H, C]."""
    b, p, d = tokens.shape
    g = image_size // patch
    if p != g * g or d != patch * patch * channels:
        raise ShapeError(
            f"unpatchify_image: tokens {tokens.shape} do not tile a "
            f"{image_size}x{image_size}x{channels} image with patch {patch}")
    x = ops.reshape(tokens, (b, g, g, patch, patch, channels))
    x = ops.transpose(x, (0, 1, 3, 2, 4, 5))
    return ops.reshape(x, (b, image_size, image_size, channels))
