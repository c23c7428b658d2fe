"""Double contrastive objectives for the phase-1 masked autoencoder.

Both losses are InfoNCE-style with temperature tau, computed on flat decoded
vectors.  Similarity is the raw dot product by default (optionally L2
normalised first).  Log-sum-exp is folded over each row with max shifting,
so large similarities cannot overflow.  A batch of one has no negatives and
both losses are exactly zero.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import core as ops
from .tensor.core import Tensor


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    norm = ops.sqrt(ops.tsum(x * x, axis=1, keepdims=True) + eps)
    return x / norm


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"{op}: expected matching [B, V] inputs, got {a.shape} and {b.shape}")


def _nce_mean(anchor: Tensor, pos_sim: Tensor, tau: float) -> Tensor:
    """Mean over rows of lse(row/tau) - pos/tau, where each row of the
    logit matrix is the anchor-anchor similarities with the diagonal
    replaced by that row's positive similarity."""
    b = anchor.shape[0]
    eye = Tensor(np.eye(b))
    sims = anchor @ ops.transpose(anchor, (1, 0))
    logits = sims * (1.0 - eye) + ops.reshape(pos_sim, (b, 1)) * eye
    return ops.tmean(ops.logsumexp(logits * (1.0 / tau)) - pos_sim * (1.0 / tau))


def cross_contrastive_loss(first: Tensor, second: Tensor, tau: float,
                           normalize: bool = False) -> Tensor:
    """Agreement between two decodings of the same samples.

    For sample i the positive is (first_i, second_i); the negatives are
    first_i against every other sample's first decoding.
    """
    _check_pair(first, second, "cross_contrastive_loss")
    if tau <= 0:
        raise ShapeError(f"temperature must be positive, got {tau}")
    if normalize:
        first = l2_normalize(first)
        second = l2_normalize(second)
    pos = ops.tsum(first * second, axis=1)
    return _nce_mean(first, pos, tau)


def self_contrastive_loss(decoded: Tensor, original: Tensor, tau: float,
                          normalize: bool = False) -> Tensor:
    """Agreement between a decoding and its own original input.

    For sample i the positive is (decoded_i, original_i); the negatives are
    decoded_i against every other sample's decoding.  The original carries
    no gradient (it is input data).
    """
    _check_pair(decoded, original, "self_contrastive_loss")
    if tau <= 0:
        raise ShapeError(f"temperature must be positive, got {tau}")
    original = original.detach()
    if normalize:
        decoded = l2_normalize(decoded)
        original = l2_normalize(original)
    pos = ops.tsum(decoded * original, axis=1)
    return _nce_mean(decoded, pos, tau)
