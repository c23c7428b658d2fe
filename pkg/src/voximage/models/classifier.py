"""Small convolutional image classifier used by the identification metric."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from ..nn import Conv2d, Linear, Module
from ..tensor import core as ops
from ..tensor.core import Tensor, no_grad
from .latent_ae import to_chw


class ConvClassifier(Module):
    """Three stride-2 conv stages, global average pool, linear head."""

    def __init__(self, rng: np.random.Generator, n_classes: int,
                 image_size: int = 32, base: int = 16):
        if n_classes < 2:
            raise ShapeError(f"classifier needs >= 2 classes, got {n_classes}")
        self.c1 = Conv2d(rng, 3, base, 3, stride=2, pad=1)
        self.c2 = Conv2d(rng, base, 2 * base, 3, stride=2, pad=1)
        self.c3 = Conv2d(rng, 2 * base, 4 * base, 3, stride=2, pad=1)
        self.head = Linear(rng, 4 * base, n_classes)
        self.n_classes = n_classes
        self.image_size = image_size

    def logits(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[3] != 3:
            raise ShapeError(f"classifier expects [B, H, H, 3] images, got {x.shape}")
        h = ops.gelu(self.c1(to_chw(x)))
        h = ops.gelu(self.c2(h))
        h = ops.gelu(self.c3(h))
        return self.head(ops.tmean(h, axis=(2, 3)))

    def probs(self, images: np.ndarray, batch: int = 128) -> np.ndarray:
        """Class probabilities [B, C], inference mode."""
        outs = []
        with no_grad():
            for i in range(0, images.shape[0], batch):
                outs.append(ops.softmax(self.logits(images[i:i + batch])).data)
        return np.concatenate(outs, axis=0)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under the logits."""
    picked = ops.take_per_row(logits, np.asarray(labels, dtype=np.int64))
    return ops.tmean(ops.logsumexp(logits) - picked)
