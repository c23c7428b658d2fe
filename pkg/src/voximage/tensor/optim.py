"""AdamW optimizer with decoupled weight decay, plus the LR schedule.

Update order per parameter: decay first (p -= lr*wd*p), then the
bias-corrected Adam step (p -= lr*mhat/(sqrt(vhat)+eps)).  The shared step
counter is 1-based, so the first update uses full bias correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError
from . import kernels
from .core import Tensor


@dataclass
class AdamWState:
    """Per-parameter first/second moment buffers, shaped like the parameter."""
    m: np.ndarray
    v: np.ndarray


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if not params:
            raise ValueError("AdamW: empty parameter dict")
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.state: dict[str, AdamWState] = {
            name: AdamWState(np.zeros_like(p.data), np.zeros_like(p.data))
            for name, p in self.params.items()
        }

    def zero_grad(self) -> None:
        """Explicitly clear accumulated gradients before the next backward."""
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        """Apply one update using each parameter's accumulated .grad.

        Parameters with grad None (untouched by the loss) are skipped.
        """
        self.step_count += 1
        eff_lr = self.lr if lr is None else float(lr)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(
                    f"AdamW: grad shape {p.grad.shape} != param shape {p.data.shape} for '{name}'")
            st = self.state[name]
            kernels.adamw_update(
                p.data.reshape(-1), np.ascontiguousarray(p.grad.reshape(-1)),
                st.m.reshape(-1), st.v.reshape(-1),
                eff_lr, self.beta1, self.beta2, self.eps,
                self.weight_decay, self.step_count)


@dataclass
class WarmupCosine:
    """Linear warmup to base_lr, then cosine decay to zero.

    lr(i) for the i-th update (0-based): ``base*(i+1)/warmup`` during warmup,
    then ``base*0.5*(1+cos(pi*t))`` with t the post-warmup progress in [0, 1].
    """
    base_lr: float
    total_steps: int
    warmup_frac: float = 0.05
    warmup_steps: int = field(init=False)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("WarmupCosine: total_steps must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("WarmupCosine: warmup_frac must be in [0, 1)")
        self.warmup_steps = max(1, int(round(self.warmup_frac * self.total_steps)))

    def lr(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        t = min(1.0, (step - self.warmup_steps) / span)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
