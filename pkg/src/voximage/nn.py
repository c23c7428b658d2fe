"""Neural building blocks on the autodiff engine.

Modules hold parameters as ``Tensor`` attributes (or nested modules / lists
of modules).  ``named_params`` walks the attribute tree in definition order,
producing dotted names, so parameter ordering is deterministic for the
optimizer, checkpoints, and gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import core as ops
from .tensor.core import Tensor


class Module:
    """Base class: parameter discovery, freezing, counting."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[full] = value
            elif isinstance(value, Module):
                out.update(value.named_params(f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{full}.{i}."))
                    elif isinstance(item, Tensor):
                        out[f"{full}.{i}"] = item
        return out

    def param_count(self) -> int:
        return sum(p.data.size for p in self.named_params().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_params().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


def init_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


class Linear(Module):
    """Affine map over the last axis: x [..., din] -> [..., dout]."""

    def __init__(self, rng: np.random.Generator, din: int, dout: int,
                 std: float | None = None, zero_init: bool = False):
        if zero_init:
            self.w = Tensor(np.zeros((din, dout)), requires_grad=True)
        else:
            scale = std if std is not None else 1.0 / math.sqrt(din)
            self.w = init_normal(rng, (din, dout), scale)
        self.b = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layernorm(x, self.gamma, self.beta, self._eps)


class Mlp(Module):
    """Two-layer GELU MLP used inside transformer blocks."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class SelfAttention(Module):
    """Multi-head self-attention over token sequences [B, P, dim]."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by heads {heads}")
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self._heads = heads
        self._dh = dim // heads

    def __call__(self, x: Tensor) -> Tensor:
        b, p, d = x.shape
        h, dh = self._heads, self._dh

        def split(t: Tensor) -> Tensor:
            return ops.transpose(ops.reshape(t, (b, p, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = (q @ ops.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        out = ops.softmax(scores) @ v
        out = ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (b, p, d))
        return self.wo(out)


class TransformerBlock(Module):
    """Pre-norm residual block: x + attn(ln(x)); x + mlp(ln(x))."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: float = 4.0):
        self.ln1 = LayerNorm(dim)
        self.attn = SelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.mlp = Mlp(rng, dim, int(dim * mlp_ratio))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class CrossAttention(Module):
    """Single-head scaled dot-product attention across two token sets.

    Queries come from one modality, keys/values from the other; the output
    lives in the key/value projection width d_k so it can be added
    residually on the key/value side.
    """

    def __init__(self, rng: np.random.Generator, q_dim: int, kv_dim: int, d_k: int):
        self.wq = Linear(rng, q_dim, d_k)
        self.wk = Linear(rng, kv_dim, d_k)
        self.wv = Linear(rng, kv_dim, d_k)
        self._scale = 1.0 / math.sqrt(d_k)

    def __call__(self, q_tokens: Tensor, kv_tokens: Tensor) -> Tensor:
        if kv_tokens.shape[1] == 0:
            raise ShapeError("cross-attention received an empty key/value sequence")
        q = self.wq(q_tokens)
        k = self.wk(kv_tokens)
        v = self.wv(kv_tokens)
        scores = (q @ ops.transpose(k, (0, 2, 1))) * self._scale
        return ops.softmax(scores) @ v


@dataclass
class TransformerConfig:
    """Size of one encoder or decoder stack."""
    dim: int
    depth: int
    heads: int
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.dim < 1 or self.depth < 0 or self.heads < 1:
            raise ShapeError(f"invalid transformer config {self}")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")


def sinusoidal_features(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sinusoidal position features: [sin(t*w) | cos(t*w)].

    t=0 maps to all-zero sines and all-one cosines; distinct integer steps
    below max_period map to distinct rows.
    """
    if dim % 2:
        raise ShapeError(f"sinusoidal feature dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TimeEmbedding(Module):
    """Sinusoidal features of the diffusion step, refined by a 2-layer MLP."""

    def __init__(self, rng: np.random.Generator, dim: int, max_t: int):
        self.fc1 = Linear(rng, dim, dim)
        self.fc2 = Linear(rng, dim, dim)
        self._dim = dim
        self._max_t = max_t

    def __call__(self, t: np.ndarray) -> Tensor:
        t = np.asarray(t).reshape(-1)
        if t.min() < 0 or t.max() > self._max_t:
            raise ShapeError(f"time step outside [0, {self._max_t}]: {t.min()}..{t.max()}")
        feats = Tensor(sinusoidal_features(t, self._dim))
        return self.fc2(ops.gelu(self.fc1(feats)))


class Conv2d(Module):
    """k x k convolution via patch extraction; x [B, C, H, W]."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int,
                 k: int = 3, stride: int = 1, pad: int = 1, zero_init: bool = False):
        fan_in = cin * k * k
        if zero_init:
            self.w = Tensor(np.zeros((fan_in, cout)), requires_grad=True)
        else:
            self.w = init_normal(rng, (fan_in, cout), 1.0 / math.sqrt(fan_in))
        self.b = Tensor(np.zeros(cout), requires_grad=True)
        self._k, self._stride, self._pad, self._cout = k, stride, pad, cout

    def __call__(self, x: Tensor) -> Tensor:
        b, _, h, w = x.shape
        oh = (h + 2 * self._pad - self._k) // self._stride + 1
        ow = (w + 2 * self._pad - self._k) // self._stride + 1
        cols = ops.im2col(x, self._k, self._stride, self._pad)
        out = cols @ self.w + self.b
        return ops.reshape(ops.transpose(out, (0, 2, 1)), (b, self._cout, oh, ow))


class ChannelNorm(Module):
    """Layer norm over the channel axis of a [B, C, H, W] map."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        moved = ops.transpose(x, (0, 2, 3, 1))
        normed = ops.layernorm(moved, self.gamma, self.beta, self._eps)
        return ops.transpose(normed, (0, 3, 1, 2))
