"""Cross-branch interaction and fusion: mutual cross-attention, sequence pooling
and the final 2C -> C projection.

Sequences are (B, L, C); unbatched (L, C) inputs are accepted by the
functional helpers.
"""

from __future__ import annotations

import numpy as np

from .numerics import Module, Tensor, ops
from .numerics.nn import LayerNorm, Linear


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(C)) over the key axis; q (..., Lq, C), k (..., Lk, C)."""
    q, k = ops.as_tensor(q), ops.as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] == 0:
        raise ValueError("attention over an empty key sequence")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = ops.matmul(q, ops.transpose(k, axes)) * (1.0 / np.sqrt(q.shape[-1]))
    return ops.softmax(scores, axis=-1)


def single_head_attention(q, k, v, proj: "QKVProjection | None" = None) -> Tensor:
    """Scaled dot-product attention, optionally after Q/K/V projections."""
    q, k, v = ops.as_tensor(q), ops.as_tensor(k), ops.as_tensor(v)
    if proj is not None:
        q, k, v = proj.query(q), proj.key(k), proj.value(v)
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values must have the same length")
    return ops.matmul(attention_weights(q, k), v)


class QKVProjection(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.query = Linear(width, width, rng)
        self.key = Linear(width, width, rng)
        self.value = Linear(width, width, rng)


class MutualCrossAttention(Module):
    """Each branch attends to the other; both updates read the pre-update values.

        x_F' = LayerNorm(x_F + Attn(q=x_F, k=x_T, v=x_T))
        x_T' = LayerNorm(x_T + Attn(q=x_T, k=x_F, v=x_F))
    """

    def __init__(self, width: int, rng: np.random.Generator, projections: bool = True):
        super().__init__()
        self.f_from_t = QKVProjection(width, rng) if projections else None
        self.t_from_f = QKVProjection(width, rng) if projections else None
        self.norm_f = LayerNorm(width)
        self.norm_t = LayerNorm(width)

    def forward(self, x_f: Tensor, x_t: Tensor) -> tuple[Tensor, Tensor]:
        if x_f.shape[-2] == 0 or x_t.shape[-2] == 0:
            raise ValueError("both branches must be non-empty")
        new_f = self.norm_f(x_f + single_head_attention(x_f, x_t, x_t, self.f_from_t))
        new_t = self.norm_t(x_t + single_head_attention(x_t, x_f, x_f, self.t_from_f))
        return new_f, new_t


def mca(layer: MutualCrossAttention | None, x_f: Tensor, x_t: Tensor) -> tuple[Tensor, Tensor]:
    """Apply ``layer``; None is the disabled path and returns the inputs unchanged."""
    if layer is None:
        return x_f, x_t
    return layer(x_f, x_t)


class SequencePool(Module):
    """Attention pooling with a one-unit scoring layer: z = softmax_L(g(x)) . x."""

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.score = Linear(width, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return seq_pool(x, self.score(x))


def seq_pool(x: Tensor, logits: Tensor) -> Tensor:
    """Weighted sum of rows of ``x`` (..., L, C) with weights softmax(logits (..., L, 1)) over L."""
    x, logits = ops.as_tensor(x), ops.as_tensor(logits)
    w = ops.softmax(logits, axis=-2)
    return ops.sum(x * w, axis=-2)


class Fusion(Module):
    """Concatenate the pooled branch vectors and project 2C -> C."""

    def __init__(self, width: int, rng: np.random.Generator):
        super().__init__()
        self.proj = Linear(2 * width, width, rng)

    def forward(self, z_f: Tensor, z_t: Tensor) -> Tensor:
        return fuse(self.proj, z_f, z_t)


def fuse(proj: Linear, z_f: Tensor, z_t: Tensor) -> Tensor:
    return proj(ops.concat([ops.as_tensor(z_f), ops.as_tensor(z_t)], axis=-1))
