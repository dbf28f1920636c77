"""Two-dimensional attention map over the frequency x time plane.

One shared logit map is normalised twice: over time within each frequency row
(spectral weights) and over frequency within each time column (temporal
weights).  The weighted sums turn a (B, C, F, T) feature map into a spectral
sequence (B, F, C) and a temporal sequence (B, T, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Tensor, ops
from .numerics.nn import Conv2d


@dataclass
class AttentionMap:
    logits: Tensor   # (B, F, T)
    m_spec: Tensor   # softmax over T for each frequency row
    m_temp: Tensor   # softmax over F for each time column


class AttentionMap2D(Module):
    """1x1 conv (C -> C/4), SeLU, 1x1 conv (C/4 -> 1)."""

    def __init__(self, channels: int, rng: np.random.Generator, joint_softmax: bool = False):
        super().__init__()
        self.conv1 = Conv2d(channels, channels // 4, 1, rng)
        self.conv2 = Conv2d(channels // 4, 1, 1, rng)
        self.joint_softmax = joint_softmax

    def logits(self, x: Tensor) -> Tensor:
        z = self.conv2(ops.selu(self.conv1(x)))
        return z.reshape(z.shape[0], z.shape[2], z.shape[3])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        return branch_split(x, self.logits(x), self.joint_softmax)


def attention_logits(layer: AttentionMap2D, x: Tensor) -> Tensor:
    return layer.logits(x)


def attention_weights(logits: Tensor, joint_softmax: bool = False) -> AttentionMap:
    logits = ops.as_tensor(logits)
    if joint_softmax:
        B, F, T = logits.shape
        m = ops.softmax(logits.reshape(B, F * T), axis=-1).reshape(B, F, T)
        return AttentionMap(logits, m, m)
    return AttentionMap(logits, ops.softmax(logits, axis=2), ops.softmax(logits, axis=1))


def branch_split(x: Tensor, logits: Tensor | None = None, joint_softmax: bool = False) -> tuple[Tensor, Tensor]:
    """Weighted sums of ``x`` (B, C, F, T) into x_F (B, F, C) and x_T (B, T, C).

    ``logits`` of None gives uniform weights, i.e. plain means over the summed
    axis (the module-disabled path).
    """
    x = ops.as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    B, C, F, T = x.shape
    if logits is None:
        x_f = ops.transpose(ops.mean(x, axis=3), (0, 2, 1))
        x_t = ops.transpose(ops.mean(x, axis=2), (0, 2, 1))
    else:
        logits = ops.as_tensor(logits)
        if logits.ndim == 2:
            logits = logits.reshape(1, *logits.shape)
        if logits.shape != (B, F, T):
            raise ValueError(f"logits shape {logits.shape} does not match feature map {(B, F, T)}")
        att = attention_weights(logits, joint_softmax)
        x_f = ops.sum(x * att.m_spec.reshape(B, 1, F, T), axis=3)
        x_t = ops.sum(x * att.m_temp.reshape(B, 1, F, T), axis=2)
        x_f = ops.transpose(x_f, (0, 2, 1))
        x_t = ops.transpose(x_t, (0, 2, 1))
    if squeeze:
        return x_f.reshape(F, C), x_t.reshape(T, C)
    return x_f, x_t
