"""Short-range feature extractor: learnable sinc filter bank and residual 2-D encoder.

Shapes follow (batch, channels, frequency, time).  The time-pooling schedule is
fixed so that a 64600-sample clip produces a 64 x 23 x 29 feature map:

    sinc correlation (129 taps)   64600 -> 64472 samples
    |.| + max-pool 3              -> 70 x 21490
    block 1 pool (3, 360)         -> 23 x 59
    block 2 pool (1, 2)           -> 23 x 29
    block 3 pool (1, 1)           -> 23 x 29
    block 4 pool (1, 1)           -> 23 x 29

Pooling is applied at block entry so the convolutions run on the pooled grid;
nearly all time reduction happens before the first 2-D convolution, which keeps
a CPU training step cheap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Module, Parameter, Tensor, ops
from .numerics.nn import BatchNorm, Conv2d, Linear

SAMPLE_RATE = 16000
NUM_SAMPLES = 64600
NUM_FILTERS = 70
KERNEL_LEN = 129
LFM_POOL = 3
BLOCK_POOLS = ((3, 360), (1, 2), (1, 1), (1, 1))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel) / 2595.0) - 1.0)


def output_length(n_samples: int = NUM_SAMPLES, kernel_len: int = KERNEL_LEN,
                  pools=BLOCK_POOLS, n_filters: int = NUM_FILTERS) -> tuple[int, int]:
    """(F, T) of the encoder output for a clip of ``n_samples``."""
    f = n_filters
    t = (n_samples - kernel_len + 1) // LFM_POOL
    for pf, pt in pools:
        f //= pf
        t //= pt
    return f, t


class SincFilterBank(Module):
    """Band-pass filters parameterised by lower cut-off and bandwidth in Hz.

    Effective bands satisfy ``min_low_hz <= f1`` and
    ``f1 + min_band_hz <= f2 <= sample_rate / 2`` whatever the raw parameter values.
    """

    def __init__(self, num_filters: int = NUM_FILTERS, kernel_len: int = KERNEL_LEN,
                 sample_rate: int = SAMPLE_RATE, min_low_hz: float = 0.0, min_band_hz: float = 50.0):
        super().__init__()
        if kernel_len % 2 == 0:
            raise ValueError("kernel_len must be odd")
        self.num_filters = num_filters
        self.kernel_len = kernel_len
        self.sample_rate = sample_rate
        self.min_low_hz = float(min_low_hz)
        self.min_band_hz = float(min_band_hz)
        top = sample_rate / 2 - (min_low_hz + min_band_hz)
        edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(top), num_filters + 1))
        self.low_hz = Parameter(edges[:-1])
        self.band_hz = Parameter(np.diff(edges))
        half = (kernel_len - 1) // 2
        # taps -half..0; the other half follows by even symmetry
        self._n = np.arange(-half, 1, dtype=np.float64) / sample_rate
        self._window = np.hamming(kernel_len)[:half + 1]

    def band_edges(self) -> tuple[Tensor, Tensor]:
        nyquist = self.sample_rate / 2
        f1 = ops.clip(self.low_hz, self.min_low_hz, nyquist - self.min_band_hz)
        width = self.min_band_hz + ops.relu(self.band_hz)
        f2 = ops.clip(f1 + width, None, nyquist)
        return f1, f2

    def half_kernels(self) -> Tensor:
        """First (kernel_len + 1) // 2 taps of every kernel, up to and including the centre."""
        f1, f2 = self.band_edges()
        dtype = self.low_hz.dtype
        n = Tensor(self._n.astype(dtype))
        window = Tensor(self._window.astype(dtype))
        sr = self.sample_rate
        return (_lowpass(f2, n, sr) - _lowpass(f1, n, sr)) * window

    def kernels(self) -> Tensor:
        """(num_filters, kernel_len) Hamming-windowed ideal band-pass impulse responses."""
        half = self.half_kernels()
        return ops.concat([half, ops.flip(half[:, :-1], axis=1)], axis=1)


def _lowpass(cutoff: Tensor, n: Tensor, sample_rate: float) -> Tensor:
    """(2 f / sr) sinc(2 pi f t): ideal low-pass with unit pass-band gain, one row per cut-off."""
    f = cutoff.reshape(-1, 1)
    return f * ops.sinc(2.0 * np.pi * (f * n.reshape(1, -1))) * (2.0 / sample_rate)


def sinc_kernels(bank: SincFilterBank) -> Tensor:
    return bank.kernels()


class SincFrontend(Module):
    """Waveform -> low-level feature map (LFM) of shape (B, num_filters, t)."""

    def __init__(self, bank: SincFilterBank | None = None, pool: int = LFM_POOL):
        super().__init__()
        self.bank = bank or SincFilterBank()
        self.pool = pool
        self.norm = BatchNorm(self.bank.num_filters)

    def envelope(self, waveform: Tensor) -> Tensor:
        """|sinc correlation| max-pooled over time, before normalisation."""
        return ops.conv1d_abs_maxpool(_as_batch(waveform), self.bank.half_kernels(), self.pool, symmetric=True)

    def forward(self, waveform: Tensor) -> Tensor:
        return ops.selu(self.norm(self.envelope(waveform)))


def sinc_conv(frontend: SincFrontend, waveform: Tensor) -> Tensor:
    return frontend(waveform)


def _as_batch(waveform) -> Tensor:
    w = waveform if isinstance(waveform, Tensor) else Tensor(np.asarray(waveform))
    if w.ndim == 1:
        return w.reshape(1, -1)
    if w.ndim == 3 and w.shape[1] == 1:
        return w.reshape(w.shape[0], w.shape[2])
    if w.ndim != 2:
        raise ValueError(f"waveform must be (L,), (B, L) or (B, 1, L); got {w.shape}")
    return w


class ResBlock(Module):
    """Plain residual block (no pre-activation, its input is already normalised)."""

    def __init__(self, c_in: int, c_out: int, pool, rng: np.random.Generator):
        super().__init__()
        self.pool = tuple(pool)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def forward(self, x: Tensor, pooled: bool = False) -> Tensor:
        if not pooled:
            x = ops.max_pool2d(x, self.pool)
        h = self.conv2(ops.selu(self.bn1(self.conv1(x))))
        return h + (self.skip(x) if self.skip is not None else x)


class SqueezeExcite(Module):
    def __init__(self, channels: int, ratio: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(channels, channels // ratio, rng)
        self.fc2 = Linear(channels // ratio, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        """Per-channel multipliers in (0, 1), shape (B, C)."""
        squeezed = ops.mean(x, axis=(2, 3))
        return ops.sigmoid(self.fc2(ops.selu(self.fc1(squeezed))))

    def forward(self, x: Tensor) -> Tensor:
        s = self.gate(x)
        return x * s.reshape(s.shape[0], s.shape[1], 1, 1)


class SERes2NetBlock(Module):
    """Pre-activation residual block with a Res2Net split-transform and SE gating.

    Channels are split into ``scale`` groups; group 1 passes through and group i
    (i >= 2) is convolved after adding the output of group i - 1.
    """

    def __init__(self, c_in: int, c_out: int, pool, rng: np.random.Generator,
                 scale: int = 4, se_ratio: int = 8):
        super().__init__()
        if c_out % scale:
            raise ValueError("c_out must be divisible by scale")
        self.pool = tuple(pool)
        self.scale = scale
        width = c_out // scale
        self.pre_bn = BatchNorm(c_in)
        self.conv_in = Conv2d(c_in, c_out, 3, rng, padding=1, bias=False)
        self.bn_in = BatchNorm(c_out)
        self.split_convs = [Conv2d(width, width, 3, rng, padding=1, bias=False) for _ in range(scale - 1)]
        self.split_bns = [BatchNorm(width) for _ in range(scale - 1)]
        self.conv_out = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.se = SqueezeExcite(c_out, se_ratio, rng)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def split_transform(self, h: Tensor) -> Tensor:
        groups = ops.split(h, [h.shape[1] // self.scale] * self.scale, axis=1)
        outs = [groups[0]]
        for i in range(1, self.scale):
            z = groups[i] + outs[i - 1]
            outs.append(ops.selu(self.split_bns[i - 1](self.split_convs[i - 1](z))))
        return ops.concat(outs, axis=1)

    def forward(self, x: Tensor, pooled: bool = False) -> Tensor:
        if not pooled:
            x = ops.max_pool2d(x, self.pool)
        h = self.conv_in(ops.selu(self.pre_bn(x)))
        h = ops.selu(self.bn_in(h))
        h = self.conv_out(self.split_transform(h))
        h = self.se(h)
        return h + (self.skip(x) if self.skip is not None else x)


@dataclass(frozen=True)
class EncoderSpec:
    res_channels: int = 32
    channels: int = 64
    pools: tuple = BLOCK_POOLS
    res2net_scale: int = 4
    se_ratio: int = 8


class Encoder(Module):
    """Raw waveform (B, 64600) -> high-level feature map x_HFM of shape (B, C, F, T)."""

    def __init__(self, rng: np.random.Generator, spec: EncoderSpec = EncoderSpec(),
                 num_samples: int = NUM_SAMPLES):
        super().__init__()
        self.num_samples = num_samples
        self.frontend = SincFrontend()
        p = spec.pools
        self.blocks = [
            ResBlock(1, spec.res_channels, p[0], rng),
            SERes2NetBlock(spec.res_channels, spec.channels, p[1], rng, spec.res2net_scale, spec.se_ratio),
            SERes2NetBlock(spec.channels, spec.channels, p[2], rng, spec.res2net_scale, spec.se_ratio),
            SERes2NetBlock(spec.channels, spec.channels, p[3], rng, spec.res2net_scale, spec.se_ratio),
        ]
        self.channels = spec.channels
        self.out_shape = output_length(num_samples, self.frontend.bank.kernel_len, p, self.frontend.bank.num_filters)

    def forward(self, waveform) -> Tensor:
        w = _as_batch(waveform)
        if w.shape[1] != self.num_samples:
            raise ValueError(f"expected {self.num_samples} samples, got {w.shape[1]}")
        # LFM normalisation, SeLU and the first block's entry pool run as one fused op
        norm = self.frontend.norm
        x = ops.batch_norm_selu_maxpool(self.frontend.envelope(w), norm.gamma, norm.beta,
                                        norm._buffers["running_mean"], norm._buffers["running_var"],
                                        norm.training, self.blocks[0].pool, norm.momentum, norm.eps)
        x = self.blocks[0](x.reshape(x.shape[0], 1, x.shape[1], x.shape[2]), pooled=True)
        for block in self.blocks[1:]:
            x = block(x)
        return x

    def forward_unfused(self, waveform) -> Tensor:
        """Reference path: LFM, then every block with its own entry pool."""
        lfm = self.frontend(_as_batch(waveform))
        x = lfm.reshape(lfm.shape[0], 1, lfm.shape[1], lfm.shape[2])
        for block in self.blocks:
            x = block(x)
        return x


def encode(encoder: Encoder, waveform) -> Tensor:
    return encoder(waveform)
