"""Selective state-space layers: discretisation, scans, the Mamba block and its
bidirectional derivatives.

Sequences are laid out (batch, length, width).  The unbatched helpers
(``selective_scan_ref`` and friends) also accept (length, width) arrays.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .numerics import Module, Parameter, Tensor, ops
from .numerics.nn import LayerNorm, Linear
from .numerics.tensor import make_result

SERIES_CUTOFF = 1e-6


def discretize(a, b, delta):
    """Zero-order-hold discretisation of the scalar system h' = a h + b x.

    Returns ``(a_bar, b_bar)`` with ``a_bar = exp(delta a)`` and
    ``b_bar = (exp(delta a) - 1) / a * b``.  Below ``|delta a| < 1e-6`` the
    second-order series ``delta (1 + delta a / 2) b`` is used instead, which
    removes the a -> 0 singularity while staying continuous to O((delta a)^2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    z = delta * a
    small = np.abs(z) < SERIES_CUTOFF
    safe_a = np.where(small, 1.0, a)
    phi = np.where(small, delta * (1.0 + 0.5 * z), np.expm1(z) / safe_a)
    a_bar, b_bar = np.exp(z), phi * b
    if a_bar.ndim == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def _scan_args(u, delta, B, C, A, d_skip):
    u = np.asarray(u)
    squeeze = u.ndim == 2
    dtype = np.float64 if u.dtype == np.float64 else np.float32

    def prep(arr, batched):
        arr = np.asarray(arr, dtype=dtype)
        if batched and squeeze:
            arr = arr[None]
        return np.ascontiguousarray(arr)

    args = (prep(u, True), prep(delta, True), prep(A, False), prep(B, True), prep(C, True), prep(d_skip, False))
    nb, L, D = args[0].shape
    N = args[2].shape[1]
    if args[1].shape != (nb, L, D) or args[2].shape != (D, N) or args[3].shape != (nb, L, N) \
            or args[4].shape != (nb, L, N) or args[5].shape != (D,):
        raise ValueError("selective scan: inconsistent shapes")
    return args, squeeze


def selective_scan_ref(u, delta, B, C, A, d_skip, backend=None):
    """Sequential recurrence h_k = a_bar_k h_{k-1} + b_bar_k u_k, y_k = C_k h_k + d_skip u_k.

    ``u`` and ``delta`` are (L, D) or (batch, L, D); ``B`` and ``C`` are (L, N)
    or (batch, L, N); ``A`` is (D, N) with negative entries.  h_0 = 0.
    """
    (u_, dt, A_, B_, C_, D_), squeeze = _scan_args(u, delta, B, C, A, d_skip)
    k = backend or kernels
    y, _ = k.scan_forward(u_, dt, A_, B_, C_, D_, False)
    return y[0] if squeeze else y


def selective_scan_chunked(u, delta, B, C, A, d_skip, chunk_len: int, backend=None):
    """Same recurrence, with discretisation precomputed a chunk at a time.

    Only the state carry is sequential; the hidden state is passed across chunk
    boundaries unchanged, so results match :func:`selective_scan_ref`.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    (u_, dt, A_, B_, C_, D_), squeeze = _scan_args(u, delta, B, C, A, d_skip)
    k = backend or kernels
    y = k.scan_forward_chunked(u_, dt, A_, B_, C_, D_, int(chunk_len))
    return y[0] if squeeze else y


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, d_skip: Tensor) -> Tensor:
    """Differentiable batched scan; ``u``, ``delta`` (nb, L, D), ``B``, ``C`` (nb, L, N), ``A`` (D, N)."""
    tensors = [ops.as_tensor(t) for t in (u, delta, A, B, C, d_skip)]
    dtype = np.result_type(*[t.dtype for t in tensors])
    arrs = [np.ascontiguousarray(t.data, dtype=dtype) for t in tensors]
    need_grad = any(t.requires_grad for t in tensors)
    y, hs = kernels.scan_forward(*arrs, need_grad)

    def backward(g):
        grads = kernels.scan_backward(*arrs, hs, np.ascontiguousarray(g, dtype=dtype))
        du, ddelta, dA, dB, dC, dD = grads
        return du, ddelta, dA, dB, dC, dD

    return make_result(y, tuple(tensors), backward, "selective_scan")


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSSM(Module):
    """Input-dependent (B, C, delta) projection plus the diagonal state matrix."""

    def __init__(self, d_inner: int, d_state: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        super().__init__()
        self.d_inner = d_inner
        self.d_state = d_state
        self.x_proj = Linear(d_inner, 2 * d_state + d_inner, rng, bias=False)
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        self.dt_bias = Parameter(_inverse_softplus(dt))
        self.a_log = Parameter(np.log(np.tile(np.arange(1, d_state + 1, dtype=np.float64), (d_inner, 1))))
        self.d_skip = Parameter(np.ones(d_inner))

    def A(self) -> Tensor:
        return -ops.exp(self.a_log)

    def parameters_for(self, s: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(delta, B, C) for a (nb, L, d_inner) stream."""
        n = self.d_state
        b, c, dpre = ops.split(self.x_proj(s), [n, n, self.d_inner], axis=-1)
        return ops.softplus(dpre + self.dt_bias), b, c

    def forward(self, s: Tensor) -> Tensor:
        delta, b, c = self.parameters_for(s)
        return selective_scan(s, delta, self.A(), b, c, self.d_skip)


class _MambaStem(Module):
    """Shared pieces of the Mamba block: pre-norm, in_proj, causal depthwise conv, out_proj."""

    def __init__(self, d_model: int, rng: np.random.Generator, expand: int = 2, d_conv: int = 4):
        super().__init__()
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.d_conv = d_conv
        self.norm = LayerNorm(d_model)
        self.in_proj = Linear(d_model, 2 * self.d_inner, rng, bias=False)
        bound = 1.0 / np.sqrt(d_conv)
        self.conv_weight = Parameter(rng.uniform(-bound, bound, size=(self.d_inner, 1, d_conv)))
        self.conv_bias = Parameter(rng.uniform(-bound, bound, size=self.d_inner))

    def streams(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(conv-activated stream, gate) for input (nb, L, d_model)."""
        stream, gate = ops.split(self.in_proj(self.norm(x)), [self.d_inner, self.d_inner], axis=-1)
        conv = ops.conv1d(ops.transpose(stream, (0, 2, 1)), self.conv_weight, self.conv_bias,
                          padding=(self.d_conv - 1, 0), groups=self.d_inner)
        return ops.silu(ops.transpose(conv, (0, 2, 1))), gate


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = ops.as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise ValueError(f"expected (L, D) or (batch, L, D), got shape {x.shape}")
    if x.shape[1] < 1:
        raise ValueError("sequence length must be >= 1")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(*y.shape[1:]) if squeeze else y


class MambaBlock(_MambaStem):
    """Residual Mamba block; causal along the sequence axis."""

    def __init__(self, d_model: int, rng: np.random.Generator, expand: int = 2,
                 d_state: int = 16, d_conv: int = 4):
        super().__init__(d_model, rng, expand, d_conv)
        self.ssm = SelectiveSSM(self.d_inner, d_state, rng)
        self.out_proj = Linear(self.d_inner, d_model, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        s, gate = self.streams(x)
        y = self.ssm(s) * ops.silu(gate)
        return _unbatch(x + self.out_proj(y), squeeze)


def mamba_block(block: MambaBlock, x) -> Tensor:
    return block(x)


class BiMamba(Module):
    """Two Mamba blocks in parallel, one on the reversed sequence, merged by a linear map."""

    mamba_blocks = 2

    def __init__(self, d_model: int, rng: np.random.Generator, **kw):
        super().__init__()
        self.forward_block = MambaBlock(d_model, rng, **kw)
        self.backward_block = MambaBlock(d_model, rng, **kw)
        self.proj = Linear(2 * d_model, d_model, rng)

    def pre_projection(self, x: Tensor) -> Tensor:
        """concat(M1(x), flip(M2(flip(x)))) along the feature axis."""
        x, squeeze = _batched(x)
        back = ops.flip(self.backward_block(ops.flip(x, axis=1)), axis=1)
        return _unbatch(ops.concat([self.forward_block(x), back], axis=-1), squeeze)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.pre_projection(x))


class FlipMamba(Module):
    """Two Mamba blocks in series with the sequence reversed between them."""

    mamba_blocks = 2

    def __init__(self, d_model: int, rng: np.random.Generator, **kw):
        super().__init__()
        self.first = MambaBlock(d_model, rng, **kw)
        self.second = MambaBlock(d_model, rng, **kw)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        y = ops.flip(self.second(ops.flip(self.first(x), axis=1)), axis=1)
        return _unbatch(y, squeeze)


class InBiMamba(_MambaStem):
    """One Mamba block with two selective scans (forward and reversed) sharing its projections.

    The two scan outputs are added before gating and the shared out_proj.
    """

    mamba_blocks = 1

    def __init__(self, d_model: int, rng: np.random.Generator, expand: int = 2,
                 d_state: int = 16, d_conv: int = 4):
        super().__init__(d_model, rng, expand, d_conv)
        self.ssm = SelectiveSSM(self.d_inner, d_state, rng)
        self.ssm_reverse = SelectiveSSM(self.d_inner, d_state, rng)
        self.out_proj = Linear(self.d_inner, d_model, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        x, squeeze = _batched(x)
        s, gate = self.streams(x)
        y = self.ssm(s) + ops.flip(self.ssm_reverse(ops.flip(s, axis=1)), axis=1)
        return _unbatch(x + self.out_proj(y * ops.silu(gate)), squeeze)


class UniMamba(MambaBlock):
    """Single forward Mamba block (the unidirectional ``cross`` variant)."""

    mamba_blocks = 1


def bimamba(layer: BiMamba, x) -> Tensor:
    return layer(x)


def flipmamba(layer: FlipMamba, x) -> Tensor:
    return layer(x)


def inbimamba(layer: InBiMamba, x) -> Tensor:
    return layer(x)


def count_mamba_blocks(module: Module) -> int:
    """Number of Mamba blocks (InBiMamba counts as one shared-projection block)."""
    return sum(1 for m in module.modules() if isinstance(m, (MambaBlock, InBiMamba)))
