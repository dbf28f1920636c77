"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and registers a closure that maps
the output gradient to one gradient per input (``None`` for inputs that do not
need one).  Binary elementwise ops follow trailing-axis broadcasting.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result

SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):  # reported by make_result instead
        out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(x ** exponent, (a,),
                       lambda g: (g * exponent * x ** (exponent - 1),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def sin(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def sinc(a) -> Tensor:
    """Unnormalised sinc, sin(x) / x, equal to 1 at x = 0."""
    a = as_tensor(a)
    x = a.data
    small = np.abs(x) < 1e-4
    xs = np.where(small, 1.0, x)
    x2 = x * x
    out = np.where(small, 1.0 - x2 / 6.0, np.sin(xs) / xs)

    def backward(g):
        d = np.where(small, -x / 3.0 + x * x2 / 30.0, (np.cos(xs) - np.sin(xs) / xs) / xs)
        return (g * d,)

    return make_result(out.astype(x.dtype, copy=False), (a,), backward, "sinc")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return make_result(out, (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(np.maximum(x, 0), (a,), lambda g: (g * (x > 0),), "relu")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
    out = x * s
    return make_result(out, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), "silu")


def selu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sa = SELU_SCALE * SELU_ALPHA
    out = np.expm1(np.minimum(x, 0))
    out *= sa
    out += np.maximum(x, 0) * SELU_SCALE
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        # for x <= 0 the derivative is out + scale * alpha
        d = np.where(x > 0, x.dtype.type(SELU_SCALE), out + x.dtype.type(sa))
        return (g * d,)

    return make_result(out, (a,), backward, "selu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype, copy=False)

    def backward(g):
        s = 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60)))
        return (g * s.astype(x.dtype, copy=False),)

    return make_result(out, (a,), backward, "softplus")


_UNARY = {
    "neg": neg, "exp": exp, "log": log, "sqrt": sqrt, "abs": absolute,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "silu": silu, "selu": selu,
    "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``"add"``, ``"selu"``, ...)."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"elementwise op '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"elementwise op '{kind}' takes one operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op '{kind}'")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return make_result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if _fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_result(a.data[index], (a,), backward, "getitem")


def _fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    out, start = [], 0
    axis = axis % a.ndim
    for n in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + n)
        out.append(getitem(a, tuple(index)))
        start += n
    return out


def flip(a, axis: int) -> Tensor:
    a = as_tensor(a)
    return make_result(np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),), "flip")


def pad(a, widths) -> Tensor:
    """Zero padding; ``widths`` is a numpy-style list of (before, after) pairs."""
    a = as_tensor(a)
    index = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return make_result(np.pad(a.data, widths), (a,), lambda g: (g[index],), "pad")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ValueError("matmul needs at least 1-d operands")
    k_a = a.shape[-1]
    k_b = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if k_a != k_b:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if ad.ndim == 1 or bd.ndim == 1:
        raise ValueError("matmul expects matrices or batches of matrices")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x = as_tensor(x)
    wd = weight.data
    xd = x.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    if x2.shape[1] != wd.shape[1]:
        raise ValueError(f"linear: input width {x2.shape[1]} != weight in-features {wd.shape[1]}")
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (wd.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if bias.requires_grad else None

    return make_result(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    z = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def layer_norm(a, gamma: Tensor | None = None, beta: Tensor | None = None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalise over ``axis`` (eps inside the square root) then apply gamma/beta."""
    a = as_tensor(a)
    x = a.data
    axis = axis % x.ndim
    if x.shape[axis] < 1:
        raise ValueError("layer_norm over an empty axis")
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    bshape = [1] * x.ndim
    bshape[axis] = x.shape[axis]
    gd = gamma.data.reshape(bshape) if gamma is not None else None
    out = xhat * gd if gd is not None else xhat.copy()
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    parents = [a] + [t for t in (gamma, beta) if t is not None]
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        gh = g * gd if gd is not None else g
        gx = inv * (gh - gh.mean(axis=axis, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=axis, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red).reshape(gamma.shape))
        if beta is not None:
            grads.append(g.sum(axis=red).reshape(beta.shape))
        return tuple(grads)

    return make_result(out, parents, backward, "layer_norm")


def _channel_sum(v: np.ndarray) -> np.ndarray:
    """Sum over every axis except 1, reducing contiguous runs first (faster than axis tuples)."""
    v = np.ascontiguousarray(v)
    return v.reshape(v.shape[0], v.shape[1], -1).sum(axis=2).sum(axis=0)


def batch_norm(a, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation over every axis except 1.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``r = momentum * r + (1 - momentum) * batch``.
    """
    a = as_tensor(a)
    x = a.data
    red = tuple(i for i in range(x.ndim) if i != 1)
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    n = x.size // x.shape[1]

    def cmean(v):
        return _channel_sum(v).reshape(bshape) / v.dtype.type(n)

    if training:
        mu = cmean(x)
        xc = x - mu
        var = cmean(xc * xc)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * var.reshape(-1) * (n / max(n - 1, 1))
    else:
        mu = running_mean.reshape(bshape).astype(x.dtype)
        var = running_var.reshape(bshape).astype(x.dtype)
        xc = x - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def backward(g):
        gh = g * gd
        if training:
            gx = inv * (gh - cmean(gh) - xhat * cmean(gh * xhat))
        else:
            gx = gh * inv
        return gx, _channel_sum(g * xhat), _channel_sum(g)

    return make_result(out, (a, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv1d(x, w, bias=None, stride: int = 1, padding=0, groups: int = 1) -> Tensor:
    """Cross-correlation over the last axis.

    ``x`` is (Cin, L) or (B, Cin, L); ``w`` is (Cout, Cin/groups, K).  ``padding``
    is an int or a (left, right) pair.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    B, cin, L = xd.shape
    cout, cin_g, K = w.shape
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ValueError(f"conv1d: channels {cin}->{cout} incompatible with groups={groups}")
    pl, pr = (padding, padding) if isinstance(padding, int) else padding
    Lp = L + pl + pr
    if Lp < K:
        raise ValueError(f"conv1d: kernel {K} larger than padded input {Lp}")
    Lout = (Lp - K) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pl, pr))) if pl or pr else xd
    # (B, G, cin_g, Lout, K)
    win = sliding_window_view(xp, K, axis=2)[:, :, ::stride][:, :, :Lout]
    win = win.reshape(B, groups, cin_g, Lout, K)
    wg = w.data.reshape(groups, cout // groups, cin_g, K)
    out = np.einsum("bgclk,gock->bgol", win, wg, optimize=True).reshape(B, cout, Lout)
    if bias is not None:
        out += bias.data[None, :, None]
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g5 = g.reshape(B, groups, cout // groups, Lout)
        gw = np.einsum("bgol,bgclk->gock", g5, win, optimize=True).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = np.einsum("bgol,gock->bgclk", g5, wg, optimize=True).reshape(B, cin, Lout, K)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, :, k:k + stride * (Lout - 1) + 1:stride] += gwin[..., k]
            gx = gxp[:, :, pl:pl + L]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2)) if bias.requires_grad else None

    return make_result(out[0] if squeeze else out, parents,
                       (lambda g: backward(g[None])) if squeeze else backward, "conv1d")


def _im2col2d(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, Ho: int, Wo: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    B, C = xp.shape[:2]
    # rows ordered (b, h, w), columns ordered (c, i, j) to match w.reshape(O, -1)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)


def _conv2d_shift(x: Tensor, w: Tensor, bias: Tensor | None, ph: int, pw: int, squeeze: bool) -> Tensor:
    """Stride-1 convolution as one GEMM per kernel tap.

    The padded input is laid out channels-last and flattened to rows, so tap
    (i, j) reads the contiguous row block starting at offset ``i * Wp + j``.
    Outputs are computed on the padded grid and cropped.
    """
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    O, _, kh, kw = w.shape
    Hp, Wp = H + 2 * ph, W + 2 * pw
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    xp = np.zeros((B, Hp, Wp, C), dtype=xd.dtype)
    xp[:, ph:ph + H, pw:pw + W, :] = xd.transpose(0, 2, 3, 1)
    rows = xp.reshape(-1, C)
    R = rows.shape[0]
    span = R - (kh - 1) * Wp - (kw - 1)
    wt = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # (kh, kw, C, O)
    acc = np.zeros((R, O), dtype=np.result_type(xd, w.data))
    for i in range(kh):
        for j in range(kw):
            off = i * Wp + j
            acc[:span] += rows[off:off + span] @ wt[i, j]
    out = acc.reshape(B, Hp, Wp, O)[:, :Ho, :Wo, :]
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gpad = np.zeros((B, Hp, Wp, O), dtype=g.dtype)
        gpad[:, :Ho, :Wo, :] = g.transpose(0, 2, 3, 1)
        grow = gpad.reshape(-1, O)[:span]
        gw = np.empty(wt.shape, dtype=w.data.dtype) if w.requires_grad else None
        gx = None
        gxr = np.zeros((R, C), dtype=g.dtype) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                off = i * Wp + j
                if gw is not None:
                    gw[i, j] = rows[off:off + span].T @ grow
                if gxr is not None:
                    gxr[off:off + span] += grow @ wt[i, j].T
        if gw is not None:
            gw = np.ascontiguousarray(gw.transpose(3, 2, 0, 1))
        if gxr is not None:
            gx = np.ascontiguousarray(gxr.reshape(B, Hp, Wp, C)[:, ph:ph + H, pw:pw + W, :].transpose(0, 3, 1, 2))
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3)) if bias.requires_grad else None

    return make_result(out[0] if squeeze else out, parents,
                       (lambda g: backward(g[None])) if squeeze else backward, "conv2d")


def conv2d(x, w, bias=None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation; ``x`` is (Cin, H, W) or (B, Cin, H, W)."""
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    B, C, H, W = xd.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Cw}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if H + 2 * ph < kh or W + 2 * pw < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    if sh == sw == 1:
        return _conv2d_shift(x, w, bias, ph, pw, squeeze)
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    wmat = w.data.reshape(O, -1)
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else xd
    cols = _im2col2d(xp, kh, kw, sh, sw, Ho, Wo)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gc = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += \
                        gc[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
            if squeeze:
                gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0) if bias.requires_grad else None

    return make_result(out[0] if squeeze else out, parents,
                       (lambda g: backward(g[None])) if squeeze else backward, "conv2d")


def max_pool2d(x, kernel) -> Tensor:
    """Non-overlapping max pooling over the last two axes (floor mode)."""
    x = as_tensor(x)
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    xd = x.data
    *lead, H, W = xd.shape
    Ho, Wo = H // kh, W // kw
    if Ho == 0 or Wo == 0:
        raise ValueError(f"max_pool2d: window {kh}x{kw} larger than input {H}x{W}")
    if kh == kw == 1:
        return x
    blocks = xd[..., :Ho * kh, :Wo * kw].reshape(*lead, Ho, kh, Wo, kw)
    blocks = np.moveaxis(blocks, -3, -2).reshape(*lead, Ho, Wo, kh * kw)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = np.moveaxis(gb.reshape(*lead, Ho, Wo, kh, kw), -2, -3).reshape(*lead, Ho * kh, Wo * kw)
        full = np.zeros(xd.shape, dtype=g.dtype)
        full[..., :Ho * kh, :Wo * kw] = gb
        return (full,)

    return make_result(out, (x,), backward, "max_pool2d")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (B, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -(lp * onehot).sum() * (1.0 / len(labels))


def clip(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp values; the gradient passes only where the value was not clamped."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return make_result(out, (a,), lambda g: (g * inside,), "clip")


def _folded_windows(x: np.ndarray, K: int) -> np.ndarray:
    """(L - K + 1, (K + 1) // 2) rows x[t + k] + x[t + K - 1 - k], centre tap unpaired."""
    sw = sliding_window_view(x, K)
    h = K // 2
    out = np.empty((sw.shape[0], h + 1), dtype=x.dtype)
    np.add(sw[:, :h], sw[:, K - 1:h:-1], out=out[:, :h])
    out[:, h] = sw[:, h]
    return out


_SINC_BLOCK = 4096


def conv1d_abs_maxpool(x, w, pool: int, symmetric: bool = False) -> Tensor:
    """Single-input-channel valid cross-correlation, then max of |.| over windows of ``pool``.

    ``x`` is (B, L) and the output is (B, F, (L - K + 1) // pool).  ``w`` is the
    (F, K) kernel bank, or with ``symmetric=True`` the first (K + 1) // 2 taps of
    an odd-length even-symmetric bank (K = 2 * w.shape[1] - 1); the input is then
    folded so the product costs half as much.  The correlation is materialised
    one clip and one cache-sized time block at a time.
    """
    from ..kernels import abs_maxpool, abs_maxpool_backward

    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError("conv1d_abs_maxpool expects x (B, L) and w (F, K)")
    B, L = xd.shape
    F = wd.shape[0]
    K = 2 * wd.shape[1] - 1 if symmetric else wd.shape[1]
    if L < K:
        raise ValueError(f"waveform of {L} samples is shorter than the {K}-tap kernel")
    Lc = L - K + 1
    To = Lc // pool
    if To < 1:
        raise ValueError("pooling window larger than the correlation output")

    dtype = np.result_type(xd, wd)
    if xd.dtype != dtype or wd.dtype != dtype:
        xd, wd = xd.astype(dtype), wd.astype(dtype)
    Kw = wd.shape[1]
    h = K // 2
    # time is processed in blocks of whole pooling windows small enough to stay in cache;
    # correlation samples past the last full window are never formed
    Lp = To * pool
    step = pool * max(1, _SINC_BLOCK // pool)
    spans = [(t0, min(t0 + step, Lp)) for t0 in range(0, Lp, step)]
    win_buf = np.empty((Kw, step), dtype=dtype)
    y_buf = np.empty((F, step), dtype=dtype)

    def windows(b, t0, t1):
        # transposed windows (tap, time): each row is one contiguous slice (or sum of two)
        xb, n = xd[b], t1 - t0
        win = win_buf[:, :n]
        for k in range(Kw):
            if symmetric and k < h:
                np.add(xb[t0 + k:t1 + k], xb[t0 + K - 1 - k:t1 + K - 1 - k], out=win[k])
            else:
                win[k] = xb[t0 + k:t1 + k]
        return win

    out = np.empty((B, F, To), dtype=dtype)
    codes = np.empty((B, F, To), dtype=np.int8)
    for b in range(B):
        for t0, t1 in spans:
            y = y_buf if t1 - t0 == step else np.empty((F, t1 - t0), dtype=dtype)
            np.matmul(wd, windows(b, t0, t1), out=y)
            out[b, :, t0 // pool:t1 // pool], codes[b, :, t0 // pool:t1 // pool] = abs_maxpool(y, pool)

    def backward(g):
        gw = np.zeros(wd.shape, dtype=wd.dtype) if w.requires_grad else None
        gx = np.zeros(xd.shape, dtype=xd.dtype) if x.requires_grad else None
        g = g.astype(dtype, copy=False)
        for b in range(B):
            for t0, t1 in spans:
                n = t1 - t0
                y = y_buf if n == step else np.empty((F, n), dtype=dtype)
                gy = abs_maxpool_backward(np.ascontiguousarray(g[b, :, t0 // pool:t1 // pool]),
                                          np.ascontiguousarray(codes[b, :, t0 // pool:t1 // pool]), pool, n, y)
                if gw is not None:
                    gw += gy @ windows(b, t0, t1).T
                if gx is not None:
                    gcols = wd.T @ gy
                    for k in range(Kw):
                        gx[b, t0 + k:t1 + k] += gcols[k]
                        if symmetric and k < h:
                            gx[b, t0 + K - 1 - k:t1 + K - 1 - k] += gcols[k]
        return gx, gw

    return make_result(out, (x, w), backward, "conv1d_abs_maxpool")


def batch_norm_selu_maxpool(a, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                            training: bool, pool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """``max_pool2d(selu(batch_norm(a)), pool)`` for ``a`` of shape (B, C, T) in one pass.

    Pooling acts on the (C, T) plane.  Running statistics are updated exactly as
    :func:`batch_norm` does.  Only the window winners carry gradient through the
    SeLU, so the backward pass touches the dense input once.
    """
    from ..kernels import affine_selu_maxpool, affine_selu_maxpool_backward, bn_input_grad, channel_moments

    a = as_tensor(a)
    x = np.ascontiguousarray(a.data)
    if x.ndim != 3:
        raise ValueError("batch_norm_selu_maxpool expects (B, C, T)")
    B, C, T = x.shape
    pf, pt = (pool, pool) if isinstance(pool, int) else pool
    if C // pf == 0 or T // pt == 0:
        raise ValueError(f"pooling window {pf}x{pt} larger than input {C}x{T}")
    n = B * T
    if training:
        mean, var = channel_moments(x)
        running_mean *= momentum
        running_mean += ((1 - momentum) * mean).astype(running_mean.dtype)
        running_var *= momentum
        running_var += ((1 - momentum) * var * (n / max(n - 1, 1))).astype(running_var.dtype)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    g64 = gamma.data.astype(np.float64)
    scale = g64 * inv
    shift = beta.data.astype(np.float64) - mean * scale
    out, idx = affine_selu_maxpool(x, scale, shift, pf, pt)

    def backward(g):
        gv = affine_selu_maxpool_backward(x, scale, shift, idx, np.ascontiguousarray(g, dtype=x.dtype))
        flat = idx.reshape(B, -1)
        ch = (flat // T).ravel()
        gvals = np.take_along_axis(gv.reshape(B, -1), flat, axis=1).ravel().astype(np.float64)
        xvals = np.take_along_axis(x.reshape(B, -1), flat, axis=1).ravel().astype(np.float64)
        xhat = (xvals - mean[ch]) * inv[ch]
        sum_g = np.bincount(ch, weights=gvals, minlength=C)
        sum_gxhat = np.bincount(ch, weights=gvals * xhat, minlength=C)
        gx = bn_input_grad(x, gv, mean, inv, g64, sum_g, sum_gxhat, bool(training)) if a.requires_grad else None
        return gx, sum_gxhat.astype(gamma.dtype), sum_g.astype(beta.dtype)

    return make_result(out, (a, gamma, beta), backward, "batch_norm_selu_maxpool")
