"""Pure numpy versions of the compiled kernels (same signatures and semantics).

Loops run over time only; each step is vectorised over (batch, channel, state).
"""

import numpy as np

SERIES_CUTOFF = 1e-6
GRAD_SERIES_CUTOFF = 1e-2


def _phi(dt, a):
    z = dt * a
    small = np.abs(z) < SERIES_CUTOFF
    safe_a = np.where(small, 1.0, a)
    return np.where(small, dt * (1.0 + 0.5 * z), np.expm1(z) / safe_a)


def scan_forward(u, delta, A, B, C, Dskip, store_states=False):
    nb, L, D = u.shape
    N = A.shape[1]
    h = np.zeros((nb, D, N))
    y = np.empty((nb, L, D), dtype=u.dtype)
    hs = np.empty((nb, L, D, N), dtype=u.dtype) if store_states else None
    for t in range(L):
        dt = delta[:, t, :, None].astype(np.float64)
        abar = np.exp(dt * A)
        bu = (_phi(dt, A) * B[:, t, None, :]) * u[:, t, :, None]
        h = abar * h + bu
        y[:, t] = np.einsum("bdn,bn->bd", h, C[:, t]) + Dskip * u[:, t]
        if store_states:
            hs[:, t] = h
    return y, hs


def scan_forward_chunked(u, delta, A, B, C, Dskip, chunk_len):
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    nb, L, D = u.shape
    N = A.shape[1]
    h = np.zeros((nb, D, N))
    y = np.empty((nb, L, D), dtype=u.dtype)
    for c0 in range(0, L, chunk_len):
        c1 = min(L, c0 + chunk_len)
        dt = delta[:, c0:c1, :, None].astype(np.float64)
        abar = np.exp(dt * A)
        bu = (_phi(dt, A) * B[:, c0:c1, None, :]) * u[:, c0:c1, :, None]
        for k in range(c1 - c0):
            h = abar[:, k] * h + bu[:, k]
            y[:, c0 + k] = np.einsum("bdn,bn->bd", h, C[:, c0 + k]) + Dskip * u[:, c0 + k]
    return y


def scan_backward(u, delta, A, B, C, Dskip, hs, dy):
    nb, L, D = u.shape
    N = A.shape[1]
    A64 = A.astype(np.float64)
    du = np.zeros((nb, L, D))
    ddelta = np.zeros((nb, L, D))
    dA = np.zeros((D, N))
    dB = np.zeros((nb, L, N))
    dC = np.zeros((nb, L, N))
    dD = (dy * u).sum(axis=(0, 1)).astype(np.float64)
    g = np.zeros((nb, D, N))
    for t in range(L - 1, -1, -1):
        dt = delta[:, t, :, None].astype(np.float64)
        ut = u[:, t, :, None].astype(np.float64)
        dyt = dy[:, t, :, None].astype(np.float64)
        z = dt * A64
        abar = np.exp(z)
        small = np.abs(z) < SERIES_CUTOFF
        mid = np.abs(z) < GRAD_SERIES_CUTOFF
        safe_a = np.where(small, 1.0, A64)
        safe_z = np.where(mid, 1.0, z)
        phi = np.where(small, dt * (1.0 + 0.5 * z), np.expm1(z) / safe_a)
        dphi_ddt = np.where(small, 1.0 + z, abar)
        dphi_da = dt * dt * np.where(
            small, 0.5,
            np.where(mid, 0.5 + z * (1.0 / 3.0 + z * (0.125 + z / 30.0)),
                     (z * abar - np.expm1(z)) / (safe_z * safe_z)))
        bt = B[:, t, None, :].astype(np.float64)
        g = g + dyt * C[:, t, None, :]
        dC[:, t] = np.einsum("bd,bdn->bn", dy[:, t], hs[:, t])
        hprev = hs[:, t - 1] if t > 0 else 0.0
        da = g * hprev
        dbb = g * ut
        du[:, t] = Dskip * dy[:, t] + (g * phi * bt).sum(axis=2)
        dB[:, t] = (dbb * phi).sum(axis=1)
        ddelta[:, t] = (da * abar * A64 + dbb * bt * dphi_ddt).sum(axis=2)
        dA += (da * abar * dt + dbb * bt * dphi_da).sum(axis=0)
        g = g * abar
    dtype = u.dtype
    return tuple(x.astype(dtype) for x in (du, ddelta, dA, dB, dC, dD))


def abs_maxpool(y, pool):
    if not 1 <= pool <= 127:
        raise ValueError("pool must be in [1, 127]")
    R, T = y.shape
    To = T // pool
    win = y[:, :To * pool].reshape(R, To, pool)
    idx = np.abs(win).argmax(axis=2)
    picked = np.take_along_axis(win, idx[..., None], axis=2)[..., 0]
    code = np.where(picked >= 0, idx + 1, -(idx + 1)).astype(np.int8)
    return np.abs(picked), code


def abs_maxpool_backward(g, code, pool, t_in, out=None):
    R, To = g.shape
    if out is None:
        gy = np.zeros((R, t_in), dtype=g.dtype)
    else:
        gy = out
        gy[...] = 0
    c = code.astype(np.int64)
    pos = np.arange(To) * pool + np.abs(c) - 1
    np.put_along_axis(gy, pos, g * np.sign(c), axis=1)
    return gy


SELU_ALPHA = 1.6732632423543772848170429916717
SELU_SCALE = 1.0507009873554804934193349852946


def channel_moments(x):
    xd = x.astype(np.float64)
    mean = xd.mean(axis=(0, 2))
    var = ((xd - mean[None, :, None]) ** 2).mean(axis=(0, 2))
    return mean, var


def _windows(a, pf, pt):
    nb, F, T = a.shape
    Fo, To = F // pf, T // pt
    w = a[:, :Fo * pf, :To * pt].reshape(nb, Fo, pf, To, pt)
    return w.transpose(0, 1, 3, 2, 4).reshape(nb, Fo, To, pf * pt)


def affine_selu_maxpool(x, scale, shift, pf, pt):
    nb, F, T = x.shape
    v = scale[None, :, None] * x.astype(np.float64) + shift[None, :, None]
    win = _windows(v, pf, pt)
    k = win.argmax(axis=-1)
    best = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    Fo, To = best.shape[1:]
    f = np.arange(Fo)[None, :, None] * pf + k // pt
    t = np.arange(To)[None, None, :] * pt + k % pt
    idx = (f * T + t).astype(np.int64)
    out = np.where(best > 0, SELU_SCALE * best, SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(best, 0)))
    return out.astype(x.dtype), idx


def affine_selu_maxpool_backward(x, scale, shift, idx, g):
    nb, F, T = x.shape
    f = idx // T
    xv = np.take_along_axis(x.reshape(nb, -1), idx.reshape(nb, -1), axis=1).reshape(idx.shape)
    v = scale[f] * xv + shift[f]
    d = np.where(v > 0, SELU_SCALE, SELU_SCALE * SELU_ALPHA * np.exp(np.minimum(v, 0)))
    gv = np.zeros((nb, F * T), dtype=x.dtype)
    np.put_along_axis(gv, idx.reshape(nb, -1), (g * d).reshape(nb, -1).astype(x.dtype), axis=1)
    return gv.reshape(nb, F, T)


def bn_input_grad(x, gv, mean, inv, gamma, sum_g, sum_gxhat, training):
    nb, F, T = x.shape
    n = nb * T
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    a = sum_g / n if training else np.zeros(F)
    c = sum_gxhat / n if training else np.zeros(F)
    k = gamma * inv
    gx = k[None, :, None] * (gv - a[None, :, None] - xhat * c[None, :, None])
    return gx.astype(x.dtype)
