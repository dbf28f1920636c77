"""Central finite-difference checks for the reverse-mode engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def numerical_gradient(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
             eps: float = 1e-4, wrt: Sequence[int] | None = None) -> float:
    """Compare backward() with finite differences for ``fn(*inputs)``.

    The (possibly non-scalar) output is contracted with a fixed random tensor so
    every output element contributes.  Returns the worst relative error over the
    inputs listed in ``wrt`` (all by default).
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    (out * proj).sum().backward()

    def scalar() -> float:
        return float((fn(*[Tensor(a) for a in arrays]).data * proj).sum())

    worst = 0.0
    for i in wrt:
        numeric = numerical_gradient(scalar, arrays[i], eps)
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(numeric)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def directional_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                      direction: Sequence[np.ndarray], eps: float = 1e-4) -> tuple[float, float, float]:
    """Check grad . v against (L(p + eps v) - L(p - eps v)) / 2 eps.

    ``loss_fn`` must recompute the loss from the current parameter values.  The
    caller is responsible for having populated ``p.grad`` by a backward pass.
    Returns (analytic, numeric, relative error).
    """
    analytic = float(sum(np.vdot(p.grad, v) for p, v in zip(params, direction) if p.grad is not None))
    originals = [p.data.copy() for p in params]
    for p, v in zip(params, direction):
        p.data = p.data + eps * v
    fp = float(loss_fn().data)
    for p, o, v in zip(params, originals, direction):
        p.data = o - eps * v
    fm = float(loss_fn().data)
    for p, o in zip(params, originals):
        p.data = o
    numeric = (fp - fm) / (2 * eps)
    scale = max(abs(analytic), abs(numeric), 1e-12)
    return analytic, numeric, abs(analytic - numeric) / scale
