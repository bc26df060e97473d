from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ShapeError, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                 indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; optionally only at flat ``indices``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Max relative error between the analytic and central-difference gradient of ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got output shape {out.shape}")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numeric_grad(f, x, eps)
    return float(np.max(relative_error(analytic, numeric, floor)))


def param_grad_check(loss_fn: Callable[[], Tensor], params: dict, entries: dict | None = None,
                     eps: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Check d loss_fn() / d param for parameters used inside ``loss_fn``.

    ``entries`` maps a parameter name to the flat indices to probe (all
    entries by default). Returns the max relative error per parameter.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError(f"param_grad_check needs a scalar loss, got shape {loss.shape}")
    loss.backward()
    errors = {}
    for name, p in params.items():
        idx = range(p.data.size) if entries is None or name not in entries else entries[name]
        analytic = np.zeros(p.data.size) if p.grad is None else p.grad.reshape(-1)
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(loss_fn().data)
            flat[i] = orig - eps
            lo = float(loss_fn().data)
            flat[i] = orig
            num = (hi - lo) / (2.0 * eps)
            worst = max(worst, float(relative_error(np.array(analytic[i]), np.array(num), floor)))
        errors[name] = worst
    return errors
