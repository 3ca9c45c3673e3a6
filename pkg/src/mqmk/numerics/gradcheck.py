"""Central finite-difference oracle for checking analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.values`` in place."""
    out = np.zeros_like(param.values)
    flat = param.values.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn().item()
            flat[i] = orig - step
            lo = loss_fn().item()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst elementwise |a - n| / max(|a|, |n|, floor)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max()) if analytic.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], params: list[Tensor], step: float = 1e-5) -> dict[str, float]:
    """Return the worst relative error per parameter (keyed by name or position)."""
    for p in params:
        p.grad = None
    loss_fn().backward()
    report = {}
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
        report[p.name or str(i)] = relative_error(analytic, numeric_grad(loss_fn, p, step))
    return report
