"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(loss_fn: Callable[[], Tensor], tensor: Tensor, step: float = 1e-6,
                   indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences of ``loss_fn()`` wrt ``tensor.data``.

    Entries not listed in ``indices`` (flat positions) are left at zero.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape)
    positions = range(flat.size) if indices is None else indices
    for k in positions:
        orig = flat[k]
        flat[k] = orig + step
        plus = loss_fn().item()
        flat[k] = orig - step
        minus = loss_fn().item()
        flat[k] = orig
        grad[k] = (plus - minus) / (2.0 * step)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | Sequence[Tensor],
                    step: float = 1e-6, max_entries: int | None = None,
                    seed: int = 0, floor: float = 1e-8) -> dict[str, float]:
    """Compare backprop gradients with central differences, per parameter.

    With ``max_entries`` set, each parameter is checked on a random subset of
    that many coordinates; the analytic gradient is compared on the same subset.
    ``floor`` bounds the denominator of the relative error, so gradients that
    vanish analytically (a key bias under softmax) are judged on absolute size.
    """
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        if max_entries is not None and p.size > max_entries:
            idx = np.sort(rng.choice(p.size, size=max_entries, replace=False))
        else:
            idx = np.arange(p.size)
        numeric = numerical_grad(loss_fn, p, step=step, indices=idx).reshape(-1)[idx]
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric, floor)
    return errors
