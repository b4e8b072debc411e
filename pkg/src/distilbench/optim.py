"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None],
               state: OptimizerState, lr: float) -> None:
    """One in-place AdamW update of ``params``.

    Parameters whose gradient is ``None`` are skipped entirely (no moment
    update, no decay).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Thin stateful wrapper over :func:`adamw_step` for named tensors."""

    def __init__(self, params: Mapping[str, Tensor], betas=(0.9, 0.98), eps: float = 1e-6,
                 weight_decay: float = 0.01, grad_clip: float | None = None):
        self.params = dict(params)
        self.state = OptimizerState(betas[0], betas[1], eps, weight_decay)
        self.grad_clip = grad_clip

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((p.grad ** 2).sum())
                                 for p in self.params.values() if p.grad is not None)))

    def step(self, lr: float) -> None:
        grads = {k: p.grad for k, p in self.params.items()}
        if self.grad_clip is not None:
            norm = self.grad_norm()
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
                grads = {k: None if g is None else g * factor for k, g in grads.items()}
        adamw_step({k: p.data for k, p in self.params.items()}, grads, self.state, lr)


def warmup_steps(total_steps: int, warmup_fraction: float) -> int:
    return max(1, int(round(warmup_fraction * total_steps)))


def linear_warmup_decay(step: int, peak_lr: float, total_steps: int,
                        warmup_fraction: float) -> float:
    """Linear 0 -> peak over the warmup, then linear peak -> 0 at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    # the last step always ends at zero, so warmup stops one short of it
    warm = max(1, min(warmup_steps(total_steps, warmup_fraction), total_steps - 1))
    if step <= 0 or step >= total_steps:
        return 0.0
    if step <= warm:
        return peak_lr * (step / warm)
    return peak_lr * (total_steps - step) / (total_steps - warm)
