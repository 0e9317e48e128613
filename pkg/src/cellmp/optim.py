"""Adam with decoupled weight decay, plus the cosine annealing schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Params

__all__ = ["OptimizerState", "adam_step", "cosine_lr"]


@dataclass
class OptimizerState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState) -> None:
    """One bias-corrected Adam update in place; weight decay is decoupled."""
    if set(grads.keys()) != set(params.keys()):
        missing = set(params.keys()) ^ set(grads.keys())
        raise KeyError(f"gradient keys do not match parameters: {sorted(missing)[:5]}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for key in params.keys():
        g = grads[key]
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params[key]
        if state.weight_decay:
            p = p - state.lr * state.weight_decay * p
        params[key] = p - state.lr * update


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine annealing from lr0 down to lr_min over total_steps."""
    if total_steps <= 1:
        return lr0
    frac = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * frac))
