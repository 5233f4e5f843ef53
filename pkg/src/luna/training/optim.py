"""Adam with optional decoupled weight decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from luna.numeric import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new arrays and advances ``state`` in place.

    Weight decay is decoupled (AdamW): p <- p - lr * wd * p before the moment step.
    """
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise ShapeError(f"params and grads name different arrays: {missing}")
    for k, p in params.items():
        if np.shape(grads[k]) != np.shape(p):
            raise ShapeError(f"gradient for {k!r} has shape {np.shape(grads[k])}, parameter {np.shape(p)}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    out = {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        new = p * (1.0 - state.lr * state.weight_decay) if state.weight_decay else p
        out[k] = new - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def cosine_lr(base: float, step: int, total: int, warmup: int = 0) -> float:
    """Linear warmup then cosine decay to zero."""
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))
