"""Fit a LUNA feature map so that phi(x) . phi(y) matches a closed-form kernel on a box."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from luna.autodiff import tensor as ad
from luna.autodiff.tensor import Tape
from luna.features import LunaParams, exp_kernel, features, gaussian_kernel, phi
from luna.numeric import SeededRng
from luna.training.optim import AdamState, adam_step, cosine_lr

TARGETS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "gaussian": gaussian_kernel,
    "exponential": exp_kernel,
    "constant": lambda x, y: np.ones(np.broadcast_shapes(x.shape, y.shape)[:-1]),
}


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    steps: int = 1500
    lr: float = 3e-3
    batch: int = 256
    low: float = -1.0
    high: float = 1.0
    grid_points: int = 5
    eval_every: int = 100
    trainable: tuple[str, ...] | None = None  # None: every LUNA weight


@dataclass
class FitReport:
    params: LunaParams
    initial_mse: float
    final_mse: float
    sup_error: float
    curve: list[tuple[int, float]] = field(default_factory=list)
    heldout: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.final_mse / self.initial_mse if self.initial_mse > 0 else 0.0


def grid(d: int, points: int, low: float, high: float) -> np.ndarray:
    axis = np.linspace(low, high, points)
    return np.array(list(itertools.product(axis, repeat=d)))


def heldout_errors(p: LunaParams, target, X: np.ndarray) -> tuple[float, float]:
    """(MSE, sup |error|) of the induced Gram matrix on the grid points X."""
    f = features(X, p)
    err = f @ f.T - target(X[:, None, :], X[None, :, :])
    return float(np.mean(err**2)), float(np.max(np.abs(err)))


def fit_kernel_to_target(
    params: LunaParams,
    target: str | Callable,
    cfg: FitConfig = FitConfig(),
    seed: int = 0,
) -> FitReport:
    """Adam on the mean squared kernel error over pairs drawn uniformly from the box.

    Aborts with ``DivergenceError`` once a training loss exceeds 1e3 times the first one.
    """
    fn = TARGETS[target] if isinstance(target, str) else target
    d = params.d
    rng = SeededRng(seed).derive(11)
    X_eval = grid(d, cfg.grid_points, cfg.low, cfg.high)
    init_mse, _ = heldout_errors(params, fn, X_eval)
    names = list(params.trainable()) if cfg.trainable is None else list(cfg.trainable)
    state = AdamState(lr=cfg.lr)
    p = params
    curve, heldout = [], [(0, init_mse)]
    first = None
    for step in range(cfg.steps):
        x = rng.uniform(cfg.low, cfg.high, (cfg.batch, d))
        y = rng.uniform(cfg.low, cfg.high, (cfg.batch, d))
        k = fn(x, y)
        with Tape() as tape:
            w = {n: (tape.watch(n, v) if n in names else ad.Tensor(v)) for n, v in p.trainable().items()}
            both = phi(np.vstack([x, y]), p, w)
            b = cfg.batch
            khat = ad.tsum(ad.take_rows(both, np.arange(b)) * ad.take_rows(both, np.arange(b, 2 * b)), axis=-1)
            loss = ad.mean((khat - k) ** 2)
        tape.backward(loss)
        value = float(loss.data)
        if first is None:
            first = value
        if not math.isfinite(value) or value > 1e3 * first:
            raise DivergenceError(f"kernel fit diverged at step {step}: loss {value:.3e}, initial {first:.3e}")
        grads = tape.gradients()
        state.lr = cosine_lr(cfg.lr, step, cfg.steps, min(100, cfg.steps // 10))
        new = adam_step(state, {n: p.trainable()[n] for n in names}, {n: grads[n] for n in names})
        p = p.with_weights(new)
        if step % cfg.eval_every == 0 or step == cfg.steps - 1:
            curve.append((step, value))
            if step:
                heldout.append((step + 1, heldout_errors(p, fn, X_eval)[0]))
    final_mse, sup = heldout_errors(p, fn, X_eval)
    return FitReport(p, init_mse, final_mse, sup, curve, heldout)
