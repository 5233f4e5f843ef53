"""Fixed-budget training of TinyTransformer classifiers on the synthetic tasks."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from luna.attention import AttentionError
from luna.training.model import TinyTransformer, matched_compute
from luna.training.optim import AdamState, adam_step, cosine_lr
from luna.training.tasks import SyntheticTask


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    warmup: int = 50
    eval_size: int = 512
    curve_every: int = 25
    on_degenerate: str = "raise"  # or "skip": drop the step, count it
    max_skip_frac: float = 0.05

    def __post_init__(self) -> None:
        if self.on_degenerate not in ("raise", "skip"):
            raise ValueError(f"on_degenerate must be 'raise' or 'skip', got {self.on_degenerate!r}")


@dataclass
class ClassifierReport:
    attention: str
    seed: int
    steps: int
    train_acc: float
    test_acc: float
    wall_time: float
    final_loss: float
    skipped_steps: int = 0
    degenerate_eval: int = 0
    curve: list[tuple[int, float]] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("curve")
        return d


def eval_sets(task: SyntheticTask, size: int):
    train = task.batch(task.stream("train").derive(1), size)
    test = task.fixed_split("test", size)
    return train, test


@dataclass
class RunLog:
    curve: list[tuple[int, float]] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def run_steps(
    model: TinyTransformer,
    task: SyntheticTask,
    cfg: TrainConfig,
    stream,
    trainable: list[str] | None = None,
    lr: float | None = None,
    steps: int | None = None,
) -> RunLog:
    """Train ``model`` in place on fresh batches from ``stream``.

    A degenerate attention denominator either propagates (``on_degenerate="raise"``)
    or drops that step; more than ``max_skip_frac`` dropped steps is a TrainingError.
    """
    names = list(model.params) if trainable is None else list(trainable)
    steps = cfg.steps if steps is None else steps
    base_lr = cfg.lr if lr is None else lr
    state = AdamState(lr=base_lr, weight_decay=cfg.weight_decay)
    log = RunLog()
    for step in range(steps):
        tokens, labels = task.batch(stream, cfg.batch)
        try:
            loss, grads = model.loss_and_grads(tokens, labels, names)
        except AttentionError as exc:
            if cfg.on_degenerate == "raise":
                raise TrainingError(f"degenerate attention at step {step}: {exc}") from exc
            log.skipped.append(step)
            if len(log.skipped) > cfg.max_skip_frac * steps:
                raise TrainingError(f"{len(log.skipped)} degenerate steps by step {step}") from exc
            continue
        except FloatingPointError as exc:
            raise TrainingError(f"non-finite loss at step {step}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}")
        state.lr = cosine_lr(base_lr, step, steps, min(cfg.warmup, steps // 4))
        new = adam_step(state, {k: model.params[k] for k in names}, grads)
        model.params.update(new)
        if step % cfg.curve_every == 0 or step == steps - 1:
            log.curve.append((step, loss))
    return log


def train_classifier(task: SyntheticTask, model: TinyTransformer, cfg: TrainConfig, seed: int = 0) -> ClassifierReport:
    """Train every parameter of ``model`` for ``cfg.steps`` Adam steps and report accuracies."""
    t0 = time.perf_counter()
    stream = task.stream("train").derive(0, seed)
    log = run_steps(model, task, cfg, stream)
    (xtr, ytr), (xte, yte) = eval_sets(task, cfg.eval_size)
    train_acc, _ = scored_accuracy(model, xtr, ytr, cfg.on_degenerate)
    test_acc, bad = scored_accuracy(model, xte, yte, cfg.on_degenerate)
    return ClassifierReport(
        attention=model.config.attention,
        seed=seed,
        steps=cfg.steps,
        train_acc=train_acc,
        test_acc=test_acc,
        wall_time=time.perf_counter() - t0,
        final_loss=log.curve[-1][1] if log.curve else math.nan,
        skipped_steps=len(log.skipped),
        degenerate_eval=bad,
        curve=log.curve,
    )


def scored_accuracy(model: TinyTransformer, tokens: np.ndarray, labels: np.ndarray, on_degenerate: str = "raise"):
    """(accuracy, degenerate count). Under "skip", examples whose attention is degenerate count as wrong."""
    try:
        return model.accuracy(tokens, labels), 0
    except AttentionError:
        if on_degenerate == "raise":
            raise
    hits, bad = 0, 0
    for i in range(len(tokens)):
        try:
            hits += int(model.logits(tokens[i : i + 1]).argmax() == labels[i])
        except AttentionError:
            bad += 1
    return hits / len(tokens), bad


@dataclass
class Comparison:
    """Per-variant test accuracies over seeds, emitted only for matched-compute variants."""

    accuracies: dict[str, list[float]]
    reports: list[ClassifierReport]

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accuracies[variant]))

    def se(self, variant: str) -> float:
        a = np.asarray(self.accuracies[variant])
        return float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0


def compare_variants(task: SyntheticTask, models: dict[str, list[TinyTransformer]], cfg: TrainConfig) -> Comparison:
    """Train every (variant, seed) model; the seed of run i is i."""
    variants = list(models)
    ref = models[variants[0]][0]
    for v in variants[1:]:
        matched_compute(ref, models[v][0])
    acc: dict[str, list[float]] = {v: [] for v in variants}
    reports = []
    for v in variants:
        for seed, m in enumerate(models[v]):
            r = train_classifier(task, m, cfg, seed)
            acc[v].append(r.test_acc)
            reports.append(r)
    return Comparison(acc, reports)
