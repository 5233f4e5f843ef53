"""Softmax -> LUNA conversion: attention distillation, then end-to-end finetuning."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from luna.autodiff.graph import Batch, backward, forward_loss
from luna.autodiff.tensor import Tensor
from luna.training.classify import ClassifierReport, TrainConfig, eval_sets, run_steps, train_classifier
from luna.training.model import PHI, ModelConfig, TinyTransformer
from luna.training.optim import AdamState, adam_step, cosine_lr
from luna.training.tasks import SyntheticTask


@dataclass(frozen=True)
class ConvertConfig:
    stage1_steps: int = 150
    stage2_steps: int = 150
    stage1_lr: float = 1e-2
    stage2_lr: float = 1e-3
    batch: int = 32
    distill_loss: str = "attn_kl"  # or "attn_mse"
    eval_size: int = 512
    distill_eval: int = 64


@dataclass
class DistillReport:
    initial_loss: float
    final_loss: float
    curve: list[tuple[int, float]] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.initial_loss / self.final_loss if self.final_loss > 0 else math.inf


@dataclass
class ConversionReport:
    seed: int
    two_stage: bool
    teacher_acc: float
    zero_step_acc: float
    student_acc: float
    recovery: float
    stage1_steps: int
    stage2_steps: int
    distill: DistillReport | None
    wall_time: float

    def row(self) -> dict:
        d = asdict(self)
        d["distill_initial"] = self.distill.initial_loss if self.distill else None
        d["distill_final"] = self.distill.final_loss if self.distill else None
        d.pop("distill")
        return d


def teacher_qk(teacher: TinyTransformer, tokens: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-layer (q, k) of shape (B, H, n, dh) from the teacher's own forward pass."""
    cap: list = []
    teacher.logits_graph({k: Tensor(v) for k, v in teacher.params.items()}, tokens, capture=cap)
    return cap


def distill_loss(student: TinyTransformer, qk, loss_kind: str, grads: bool = True):
    """Sum over layers of the row-matching loss; optionally with gradients for the phi weights."""
    total, g_all = 0.0, {}
    for l, (q, k) in enumerate(qk):
        fmap = student.current_map(l)
        batch = Batch(q, k, np.zeros(q.shape[:-1] + (1,)))
        loss, tape = forward_loss(fmap, batch, loss_kind)
        total += loss
        if grads:
            for name, g in backward(tape).items():
                key = f"layer{l}{PHI}{name}"
                if key in student.params:
                    g_all[key] = g
    return total, g_all


def distill_attention(
    teacher: TinyTransformer,
    student: TinyTransformer,
    task: SyntheticTask,
    steps: int,
    cfg: ConvertConfig = ConvertConfig(),
    seed: int = 0,
) -> DistillReport:
    """Fit the student's feature maps to the teacher's attention rows; everything else stays frozen.

    The student must share the teacher's Q/K/V projections. Held-out loss is
    measured on a fixed batch from the test stream before and after.
    """
    for k, v in teacher.params.items():
        if ".attn.w" in k and not np.array_equal(student.params[k], v):
            raise ValueError(f"student projection {k} differs from the teacher's")
    held_tokens, _ = task.batch(task.stream("test").derive(7), cfg.distill_eval)
    held = teacher_qk(teacher, held_tokens)
    initial, _ = distill_loss(student, held, cfg.distill_loss, grads=False)
    names = student.attention_param_names()
    state = AdamState(lr=cfg.stage1_lr)
    stream = task.stream("train").derive(2, seed)
    curve = []
    for step in range(steps):
        tokens, _ = task.batch(stream, cfg.batch)
        loss, grads = distill_loss(student, teacher_qk(teacher, tokens), cfg.distill_loss)
        state.lr = cosine_lr(cfg.stage1_lr, step, steps, min(20, steps // 4))
        student.params.update(adam_step(state, {k: student.params[k] for k in names}, grads))
        if step % 25 == 0 or step == steps - 1:
            curve.append((step, loss))
    final, _ = distill_loss(student, held, cfg.distill_loss, grads=False)
    return DistillReport(initial, final, curve)


def convert_and_finetune(
    teacher: TinyTransformer,
    task: SyntheticTask,
    cfg: ConvertConfig = ConvertConfig(),
    seed: int = 0,
    two_stage: bool = True,
    student_overrides: dict | None = None,
) -> ConversionReport:
    """Swap softmax for LUNA, optionally distill, then finetune all parameters.

    Without stage 1 the finetune runs for stage1_steps + stage2_steps so both
    arms get the same number of optimizer steps.
    """
    t0 = time.perf_counter()
    (_, _), (xte, yte) = eval_sets(task, cfg.eval_size)
    teacher_acc = teacher.accuracy(xte, yte)
    overrides = {"attention": "luna", **(student_overrides or {})}
    student = teacher.with_attention(1000 + seed, **overrides)
    zero_acc = student.accuracy(xte, yte)
    report = None
    s2 = cfg.stage2_steps
    if two_stage and cfg.stage1_steps > 0:
        report = distill_attention(teacher, student, task, cfg.stage1_steps, cfg, seed)
    elif not two_stage:
        s2 += cfg.stage1_steps
    if s2 > 0:
        tc = TrainConfig(steps=s2, batch=cfg.batch, lr=cfg.stage2_lr, warmup=min(20, s2 // 4))
        run_steps(student, task, tc, task.stream("train").derive(3, seed))
    acc = student.accuracy(xte, yte)
    return ConversionReport(
        seed=seed,
        two_stage=two_stage,
        teacher_acc=teacher_acc,
        zero_step_acc=zero_acc,
        student_acc=acc,
        recovery=acc / teacher_acc if teacher_acc > 0 else math.nan,
        stage1_steps=cfg.stage1_steps if two_stage else 0,
        stage2_steps=s2,
        distill=report,
        wall_time=time.perf_counter() - t0,
    )


ARMS = ("two_stage", "stage2_only")


def conversion_run(
    task: SyntheticTask,
    model: ModelConfig,
    teacher_cfg: TrainConfig,
    cfg: ConvertConfig = ConvertConfig(),
    seed: int = 0,
    student_overrides: dict | None = None,
    arms: tuple[str, ...] = ARMS,
) -> tuple[ClassifierReport, list[ConversionReport]]:
    """Train a softmax teacher for this seed, then convert it once per arm."""
    if model.attention != "softmax":
        raise ValueError("the teacher must use softmax attention")
    teacher = TinyTransformer.init(seed, model)
    teacher_report = train_classifier(task, teacher, teacher_cfg, seed)
    reports = [
        convert_and_finetune(teacher, task, cfg, seed, two_stage=arm == "two_stage", student_overrides=student_overrides)
        for arm in arms
    ]
    return teacher_report, reports
