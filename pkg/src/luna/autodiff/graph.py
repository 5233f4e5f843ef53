"""Losses over the feature map -> linear attention graph, their gradients, and a finite-difference check."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from luna import attention
from luna.autodiff import tensor as ad
from luna.autodiff.tensor import Tape, Tensor
from luna.features import FeatureMapSpec, LunaParams, phi

LOSS_KINDS = ("mse", "xent", "attn_kl", "attn_mse")

GradBundle = dict[str, np.ndarray]


class LossError(ValueError):
    pass


@dataclass
class Batch:
    """One attention problem.

    ``target`` is the regression target for ``mse`` (n x out) or the teacher
    attention rows for ``attn_kl``/``attn_mse`` (n x n, defaults to
    softmax(Q K^T / sqrt d)). ``labels`` are integer classes for ``xent``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    target: np.ndarray | None = None
    labels: np.ndarray | None = None
    eps: float = attention.DEFAULT_EPS


def teacher_rows(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return attention.attention_weights(q, k).data


def row_kl(teacher: np.ndarray, student: Tensor) -> Tensor:
    """Mean over rows of KL(teacher_row || student_row); 0 log 0 = 0."""
    teacher = np.asarray(teacher, float)
    ent = float(np.sum(np.where(teacher > 0, teacher * np.log(np.where(teacher > 0, teacher, 1.0)), 0.0)))
    cross = ad.tsum(ad.xlogy_const(teacher, student))
    rows = int(np.prod(teacher.shape[:-1]))
    return (ent - cross) * (1.0 / rows)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    return -ad.tsum(logp * onehot) * (1.0 / labels.size)


def _loss_graph(
    p: FeatureMapSpec,
    w: Mapping[str, Tensor],
    head: Mapping[str, Tensor] | None,
    batch: Batch,
    loss_kind: str,
) -> Tensor:
    phi_q = phi(batch.q, p, w)
    phi_k = phi(batch.k, p, w)
    if loss_kind in ("attn_kl", "attn_mse"):
        student = attention.kernel_rows(phi_q, phi_k, batch.eps)
        teacher = batch.target if batch.target is not None else teacher_rows(batch.q, batch.k)
        if np.shape(teacher) != student.shape:
            raise LossError(f"teacher rows have shape {np.shape(teacher)}, student rows {student.shape}")
        if loss_kind == "attn_kl":
            if np.any(student.data < 0):
                raise LossError("attn_kl needs nonnegative student rows (enable nonneg features)")
            return row_kl(teacher, student)
        return ad.mean((student - teacher) ** 2)

    out = attention.linear_attention(phi_q, phi_k, ad.as_tensor(batch.v), batch.eps)
    if head is not None:
        out = ad.matmul(out, head["w"]) + head["b"]
    if loss_kind == "mse":
        if batch.target is None:
            raise LossError("mse loss needs batch.target")
        return ad.mean((out - batch.target) ** 2)
    if loss_kind == "xent":
        if batch.labels is None:
            raise LossError("xent loss needs batch.labels")
        return cross_entropy(out, batch.labels)
    raise LossError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")


def forward_loss(
    params: FeatureMapSpec,
    batch: Batch,
    loss_kind: str = "mse",
    head: Mapping[str, np.ndarray] | None = None,
) -> tuple[float, Tape]:
    """Evaluate the scalar loss and return it with the recording tape.

    Trainable feature weights are watched under their own names, the optional
    classifier head under ``head.w`` / ``head.b``.
    """
    if loss_kind not in LOSS_KINDS:
        raise LossError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    with Tape() as tape:
        w = {k: tape.watch(k, v) for k, v in params.trainable().items()}
        h = None
        if head is not None:
            h = {"w": tape.watch("head.w", head["w"]), "b": tape.watch("head.b", head["b"])}
        loss = _loss_graph(params, w, h, batch, loss_kind)
    if not np.isfinite(loss.data):
        raise LossError(f"non-finite loss at stage '{loss_kind}'")
    tape.output = loss
    tape.frozen = params.frozen()
    return float(loss.data), tape


def backward(tape: Tape) -> GradBundle:
    """Exact reverse-mode gradients of the recorded scalar.

    Frozen arrays of the feature map (RFF frequencies, Bank+Coef bases) appear
    with all-zero gradients so the bundle mirrors every parameter field.
    """
    tape.backward()
    grads = tape.gradients()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise LossError(f"non-finite gradient for '{name}'")
    for name, value in tape.frozen.items():
        grads[name] = np.zeros_like(value)
    return grads


# ---------------------------------------------------------------- finite differences


@dataclass
class FdBlock:
    name: str
    max_rel_err: float
    checked: int
    skipped_kinks: int


@dataclass
class FdReport:
    tol: float
    step: float
    blocks: list[FdBlock] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(b.max_rel_err <= self.tol for b in self.blocks)

    def lines(self) -> list[str]:
        out = []
        for b in self.blocks:
            status = "PASS" if b.max_rel_err <= self.tol else "FAIL"
            out.append(
                f"{status} {b.name:10s} max_rel_err={b.max_rel_err:.3e} "
                f"checked={b.checked} skipped_kinks={b.skipped_kinks}"
            )
        return out


def _clear_projection_kinks(params: FeatureMapSpec, batch: Batch, margin: float, rng: np.random.Generator) -> Batch:
    """Nudge query/key rows whose projections sit within ``margin`` of a ReLU kink at u = 0."""
    if not isinstance(params, LunaParams):
        return batch
    W, b = params.weights["W"], params.weights["b"]
    q, k = batch.q.copy(), batch.k.copy()
    for x in (q, k):
        for _ in range(100):
            near = np.any(np.abs(x @ W.T + b) < margin, axis=-1)
            if not near.any():
                break
            x[near] += 1e-3 * rng.standard_normal(x[near].shape)
    return Batch(q, k, batch.v, batch.target, batch.labels, batch.eps)


def _loss_and_signature(params, batch, loss_kind, head) -> tuple[float, tuple]:
    with Tape() as tape:
        w = {k: tape.watch(k, v) for k, v in params.trainable().items()}
        h = None
        if head is not None:
            h = {"w": tape.watch("head.w", head["w"]), "b": tape.watch("head.b", head["b"])}
        loss = _loss_graph(params, w, h, batch, loss_kind)
    return float(loss.data), tape.kink_signature()


def fd_check(
    params: FeatureMapSpec,
    batch: Batch,
    loss_kind: str = "mse",
    step: float = 1e-5,
    tol: float = 1e-4,
    head: Mapping[str, np.ndarray] | None = None,
    kink_margin: float = 1e-6,
    seed: int = 0,
) -> FdReport:
    """Compare ``backward`` with central differences, block by block.

    Relative error uses the denominator max(1, |g|). Coordinates whose +/- step
    changes the active set of any ReLU/clip/min node are skipped and counted,
    since the derivative is not defined across a kink.
    """
    if not step > 0:
        raise ValueError(f"finite-difference step must be positive, got {step}")
    batch = _clear_projection_kinks(params, batch, kink_margin, np.random.default_rng(seed))
    _, tape = forward_loss(params, batch, loss_kind, head)
    grads = backward(tape)
    _, base_sig = _loss_and_signature(params, batch, loss_kind, head)

    blocks = [(k, v, "feature") for k, v in params.trainable().items()]
    if head is not None:
        blocks += [("head.w", head["w"], "head"), ("head.b", head["b"], "head")]

    report = FdReport(tol=tol, step=step)
    for name, value, kind in blocks:
        worst, checked, skipped = 0.0, 0, 0
        g_ad = grads[name]
        for idx in np.ndindex(value.shape):
            evals = []
            for sign in (1.0, -1.0):
                bumped = value.copy()
                bumped[idx] += sign * step
                if kind == "feature":
                    p2 = params.with_weights({name: bumped})
                    h2 = head
                else:
                    p2 = params
                    h2 = dict(head)
                    h2[name.split(".")[1]] = bumped
                evals.append(_loss_and_signature(p2, batch, loss_kind, h2))
            if evals[0][1] != base_sig or evals[1][1] != base_sig:
                skipped += 1
                continue
            g_fd = (evals[0][0] - evals[1][0]) / (2 * step)
            err = abs(g_fd - g_ad[idx]) / max(1.0, abs(g_ad[idx]))
            worst = max(worst, err)
            checked += 1
        report.blocks.append(FdBlock(name, worst, checked, skipped))
    return report
