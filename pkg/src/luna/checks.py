"""Randomized self-checks shared by the CLI and the acceptance suite.

Each check draws its configurations from a seeded stream, so a (seed, count)
pair always names the same set of cases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from luna import attention as attn
from luna.autodiff.graph import Batch, FdReport, fd_check
from luna.features import (
    FAMILIES,
    LunaConfig,
    LunaParams,
    PerformerParams,
    exp_kernel,
    features,
    gram_matrix,
    make_feature_map,
)
from luna.numeric import SeededRng, symmetric_eigenvalues

LUNA_VARIANTS = (
    dict(),
    dict(shared=True),
    dict(activation="tanh", envelope="scalar_mlp"),
    dict(activation="sigmoid", envelope="vector_mlp"),
    dict(shared=True, ch_rms=True, ch_rms_target=10.0),
)
FD_LOSSES = ("mse", "xent", "attn_kl", "attn_mse")


# ---------------------------------------------------------------- equivalence


@dataclass(frozen=True)
class EquivCase:
    index: int
    family: str
    n: int
    d: int
    D: int
    d_v: int
    linear_vs_oracle: float
    batch_vs_stream: float
    redraws: int = 0

    def passed(self, tol: float) -> bool:
        return self.linear_vs_oracle <= tol and self.batch_vs_stream <= tol


def _luna_shape(rng: SeededRng, D: int) -> dict:
    divisors = [L for L in range(1, D + 1) if D % L == 0 and D // L <= 16]
    L = divisors[int(rng.integers(0, len(divisors)))]
    return {"m": D // L, "L": L}


def equivalence_cases(count: int = 50, seed: int = 0, families=FAMILIES, max_redraws: int = 10) -> list[EquivCase]:
    """Linear attention against the materialized oracle and against token-by-token streaming.

    Inputs are scaled to norm about 0.5 so the signed RFF and Bank+Coef
    denominators stay far from zero. A map whose denominator is degenerate on
    the drawn inputs must be rejected by all three paths alike; it is then
    redrawn (up to ``max_redraws`` times) and counted. A path that disagrees on
    rejection scores an infinite error.
    """
    out = []
    families = list(families)
    for i in range(count if families else 0):
        rng = SeededRng(seed).derive(i)
        family = families[i % len(families)]
        n, d, d_v = int(rng.integers(1, 65)), int(rng.integers(1, 17)), int(rng.integers(1, 17))
        D = 8 * int(rng.integers(1, 9))
        kw = _luna_shape(rng, D) if family == "luna" else {}
        q = rng.normal((n, d), 0.5 / np.sqrt(d))
        k = rng.normal((n, d), 0.5 / np.sqrt(d))
        v = rng.normal((n, d_v))
        for redraw in range(max_redraws + 1):
            p = make_feature_map(family, rng.derive(0, redraw), d, D, **kw)
            fq, fk = features(q, p), features(k, p)
            results = [_attempt(path, fq, fk, v) for path in (_batch, _oracle, _streamed)]
            if all(r is None for r in results):
                continue
            if any(r is None for r in results):
                out.append(EquivCase(i, family, n, d, D, d_v, np.inf, np.inf, redraw))
            else:
                lin, orc, st = results
                out.append(EquivCase(i, family, n, d, D, d_v, _maxabs(lin, orc), _maxabs(lin, st), redraw))
            break
        else:
            raise attn.AttentionError(f"case {i}: {max_redraws + 1} degenerate {family} maps in a row")
    return out


def _maxabs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def _attempt(path, fq, fk, v):
    try:
        return path(fq, fk, v)
    except attn.AttentionError:
        return None


def _batch(fq, fk, v):
    return attn.linear_attention(fq, fk, v)


def _oracle(fq, fk, v):
    return attn.quadratic_oracle(fq, fk, v)


def _streamed(fq, fk, v):
    state = attn.StreamState.empty(fq.shape[1], v.shape[1])
    for t in range(len(fk)):
        state = attn.stream_update(state, fk[t], v[t])
    return np.stack([attn.stream_query(state, fq[t]) for t in range(len(fq))])


# ---------------------------------------------------------------- Gram spectra


@dataclass(frozen=True)
class GramCase:
    family: str
    seed: int
    min_eig: float
    max_eig: float

    def passed(self, rel_tol: float) -> bool:
        return self.min_eig >= -rel_tol * self.max_eig


def gram_cases(
    families=FAMILIES, points: int = 64, seeds: int = 10, d: int = 8, D: int = 64, seed: int = 0, corrupt: bool = False
) -> list[GramCase]:
    """Extreme eigenvalues of the induced Gram matrix on Gaussian points.

    ``corrupt`` subtracts twice the identity from every Gram; it exists to
    exercise the failure path.
    """
    out = []
    for family in families:
        for s in range(seeds):
            rng = SeededRng(seed).derive(FAMILIES.index(family), s)
            p = make_feature_map(family, rng.derive(0), d, D)
            X = rng.normal((points, d), 1.0 / np.sqrt(d))
            G = gram_matrix(X, p)
            if corrupt:
                G = G - 2.0 * np.eye(points)
            eig = symmetric_eigenvalues(G)
            out.append(GramCase(family, s, float(eig[0]), float(eig[-1])))
    return out


# ---------------------------------------------------------------- Performer bias


def performer_z_scores(
    d: int = 8, m: int = 64, redraws: int = 500, pairs: int = 10, seed: int = 11, covariance_scale: float | None = None
) -> np.ndarray:
    """|mean k_hat - exp(x.y / sqrt d)| / SE per pair, over independent frequency redraws; |x|, |y| <= 1."""
    base = SeededRng(seed)
    X, Y = base.normal((pairs, d)), base.normal((pairs, d))
    X /= np.maximum(1.0, np.linalg.norm(X, axis=1))[:, None]
    Y /= np.maximum(1.0, np.linalg.norm(Y, axis=1))[:, None]
    ks = np.empty((redraws, pairs))
    for r in range(redraws):
        p = PerformerParams.sample(base.derive(r), d, m, covariance_scale)
        ks[r] = np.sum(features(X, p) * features(Y, p), axis=1)
    se = ks.std(axis=0, ddof=1) / np.sqrt(redraws)
    return np.abs(ks.mean(axis=0) - exp_kernel(X, Y)) / se


# ---------------------------------------------------------------- gradients


@dataclass
class GradCase:
    index: int
    loss: str
    variant: dict
    report: FdReport


def grad_cases(count: int = 5, seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> list[GradCase]:
    """fd_check over random LUNA graphs, cycling through map variants and losses.

    mse and xent cases carry a linear head so its blocks are checked too.
    """
    out = []
    for i in range(count):
        rng = SeededRng(seed).derive(i)
        variant = LUNA_VARIANTS[i % len(LUNA_VARIANTS)]
        loss = FD_LOSSES[i % len(FD_LOSSES)]
        n, d, d_v = int(rng.integers(3, 9)), int(rng.integers(2, 7)), int(rng.integers(1, 5))
        p = LunaParams.init(rng.derive(0), LunaConfig(d=d, m=4, L=4, hidden=8, **variant))
        q, k, v = rng.normal((n, d)), rng.normal((n, d)), rng.normal((n, d_v))
        head = None
        if loss == "mse":
            batch = Batch(q, k, v, target=rng.normal((n, 2)))
            head = {"w": rng.normal((d_v, 2)), "b": rng.normal(2)}
        elif loss == "xent":
            batch = Batch(q, k, v, labels=rng.integers(0, 3, n))
            head = {"w": rng.normal((d_v, 3)), "b": rng.normal(3)}
        else:
            batch = Batch(q, k, v)
        out.append(GradCase(i, loss, variant, fd_check(p, batch, loss, step=step, tol=tol, head=head, seed=i)))
    return out
