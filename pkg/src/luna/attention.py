"""Softmax attention, kernelized linear attention, its quadratic oracle and the streaming form.

The batch functions accept numpy arrays or autodiff tensors with any leading
batch axes (``(..., n, d)``). Plain arrays in give plain arrays out.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from luna.autodiff import tensor as ad
from luna.autodiff.tensor import Tensor

DEFAULT_EPS = 1e-6


class AttentionError(ValueError):
    pass


def _array_io(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        plain = not any(isinstance(a, Tensor) for a in args)
        out = fn(*args, **kwargs)
        return out.data if plain else out

    return wrapper


def _check_denominator(raw: np.ndarray, eps: float) -> None:
    bad = np.abs(raw) <= eps
    if np.any(bad):
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise AttentionError(
            f"degenerate attention denominator at row {idx[-1]} (index {idx}): "
            f"|phi(q).sum_j phi(k_j)| = {abs(raw[idx]):.3e} <= eps = {eps:.1e}"
        )


def _check_finite(out: Tensor, what: str) -> None:
    if not np.all(np.isfinite(out.data)):
        raise AttentionError(f"{what} produced non-finite output")


def attention_weights(q, k) -> Tensor:
    """Row-stochastic softmax(q k^T / sqrt d), stabilized by row-max subtraction."""
    q, k = ad.as_tensor(q), ad.as_tensor(k)
    d = q.shape[-1]
    if d < 1:
        raise ValueError("query width must be at least 1")
    scores = ad.matmul(q, ad.transpose(k, _swap_axes(k.ndim))) * (1.0 / math.sqrt(d))
    return ad.softmax(scores, axis=-1)


def _swap_axes(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


@_array_io
def softmax_attention(q, k, v) -> Tensor:
    _check_shapes(q, k, v)
    out = ad.matmul(attention_weights(q, k), v)
    _check_finite(out, "softmax_attention")
    return out


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, Tensor) else np.shape(x)


def _check_shapes(q, k, v) -> None:
    qs, ks, vs = _shape(q), _shape(k), _shape(v)
    if len(qs) < 2 or qs[-1] != ks[-1] or ks[-2] != vs[-2]:
        raise ValueError(f"inconsistent attention shapes q={qs} k={ks} v={vs}")


def sufficient_statistics(phi_k, v) -> tuple[Tensor, Tensor]:
    """S_KV = phi(K)^T V of shape (..., D, d_v) and S_K1 = phi(K)^T 1 of shape (..., D)."""
    phi_k, v = ad.as_tensor(phi_k), ad.as_tensor(v)
    s_kv = ad.matmul(ad.transpose(phi_k, _swap_axes(phi_k.ndim)), v)
    s_k1 = ad.tsum(phi_k, axis=-2)
    return s_kv, s_k1


@_array_io
def linear_attention(phi_q, phi_k, v, eps: float = DEFAULT_EPS) -> Tensor:
    """out_i = phi(q_i)^T S_KV / (phi(q_i)^T S_K1 + eps); never forms an n x n matrix."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_shapes(phi_q, phi_k, v)
    phi_q = ad.as_tensor(phi_q)
    s_kv, s_k1 = sufficient_statistics(phi_k, v)
    num = ad.matmul(phi_q, s_kv)  # (..., n, d_v)
    raw = ad.matmul(phi_q, ad.expand_dims(s_k1, -1))  # (..., n, 1)
    _check_denominator(raw.data[..., 0], eps)
    out = num / (raw + eps)
    _check_finite(out, "linear_attention")
    return out


def kernel_rows(phi_q, phi_k, eps: float = DEFAULT_EPS) -> Tensor:
    """Row-normalized kernel weights A / (A 1 + eps) with A = phi(Q) phi(K)^T (materialized)."""
    phi_q, phi_k = ad.as_tensor(phi_q), ad.as_tensor(phi_k)
    a = ad.matmul(phi_q, ad.transpose(phi_k, _swap_axes(phi_k.ndim)))
    raw = ad.tsum(a, axis=-1, keepdims=True)
    _check_denominator(raw.data[..., 0], eps)
    return a / (raw + eps)


@_array_io
def quadratic_oracle(phi_q, phi_k, v, eps: float = DEFAULT_EPS) -> Tensor:
    """Same contract as ``linear_attention`` computed through the explicit n x n matrix."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    _check_shapes(phi_q, phi_k, v)
    out = ad.matmul(kernel_rows(phi_q, phi_k, eps), v)
    _check_finite(out, "quadratic_oracle")
    return out


@dataclass(frozen=True)
class StreamState:
    s_kv: np.ndarray  # (D, d_v)
    s_k1: np.ndarray  # (D,)
    tokens_seen: int = 0

    @classmethod
    def empty(cls, D: int, d_v: int) -> "StreamState":
        return cls(np.zeros((D, d_v)), np.zeros(D), 0)


def stream_update(state: StreamState, phi_k_t: np.ndarray, v_t: np.ndarray) -> StreamState:
    phi_k_t = np.asarray(phi_k_t, float)
    v_t = np.asarray(v_t, float)
    if phi_k_t.shape != state.s_k1.shape or v_t.shape != state.s_kv.shape[1:]:
        raise ValueError(
            f"token shapes phi={phi_k_t.shape} v={v_t.shape} do not match state "
            f"S_KV={state.s_kv.shape}"
        )
    return StreamState(state.s_kv + np.outer(phi_k_t, v_t), state.s_k1 + phi_k_t, state.tokens_seen + 1)


def stream_query(state: StreamState, phi_q: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    if state.tokens_seen < 1:
        raise AttentionError("stream_query on an empty state")
    phi_q = np.asarray(phi_q, float)
    raw = float(phi_q @ state.s_k1)
    _check_denominator(np.array([raw]), eps)
    return (phi_q @ state.s_kv) / (raw + eps)


def blocked_linear_attention(q, k, v, feature_fn, block: int = 256, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Linear attention over raw (n, d) inputs, featurizing ``block`` tokens at a time.

    One pass over key blocks accumulates S_KV and S_K1, a second pass over query
    blocks writes the output rows. Working memory beyond q, k, v and the output
    is O(block D) whatever n is. ``feature_fn`` must act row by row, so maps
    with batch statistics (LUNA channel RMS) do not qualify.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if block < 1:
        raise ValueError("block must be positive")
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or len(k) != len(v) or len(k) < 1:
        raise ValueError(f"expected q (n, d), k (n, d), v (n, d_v) with n >= 1, got {q.shape}, {k.shape}, {v.shape}")
    s_kv = s_k1 = None
    for i in range(0, len(k), block):
        fk = feature_fn(k[i : i + block])
        if s_kv is None:
            s_kv, s_k1 = fk.T @ v[i : i + block], fk.sum(axis=0)
        else:
            s_kv += fk.T @ v[i : i + block]
            s_k1 += fk.sum(axis=0)
    out = np.empty((len(q), v.shape[1]))
    for i in range(0, len(q), block):
        fq = feature_fn(q[i : i + block])
        raw = fq @ s_k1
        bad = np.flatnonzero(np.abs(raw) <= eps)
        if len(bad):
            raise AttentionError(
                f"degenerate attention denominator at row {i + bad[0]}: "
                f"|phi(q).sum_j phi(k_j)| = {abs(raw[bad[0]]):.3e} <= eps = {eps:.1e}"
            )
        out[i : i + block] = (fq @ s_kv) / (raw + eps)[:, None]
    if not np.all(np.isfinite(out)):
        raise AttentionError("blocked_linear_attention: non-finite output")
    return out
