"""A one- or two-layer pre-norm transformer classifier with pluggable attention."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Mapping

import numpy as np

from luna import attention as attn_ops
from luna.autodiff import tensor as ad
from luna.autodiff.tensor import Tape, Tensor
from luna.features import (
    BankCoefParams,
    FeatureMapSpec,
    LunaConfig,
    LunaParams,
    PerformerParams,
    RffParams,
    phi,
    with_trainable,
)
from luna.numeric import SeededRng, as_rng

ATTENTION_KINDS = ("softmax", "luna", "rff", "performer", "bankcoef")
PHI = ".attn.phi."


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    n_classes: int
    d_model: int = 32
    heads: int = 2
    d_ff: int = 64
    layers: int = 1
    attention: str = "softmax"
    D: int = 64
    luna_m: int = 8
    luna_L: int = 8
    luna_hidden: int = 16
    luna_activation: str = "relu"
    luna_shared: bool = False
    luna_envelope: str = "none"
    luna_ch_rms: bool = False
    bank_L: int = 4
    attn_residual: bool = True
    eps: float = attn_ops.DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if not 1 <= self.layers <= 2:
            raise ValueError("TinyTransformer supports 1 or 2 layers")
        if self.attention == "luna" and self.luna_m * self.luna_L != self.D:
            raise ValueError(f"luna m*L = {self.luna_m * self.luna_L} must equal D = {self.D}")

    @property
    def dh(self) -> int:
        return self.d_model // self.heads

    @property
    def feature_dim(self) -> int | None:
        return None if self.attention == "softmax" else self.D


def _make_map(cfg: ModelConfig, rng: SeededRng) -> FeatureMapSpec | None:
    d = cfg.dh
    if cfg.attention == "softmax":
        return None
    if cfg.attention == "rff":
        return RffParams.sample(rng, d, cfg.D)
    if cfg.attention == "performer":
        return PerformerParams.sample(rng, d, cfg.D)
    if cfg.attention == "bankcoef":
        return BankCoefParams.sample(rng, d, cfg.D, cfg.bank_L)
    lc = LunaConfig(
        d=d,
        m=cfg.luna_m,
        L=cfg.luna_L,
        hidden=cfg.luna_hidden,
        activation=cfg.luna_activation,
        shared=cfg.luna_shared,
        envelope=cfg.luna_envelope,
        ch_rms=cfg.luna_ch_rms,
    )
    return LunaParams.init(rng, lc)


class TinyTransformer:
    """Embedding -> [pre-RMSNorm attention + residual, pre-RMSNorm MLP + residual] x layers -> mean-pool -> head.

    All trainable arrays live in ``params`` under flat names; the feature map of
    layer l keeps its trainable arrays there as ``layer{l}.attn.phi.<name>`` and
    its frozen random draws inside ``maps[l]``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], maps: list):
        self.config = config
        self.params = params
        self.maps = maps

    @classmethod
    def init(cls, rng: SeededRng | int, config: ModelConfig) -> "TinyTransformer":
        rng = as_rng(rng)
        c = config
        backbone = rng.derive(0)
        p: dict[str, np.ndarray] = {"embed": backbone.normal((c.vocab, c.d_model), 1.0)}
        hd = c.heads * c.dh
        for l in range(c.layers):
            pre = f"layer{l}."
            p[pre + "norm1.g"] = np.ones(c.d_model)
            for name in ("wq", "wk", "wv"):
                p[pre + "attn." + name] = backbone.normal((c.d_model, hd), 1.0 / math.sqrt(c.d_model))
            p[pre + "attn.wo"] = backbone.normal((hd, c.d_model), 1.0 / math.sqrt(hd))
            p[pre + "norm2.g"] = np.ones(c.d_model)
            p[pre + "mlp.w1"] = backbone.normal((c.d_model, c.d_ff), 1.0 / math.sqrt(c.d_model))
            p[pre + "mlp.b1"] = np.zeros(c.d_ff)
            p[pre + "mlp.w2"] = backbone.normal((c.d_ff, c.d_model), 1.0 / math.sqrt(c.d_ff))
            p[pre + "mlp.b2"] = np.zeros(c.d_model)
        p["final_norm.g"] = np.ones(c.d_model)
        p["head.w"] = backbone.normal((c.d_model, c.n_classes), 1.0 / math.sqrt(c.d_model))
        p["head.b"] = np.zeros(c.n_classes)
        # feature maps draw from their own stream so the backbone is identical across variants
        maps = [_make_map(c, rng.derive(1, l)) for l in range(c.layers)]
        for l, fm in enumerate(maps):
            if fm is not None:
                for k, v in fm.trainable().items():
                    p[f"layer{l}{PHI}{k}"] = v.copy()
        return cls(c, p, maps)

    # ------------------------------------------------------------ bookkeeping

    def attention_param_names(self) -> list[str]:
        return [k for k in self.params if PHI in k]

    def param_counts(self) -> dict[str, int]:
        attn = sum(self.params[k].size for k in self.attention_param_names())
        total = sum(v.size for v in self.params.values())
        return {"total": total, "attention_internal": attn, "backbone": total - attn}

    def current_map(self, layer: int) -> FeatureMapSpec | None:
        fm = self.maps[layer]
        if fm is None:
            return None
        prefix = f"layer{layer}{PHI}"
        return with_trainable(fm, {k[len(prefix) :]: v for k, v in self.params.items() if k.startswith(prefix)})

    def copy(self) -> "TinyTransformer":
        return TinyTransformer(self.config, {k: v.copy() for k, v in self.params.items()}, list(self.maps))

    def with_attention(self, rng: SeededRng | int, **overrides) -> "TinyTransformer":
        """Same backbone weights, freshly initialized attention of another kind."""
        cfg = replace(self.config, **overrides)
        fresh = TinyTransformer.init(rng, cfg)
        params = {k: v.copy() for k, v in self.params.items() if PHI not in k}
        params.update({k: v for k, v in fresh.params.items() if PHI in k})
        return TinyTransformer(cfg, params, fresh.maps)

    # ------------------------------------------------------------ forward

    def _heads(self, x: Tensor, w: Tensor) -> Tensor:
        B, n, _ = x.shape
        c = self.config
        y = ad.reshape(ad.matmul(x, w), (B, n, c.heads, c.dh))
        return y.swapaxes(1, 2)  # (B, H, n, dh)

    def projections(self, w: Mapping[str, Tensor], x: Tensor, layer: int):
        pre = f"layer{layer}."
        h = _rmsnorm(x, w[pre + "norm1.g"])
        return (
            self._heads(h, w[pre + "attn.wq"]),
            self._heads(h, w[pre + "attn.wk"]),
            self._heads(h, w[pre + "attn.wv"]),
        )

    def embed(self, w: Mapping[str, Tensor], tokens: np.ndarray) -> Tensor:
        return ad.tsum(ad.take_rows(w["embed"], tokens), axis=2)

    def logits_graph(self, w: Mapping[str, Tensor], tokens: np.ndarray, capture: list | None = None) -> Tensor:
        c = self.config
        x = self.embed(w, tokens)
        B, n, _ = x.shape
        for l in range(c.layers):
            pre = f"layer{l}."
            q, k, v = self.projections(w, x, l)
            if capture is not None:
                capture.append((q.data, k.data))
            fm = self.maps[l]
            if fm is None:
                o = attn_ops.softmax_attention(q, k, v)
            else:
                fw = {name[len(pre + "attn.phi.") :]: t for name, t in w.items() if name.startswith(pre + "attn.phi.")}
                o = attn_ops.linear_attention(phi(q, fm, fw or None), phi(k, fm, fw or None), v, c.eps)
            o = ad.reshape(o.swapaxes(1, 2), (B, n, c.heads * c.dh))
            o = ad.matmul(o, w[pre + "attn.wo"])
            x = x + o if c.attn_residual else o
            h = _rmsnorm(x, w[pre + "norm2.g"])
            h = ad.relu(ad.matmul(h, w[pre + "mlp.w1"]) + w[pre + "mlp.b1"])
            x = x + ad.matmul(h, w[pre + "mlp.w2"]) + w[pre + "mlp.b2"]
        pooled = _rmsnorm(ad.mean(x, axis=1), w["final_norm.g"])
        return ad.matmul(pooled, w["head.w"]) + w["head.b"]

    def logits(self, tokens: np.ndarray, batch: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(tokens), batch):
            w = {k: Tensor(v) for k, v in self.params.items()}
            out.append(self.logits_graph(w, tokens[i : i + batch]).data)
        return np.concatenate(out)

    def accuracy(self, tokens: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.logits(tokens).argmax(axis=1) == labels))

    def loss_and_grads(
        self, tokens: np.ndarray, labels: np.ndarray, trainable: list[str] | None = None
    ) -> tuple[float, dict[str, np.ndarray]]:
        names = list(self.params) if trainable is None else trainable
        with Tape() as tape:
            w = {k: (tape.watch(k, v) if k in names else Tensor(v)) for k, v in self.params.items()}
            logits = self.logits_graph(w, tokens)
            loss = _xent(logits, labels)
        if not np.isfinite(loss.data):
            raise FloatingPointError("non-finite training loss")
        tape.backward(loss)
        grads = tape.gradients()
        return float(loss.data), {k: grads[k] for k in names}

    def describe(self) -> dict:
        return {"config": asdict(self.config), "params": self.param_counts()}


def _rmsnorm(x: Tensor, g: Tensor) -> Tensor:
    return x / ad.sqrt(ad.mean(x * x, axis=-1, keepdims=True) + 1e-6) * g


def _xent(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.tsum(logp * onehot) * (1.0 / len(labels))


def matched_compute(a: TinyTransformer, b: TinyTransformer) -> None:
    """Raise unless two models differ only inside the attention module at equal D."""
    ca, cb = a.param_counts(), b.param_counts()
    if ca["backbone"] != cb["backbone"]:
        raise ValueError(f"backbone parameter counts differ: {ca['backbone']} vs {cb['backbone']}")
    da, db = a.config.feature_dim, b.config.feature_dim
    if da is not None and db is not None and da != db:
        raise ValueError(f"feature dimensions differ: D={da} vs D={db}")
