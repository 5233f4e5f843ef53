"""Feature maps for kernelized attention: fixed RFF, Performer, Bank+Coef and the learnable LUNA map.

Every family is implemented once on autodiff tensors (``phi``) so the same code
serves inference, gradient checks and training. ``features`` is the plain numpy
entry point. Inputs are ``(..., d)`` arrays; outputs are ``(..., D)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from luna.autodiff import tensor as ad
from luna.autodiff.tensor import Tensor
from luna.numeric import SeededRng, as_rng, gaussian_matrix

PERFORMER_EXP_CLAMP = 40.0


class FeatureMapError(ValueError):
    """Raised when a feature evaluation produces a non-finite value; names the stage."""


def _check_finite(t: Tensor, family: str, stage: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FeatureMapError(f"{family}: non-finite value at stage '{stage}'")


# ---------------------------------------------------------------- RFF


@dataclass
class RffParams:
    """Cosine random Fourier features for the Gaussian kernel exp(-|x-y|^2 / (2 sqrt d))."""

    omegas: np.ndarray
    biases: np.ndarray
    bandwidth: float
    family: str = field(default="rff", init=False)

    @classmethod
    def sample(cls, rng: SeededRng | int, d: int, m: int, bandwidth: float | None = None) -> "RffParams":
        rng = as_rng(rng)
        bw = d ** -0.25 if bandwidth is None else float(bandwidth)
        omegas = gaussian_matrix(rng, m, d, bw)
        biases = rng.uniform(0.0, 2 * math.pi, m)
        return cls(omegas, biases, bw)

    @property
    def d(self) -> int:
        return self.omegas.shape[1]

    @property
    def out_dim(self) -> int:
        return self.omegas.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {}

    def frozen(self) -> dict[str, np.ndarray]:
        return {"omegas": self.omegas, "biases": self.biases}

    def hyper(self) -> dict:
        return {"bandwidth": self.bandwidth}


def gaussian_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """exp(-|x - y|^2 / (2 sqrt d)), the kernel approximated by default RFF."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    d = x.shape[-1]
    return np.exp(-np.sum((x - y) ** 2, axis=-1) / (2.0 * math.sqrt(d)))


def exp_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """exp(x.y / sqrt d), the softmax kernel approximated by Performer features."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    d = x.shape[-1]
    return np.exp(np.sum(x * y, axis=-1) / math.sqrt(d))


def _rff_phi(x: Tensor, p: RffParams) -> Tensor:
    m = p.out_dim
    proj = ad.matmul(x, p.omegas.T) + p.biases
    return ad.cos(proj) * math.sqrt(2.0 / m)


# ---------------------------------------------------------------- Performer


@dataclass
class PerformerParams:
    """Positive exponential features whose inner products are unbiased for exp(x.y / sqrt d).

    The frequencies are drawn from N(0, sqrt(d) I). That covariance is what makes
    E[phi(x).phi(y)] = exp(x.y / sqrt d) for phi_i(x) = exp((2 w_i.x - |x|^2) / (2 sqrt d)) / sqrt(m):
    E[exp(w.(x+y)/sqrt d)] = exp(s^2 |x+y|^2 / (2d)) must equal exp(|x+y|^2 / (2 sqrt d)),
    so s^2 = sqrt(d). A covariance of I / sqrt(d) is biased and fails the
    unbiasedness test (see tests/test_features.py).
    """

    omegas: np.ndarray
    scale_d: float
    family: str = field(default="performer", init=False)

    @classmethod
    def sample(cls, rng: SeededRng | int, d: int, m: int, covariance_scale: float | None = None) -> "PerformerParams":
        rng = as_rng(rng)
        var = math.sqrt(d) if covariance_scale is None else float(covariance_scale)
        return cls(gaussian_matrix(rng, m, d, math.sqrt(var)), math.sqrt(d))

    @property
    def d(self) -> int:
        return self.omegas.shape[1]

    @property
    def out_dim(self) -> int:
        return self.omegas.shape[0]

    def trainable(self) -> dict[str, np.ndarray]:
        return {}

    def frozen(self) -> dict[str, np.ndarray]:
        return {"omegas": self.omegas}

    def hyper(self) -> dict:
        return {"scale_d": self.scale_d}


def performer_exponent(x: np.ndarray, p: PerformerParams) -> np.ndarray:
    x = np.asarray(x, float)
    sq = np.sum(x * x, axis=-1, keepdims=True)
    return (2.0 * (x @ p.omegas.T) - sq) / (2.0 * p.scale_d)


def _performer_phi(x: Tensor, p: PerformerParams, stats: dict | None) -> Tensor:
    sq = ad.tsum(x * x, axis=-1, keepdims=True)
    z = (2.0 * ad.matmul(x, p.omegas.T) - sq) * (1.0 / (2.0 * p.scale_d))
    if stats is not None:
        stats["clamp_events"] = stats.get("clamp_events", 0) + int(np.sum(np.abs(z.data) > PERFORMER_EXP_CLAMP))
    z = ad.clip(z, -PERFORMER_EXP_CLAMP, PERFORMER_EXP_CLAMP)
    out = ad.exp(z) * (1.0 / math.sqrt(p.out_dim))
    _check_finite(out, "performer", "exponential")
    return out


# ---------------------------------------------------------------- LUNA


ENVELOPES = ("none", "scalar_mlp", "vector_mlp")


@dataclass(frozen=True)
class LunaConfig:
    d: int
    m: int = 8
    L: int = 8
    hidden: int = 64
    activation: str = "relu"
    nonneg: bool = True
    shared: bool = False
    envelope: str = "none"
    ch_rms: bool = False
    ch_rms_target: float = 0.1

    def __post_init__(self):
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.envelope not in ENVELOPES:
            raise ValueError(f"unknown envelope {self.envelope!r}")
        if min(self.d, self.m, self.L, self.hidden) < 1:
            raise ValueError("d, m, L and hidden must be positive")

    @property
    def out_dim(self) -> int:
        return self.m * self.L


@dataclass
class LunaParams:
    """Learnable feature map: projection bank, scalar channel MLPs, optional envelope.

    Weight names and shapes (shared mode is one 1->hidden->L MLP, separate mode is
    L independent 1->hidden->1 MLPs stacked along the first axis):

    ========== ==================== ====================
    name       shared               separate
    ========== ==================== ====================
    W          (m, d)               (m, d)
    b          (m,)                 (m,)
    fc1_w      (hidden,)            (L, hidden)
    fc1_b      (hidden,)            (L, hidden)
    fc2_w      (hidden, L)          (L, hidden)
    fc2_b      (L,)                 (L,)
    env_w1     (d, hidden)          envelope only
    env_b1     (hidden,)
    env_w2     (hidden, 1 or L)
    env_b2     (1 or L,)
    ========== ==================== ====================
    """

    config: LunaConfig
    weights: dict[str, np.ndarray]
    family: str = field(default="luna", init=False)

    @classmethod
    def init(cls, rng: SeededRng | int, config: LunaConfig) -> "LunaParams":
        rng = as_rng(rng)
        c = config
        w: dict[str, np.ndarray] = {
            "W": rng.normal((c.m, c.d), 1.0 / math.sqrt(c.d)),
            "b": np.zeros(c.m),
        }
        lead = () if c.shared else (c.L,)
        w["fc1_w"] = rng.normal(lead + (c.hidden,), 1.0)
        w["fc1_b"] = rng.normal(lead + (c.hidden,), 1.0)
        if c.shared:
            w["fc2_w"] = rng.normal((c.hidden, c.L), 1.0 / math.sqrt(c.hidden))
        else:
            w["fc2_w"] = rng.normal((c.L, c.hidden), 1.0 / math.sqrt(c.hidden))
        w["fc2_b"] = np.zeros(c.L)
        if c.envelope != "none":
            out = 1 if c.envelope == "scalar_mlp" else c.L
            w["env_w1"] = rng.normal((c.d, c.hidden), 1.0 / math.sqrt(c.d))
            w["env_b1"] = np.zeros(c.hidden)
            w["env_w2"] = rng.normal((c.hidden, out), 1.0 / math.sqrt(c.hidden))
            w["env_b2"] = np.zeros(out)
        return cls(config, w)

    @property
    def d(self) -> int:
        return self.config.d

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def trainable(self) -> dict[str, np.ndarray]:
        return self.weights

    def frozen(self) -> dict[str, np.ndarray]:
        return {}

    def hyper(self) -> dict:
        return asdict(self.config)

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "LunaParams":
        merged = dict(self.weights)
        merged.update({k: np.asarray(v, float) for k, v in weights.items()})
        return LunaParams(self.config, merged)


def channel_outputs(u: Tensor, config: LunaConfig, w: Mapping[str, Tensor]) -> Tensor:
    """Run scalar projections ``u`` of shape (..., m) through the channel MLPs -> (..., m, L)."""
    y = ad.scalar_mlp(u, w["fc1_w"], w["fc1_b"], w["fc2_w"], w["fc2_b"], config.activation, config.shared)
    if config.nonneg:
        y = ad.relu(y)
    return y


def envelope_values(x: Tensor, config: LunaConfig, w: Mapping[str, Tensor]) -> Tensor | None:
    """Tokenwise envelope: (..., 1) positive scalar (softplus) or (..., L) gate in (0, 1)."""
    if config.envelope == "none":
        return None
    act = ad.ACTIVATIONS[config.activation]
    hid = act(ad.matmul(x, w["env_w1"]) + w["env_b1"])
    z = ad.matmul(hid, w["env_w2"]) + w["env_b2"]
    return ad.softplus(z) if config.envelope == "scalar_mlp" else ad.sigmoid(z)


def _luna_phi(x: Tensor, p: LunaParams, w: Mapping[str, Tensor]) -> Tensor:
    c = p.config
    u = ad.matmul(x, ad.transpose(w["W"])) + w["b"]  # (..., m)
    _check_finite(u, "luna", "projection")
    y = channel_outputs(u, c, w)  # (..., m, L)
    _check_finite(y, "luna", "channel")
    if c.ch_rms:
        eps = 1e-6
        axes = tuple(range(y.ndim - 1))
        rms = ad.sqrt(ad.mean(y * y, axis=axes) + eps)  # (L,)
        s = ad.minimum(c.ch_rms_target / (rms + eps), 1.0)
        y = y * s
    env = envelope_values(x, c, w)
    if env is not None:
        _check_finite(env, "luna", "envelope")
        y = y * ad.expand_dims(env, -2)
    y = y * (1.0 / math.sqrt(c.m))
    return ad.reshape(y, y.shape[:-2] + (c.m * c.L,))


# ---------------------------------------------------------------- Bank+Coef


@dataclass
class BankCoefParams:
    """Fixed RFF bases mixed by learned global coefficients: phi = sum_l coeffs[l] * phi_l."""

    bases: list[RffParams]
    coeffs: np.ndarray
    family: str = field(default="bankcoef", init=False)

    def __post_init__(self):
        sizes = {b.out_dim for b in self.bases}
        if len(sizes) > 1:
            raise ValueError(f"bank bases have mismatched output lengths {sorted(sizes)}")
        if len(self.bases) != len(self.coeffs):
            raise ValueError("need exactly one coefficient per basis")

    @classmethod
    def sample(cls, rng: SeededRng | int, d: int, m: int, L: int = 8) -> "BankCoefParams":
        """L bases whose bandwidths span a factor 4 around the default d^{-1/4}."""
        rng = as_rng(rng)
        scales = np.geomspace(0.5, 2.0, L) if L > 1 else np.ones(1)
        bases = [RffParams.sample(rng, d, m, d ** -0.25 * s) for s in scales]
        return cls(bases, np.full(L, 1.0 / math.sqrt(L)))

    @property
    def d(self) -> int:
        return self.bases[0].d

    @property
    def out_dim(self) -> int:
        return self.bases[0].out_dim

    def trainable(self) -> dict[str, np.ndarray]:
        return {"coeffs": self.coeffs}

    def frozen(self) -> dict[str, np.ndarray]:
        out = {}
        for i, b in enumerate(self.bases):
            out[f"bases.{i}.omegas"] = b.omegas
            out[f"bases.{i}.biases"] = b.biases
        return out

    def hyper(self) -> dict:
        return {"bandwidths": [b.bandwidth for b in self.bases]}

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> "BankCoefParams":
        return BankCoefParams(self.bases, np.asarray(weights.get("coeffs", self.coeffs), float))


def _bankcoef_phi(x: Tensor, p: BankCoefParams, w: Mapping[str, Tensor]) -> Tensor:
    coeffs = w["coeffs"]
    blocks = [ad.expand_dims(_rff_phi(x, b), -1) for b in p.bases]  # each (..., D, 1)
    stacked = ad.concat(blocks, axis=-1)  # (..., D, L)
    return ad.tsum(stacked * coeffs, axis=-1)


# ---------------------------------------------------------------- dispatch

FeatureMapSpec = Union[RffParams, PerformerParams, LunaParams, BankCoefParams]


def with_trainable(p: FeatureMapSpec, weights: Mapping[str, np.ndarray]) -> FeatureMapSpec:
    if isinstance(p, (LunaParams, BankCoefParams)):
        return p.with_weights(weights)
    if weights:
        raise ValueError(f"{p.family} has no trainable weights")
    return p


def phi(x, p: FeatureMapSpec, weights: Mapping[str, Tensor] | None = None, stats: dict | None = None) -> Tensor:
    """Feature map on tensors. ``weights`` overrides the trainable arrays (e.g. watched leaves)."""
    x = ad.as_tensor(x)
    if x.shape[-1] != p.d:
        raise ValueError(f"{p.family} expects inputs of width {p.d}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x.data)):
        raise FeatureMapError(f"{p.family}: non-finite input")
    if weights is None:
        weights = {k: Tensor(v) for k, v in p.trainable().items()}
    if isinstance(p, RffParams):
        return _rff_phi(x, p)
    if isinstance(p, PerformerParams):
        return _performer_phi(x, p, stats)
    if isinstance(p, LunaParams):
        return _luna_phi(x, p, weights)
    if isinstance(p, BankCoefParams):
        return _bankcoef_phi(x, p, weights)
    raise TypeError(f"unknown feature map {type(p).__name__}")


def features(x: np.ndarray, p: FeatureMapSpec, stats: dict | None = None) -> np.ndarray:
    """Numpy feature map; a single vector maps to a vector, a batch to a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return phi(x[None, :], p, stats=stats).data[0]
    return phi(x, p, stats=stats).data


def rff_features(x, p: RffParams) -> np.ndarray:
    return features(x, p)


def performer_features(x, p: PerformerParams, stats: dict | None = None) -> np.ndarray:
    return features(x, p, stats)


def luna_features(x, p: LunaParams) -> np.ndarray:
    return features(x, p)


def bankcoef_features(x, p: BankCoefParams) -> np.ndarray:
    return features(x, p)


def kernel_estimate(phi_x: np.ndarray, phi_y: np.ndarray) -> float:
    phi_x, phi_y = np.asarray(phi_x, float), np.asarray(phi_y, float)
    if phi_x.shape != phi_y.shape or phi_x.ndim != 1:
        raise ValueError(f"kernel_estimate needs equal-length vectors, got {phi_x.shape} and {phi_y.shape}")
    return float(phi_x @ phi_y)


def gram_matrix(points: np.ndarray, p: FeatureMapSpec) -> np.ndarray:
    """G[i, j] = <phi(x_i), phi(x_j)>, exactly symmetric."""
    points = np.atleast_2d(np.asarray(points, float))
    if points.shape[0] < 1:
        raise ValueError("gram_matrix needs at least one point")
    f = features(points, p)
    g = f @ f.T
    return 0.5 * (g + g.T)


def make_feature_map(family: str, rng: SeededRng | int, d: int, D: int = 64, **luna_kw) -> FeatureMapSpec:
    """Construct a default instance of ``family`` with output width ``D``."""
    if family == "rff":
        return RffParams.sample(rng, d, D)
    if family == "performer":
        return PerformerParams.sample(rng, d, D)
    if family == "bankcoef":
        L = luna_kw.get("L", 8)
        return BankCoefParams.sample(rng, d, D, L)
    if family == "luna":
        cfg = LunaConfig(d=d, **luna_kw)
        if cfg.out_dim != D:
            raise ValueError(f"luna m*L = {cfg.out_dim} does not match D = {D}")
        return LunaParams.init(rng, cfg)
    raise ValueError(f"unknown feature family {family!r}")


FAMILIES = ("rff", "performer", "luna", "bankcoef")


# ---------------------------------------------------------------- serialization
# Floats are written as JSON numbers using Python's shortest round-trip repr
# (at most 17 significant digits), which restores every float64 bit-exactly.


def _pack(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot serialize non-finite parameters")
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unpack(obj: dict) -> np.ndarray:
    return np.array(obj["data"], dtype=np.float64).reshape(obj["shape"])


def params_to_dict(p: FeatureMapSpec) -> dict:
    doc = {"family": p.family, "hyper": p.hyper()}
    if isinstance(p, BankCoefParams):
        doc["arrays"] = {"coeffs": _pack(p.coeffs)}
        doc["bases"] = [params_to_dict(b) for b in p.bases]
        return doc
    arrays = {**p.frozen(), **p.trainable()}
    doc["arrays"] = {k: _pack(v) for k, v in arrays.items()}
    return doc


def params_from_dict(doc: dict) -> FeatureMapSpec:
    fam = doc["family"]
    arrays = {k: _unpack(v) for k, v in doc["arrays"].items()}
    hyper = doc["hyper"]
    if fam == "rff":
        return RffParams(arrays["omegas"], arrays["biases"], float(hyper["bandwidth"]))
    if fam == "performer":
        return PerformerParams(arrays["omegas"], float(hyper["scale_d"]))
    if fam == "luna":
        return LunaParams(LunaConfig(**hyper), arrays)
    if fam == "bankcoef":
        return BankCoefParams([params_from_dict(b) for b in doc["bases"]], arrays["coeffs"])
    raise ValueError(f"unknown family tag {fam!r}")


def save_params(p: FeatureMapSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(p)))


def load_params(path: str | Path) -> FeatureMapSpec:
    return params_from_dict(json.loads(Path(path).read_text()))
