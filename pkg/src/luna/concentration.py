"""Monte-Carlo experiments on the sampling error of random-feature kernel estimates.

For every family the estimator is k_hat(x, y) = (1/m) sum_i phi(x; w_i) . phi(y; w_i)
with fresh draws w_1..w_m. Errors are measured against a closed-form kernel
(RFF -> Gaussian, Performer -> exponential) or, for LUNA, against a surrogate
estimate that uses ``ref_factor`` times the largest m of the sweep.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from luna.features import (
    LunaConfig,
    LunaParams,
    PerformerParams,
    RffParams,
    exp_kernel,
    features,
    gaussian_kernel,
)
from luna.numeric import SeededRng, fit_line

MC_FAMILIES = ("rff", "performer", "luna", "constant")
REGIMES = ("bounded", "unbounded")

# child-stream keys; (m, trial) streams use two keys so they never collide with these
_POINTS, _CHANNELS, _REFERENCE, _TRUNCATION = 0, 1, 2, 3
_CHUNK = 2048


class ReferenceUnavailable(ValueError):
    pass


@dataclass(frozen=True)
class McSweepConfig:
    family: str = "rff"
    d: int = 4
    n_pairs: int = 10
    m_schedule: tuple[int, ...] = tuple(16 * 2**i for i in range(9))
    trials: int = 200
    seed: int = 0
    regime: str = "bounded"
    eps_percentiles: tuple[float, ...] = (30.0, 50.0, 70.0, 90.0)
    eps_grid: tuple[float, ...] | None = None
    L: int = 4
    hidden: int = 16
    ref_factor: int = 64

    def __post_init__(self) -> None:
        object.__setattr__(self, "m_schedule", tuple(int(m) for m in self.m_schedule))
        if self.family not in MC_FAMILIES:
            raise ValueError(f"family must be one of {MC_FAMILIES}, got {self.family!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        ms = self.m_schedule
        if not ms or ms[0] < 1 or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"m schedule must be positive and strictly increasing, got {ms}")
        if self.trials < 20:
            raise ValueError(f"need at least 20 trials per m, got {self.trials}")
        if self.n_pairs < 1 or self.d < 1:
            raise ValueError("n_pairs and d must be positive")
        if self.eps_grid is not None:
            object.__setattr__(self, "eps_grid", tuple(sorted(float(e) for e in self.eps_grid)))


class SampledFeatureMap:
    """Per-sample features phi(x; w) of one family, with the non-random parts fixed by the seed.

    LUNA draws projection rows w ~ N(0, I_d) and keeps the channel MLPs fixed;
    sigmoid hidden units make every channel bounded, ReLU units leave them unbounded.
    """

    def __init__(self, cfg: McSweepConfig):
        self.cfg = cfg
        root = SeededRng(cfg.seed)
        self._channels: dict[str, np.ndarray] = {}
        if cfg.family == "luna":
            act = "sigmoid" if cfg.regime == "bounded" else "relu"
            proto = LunaParams.init(root.derive(_CHANNELS), self._luna_config(1, act))
            self._channels = {k: v for k, v in proto.weights.items() if k not in ("W", "b")}
            self.activation = act
        pts = root.derive(_POINTS)
        scale = 1.0 / math.sqrt(cfg.d)
        self.X = pts.uniform(-1.0, 1.0, (cfg.n_pairs, cfg.d)) * scale
        self.Y = pts.uniform(-1.0, 1.0, (cfg.n_pairs, cfg.d)) * scale

    def _luna_config(self, m: int, activation: str) -> LunaConfig:
        return LunaConfig(d=self.cfg.d, m=m, L=self.cfg.L, hidden=self.cfg.hidden, activation=activation)

    def draw(self, rng: SeededRng, m: int):
        c = self.cfg
        if c.family == "rff":
            return RffParams.sample(rng, c.d, m)
        if c.family == "performer":
            return PerformerParams.sample(rng, c.d, m)
        if c.family == "luna":
            w = dict(self._channels, W=rng.normal((m, c.d)), b=np.zeros(m))
            return LunaParams(self._luna_config(m, self.activation), w)
        return None  # constant map: phi = 1 for every sample

    @staticmethod
    def omegas(p) -> np.ndarray:
        return p.weights["W"] if isinstance(p, LunaParams) else p.omegas

    def per_sample(self, x: np.ndarray, p, m: int) -> np.ndarray:
        """phi(x; w_i) for each draw, shape (n, m, channels)."""
        if p is None:
            return np.ones((x.shape[0], m, 1))
        return features(x, p).reshape(x.shape[0], m, -1) * math.sqrt(m)

    def estimate(self, rng: SeededRng, m: int) -> np.ndarray:
        """k_hat on every (x_j, y_j) pair from m fresh draws, evaluated in chunks."""
        total = np.zeros(self.cfg.n_pairs)
        done = 0
        while done < m:
            mc = min(_CHUNK, m - done)
            p = self.draw(rng, mc)
            fx, fy = self.per_sample(self.X, p, mc), self.per_sample(self.Y, p, mc)
            total += np.einsum("nmc,nmc->n", fx, fy)
            done += mc
        return total / m

    def reference(self) -> np.ndarray:
        c = self.cfg
        if c.family == "rff":
            return gaussian_kernel(self.X, self.Y)
        if c.family == "performer":
            return exp_kernel(self.X, self.Y)
        if c.family == "constant":
            return np.ones(c.n_pairs)
        if c.ref_factor < 64:
            raise ReferenceUnavailable(f"LUNA surrogate needs ref_factor >= 64, got {c.ref_factor}")
        m_ref = c.ref_factor * max(c.m_schedule)
        return self.estimate(SeededRng(c.seed).derive(_REFERENCE), m_ref)


@dataclass(frozen=True)
class TailFit:
    eps: float
    status: str  # "ok" or "inconclusive"
    slope: float
    intercept: float
    r2: float
    m_used: tuple[int, ...]

    @property
    def decreasing(self) -> bool:
        return self.status == "ok" and self.slope < 0


@dataclass
class McSweepReport:
    config: McSweepConfig
    m: tuple[int, ...]
    rms: np.ndarray
    rms_se: np.ndarray
    eps: tuple[float, ...]
    tail_freq: np.ndarray  # (len(m), len(eps))
    tail_se: np.ndarray
    samples_per_m: int
    rms_slope: float
    rms_r2: float
    tail_fits: list[TailFit]
    abs_errors: dict[int, np.ndarray] = field(repr=False, default_factory=dict)

    def tail_at(self, eps: float) -> np.ndarray:
        return np.array([np.mean(self.abs_errors[m] >= eps) for m in self.m])


def _trials_for_m(cfg: McSweepConfig, m: int, ref: np.ndarray) -> np.ndarray:
    fmap = SampledFeatureMap(cfg)
    root = SeededRng(cfg.seed)
    errs = np.empty((cfg.trials, cfg.n_pairs))
    for t in range(cfg.trials):
        errs[t] = fmap.estimate(root.derive(m, t), m) - ref
    return errs


def _loglog_rms_fit(ms, rms) -> tuple[float, float]:
    ok = rms > 0
    if ok.sum() < 2:
        return 0.0, 1.0  # zero error everywhere: nothing to fit
    fit = fit_line(np.log(np.asarray(ms, float)[ok]), np.log(rms[ok]))
    return fit.slope, fit.r2


def mc_error_sweep(cfg: McSweepConfig, jobs: int = 1) -> McSweepReport:
    """Error of k_hat against the reference for every m, ``cfg.trials`` fresh draws each.

    Each (m, trial) owns the stream ``derive(m, trial)`` so the result does not
    depend on ``jobs``.
    """
    ref = SampledFeatureMap(cfg).reference()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            errs = list(ex.map(_trials_for_m, [cfg] * len(cfg.m_schedule), cfg.m_schedule, [ref] * len(cfg.m_schedule)))
    else:
        errs = [_trials_for_m(cfg, m, ref) for m in cfg.m_schedule]

    abs_errors = {m: np.abs(e).ravel() for m, e in zip(cfg.m_schedule, errs)}
    n = cfg.trials * cfg.n_pairs
    sq = [e.ravel() ** 2 for e in errs]
    rms = np.array([math.sqrt(s.mean()) for s in sq])
    # delta method: se(sqrt(M)) = se(M) / (2 sqrt(M))
    rms_se = np.array([s.std(ddof=1) / math.sqrt(n) / (2 * r) if r > 0 else 0.0 for s, r in zip(sq, rms)])

    if cfg.eps_grid is not None:
        eps = cfg.eps_grid
    else:
        first = abs_errors[cfg.m_schedule[0]]
        eps = tuple(sorted({e for q in cfg.eps_percentiles if (e := float(np.percentile(first, q))) > 0}))
    freq = np.array([[np.mean(abs_errors[m] >= e) for e in eps] for m in cfg.m_schedule]).reshape(len(cfg.m_schedule), len(eps))
    se = np.sqrt(freq * (1 - freq) / n)
    slope, r2 = _loglog_rms_fit(cfg.m_schedule, rms)
    report = McSweepReport(cfg, cfg.m_schedule, rms, rms_se, eps, freq, se, n, slope, r2, [], abs_errors)
    report.tail_fits = [tail_shape_fit(report, e) for e in eps]
    return report


def tail_shape_fit(report: McSweepReport, eps: float) -> TailFit:
    """Fit log P(|err| >= eps) linearly in m over the m values with a positive frequency.

    Fewer than three such m values gives status ``inconclusive`` rather than an error.
    """
    if not eps > 0:
        raise ValueError(f"tail threshold must be positive, got {eps}")
    freq = report.tail_at(eps)
    ms = np.asarray(report.m, float)
    pos = freq > 0
    used = tuple(int(m) for m in ms[pos])
    if pos.sum() < 3:
        return TailFit(float(eps), "inconclusive", math.nan, math.nan, math.nan, used)
    fit = fit_line(ms[pos], np.log(freq[pos]))
    return TailFit(float(eps), "ok", fit.slope, fit.intercept, fit.r2, used)


# ---------------------------------------------------------------- truncation


@dataclass
class TruncationReport:
    radii: tuple[float, ...]
    mass: np.ndarray
    se: np.ndarray
    total: float
    n_omega: int

    @property
    def fraction(self) -> np.ndarray:
        return self.mass / self.total if self.total > 0 else np.zeros_like(self.mass)

    @property
    def monotone(self) -> bool:
        steps = np.diff(self.mass)
        return bool(np.all(steps <= 2 * np.maximum(self.se[1:], self.se[:-1])))


def truncation_check(fmap: SampledFeatureMap, radii, n_omega: int = 20000) -> TruncationReport:
    """MC estimate of E_w[ mean_x |phi(x; w)|^2 * 1{|w| > R} ] for each radius.

    All radii share the same draws, so the estimates are non-increasing by construction.
    """
    radii = tuple(float(r) for r in radii)
    if any(b <= a for a, b in zip(radii, radii[1:])) or (radii and radii[0] < 0):
        raise ValueError(f"radii must be nonnegative and increasing, got {radii}")
    rng = SeededRng(fmap.cfg.seed).derive(_TRUNCATION)
    vals, norms = [], []
    done = 0
    while done < n_omega:
        mc = min(_CHUNK, n_omega - done)
        p = fmap.draw(rng, mc)
        f = fmap.per_sample(np.vstack([fmap.X, fmap.Y]), p, mc)
        vals.append(np.mean(np.sum(f**2, axis=-1), axis=0))
        norms.append(np.linalg.norm(fmap.omegas(p), axis=1) if p is not None else np.full(mc, np.inf))
        done += mc
    v, nrm = np.concatenate(vals), np.concatenate(norms)
    mass, se = [], []
    for r in radii:
        t = v * (nrm > r)
        mass.append(t.mean())
        se.append(t.std(ddof=1) / math.sqrt(n_omega))
    return TruncationReport(radii, np.array(mass), np.array(se), float(v.mean()), n_omega)


# ---------------------------------------------------------------- serialization

CSV_HEADER = ("m", "rms", "eps", "tail_freq", "trials")


def _g(x: float) -> str:
    return format(float(x), ".17g")


def report_csv(report: McSweepReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for i, m in enumerate(report.m):
        for j, e in enumerate(report.eps):
            w.writerow([m, _g(report.rms[i]), _g(e), _g(report.tail_freq[i, j]), report.config.trials])
    return buf.getvalue()


def report_summary(report: McSweepReport, truncation: TruncationReport | None = None) -> dict:
    cfg = asdict(report.config)
    out = {
        "config": cfg,
        "rms_slope": report.rms_slope,
        "rms_r2": report.rms_r2,
        "samples_per_m": report.samples_per_m,
        "tail_fits": [asdict(t) for t in report.tail_fits],
    }
    if truncation is not None:
        out["truncation"] = {
            "radii": list(truncation.radii),
            "mass": truncation.mass.tolist(),
            "se": truncation.se.tolist(),
            "total": truncation.total,
            "monotone": truncation.monotone,
        }
    return out


def write_report(report: McSweepReport, out_dir: str | Path, truncation: TruncationReport | None = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "mc_sweep.csv").write_text(report_csv(report))
    text = json.dumps(report_summary(report, truncation), indent=2, sort_keys=True, default=_json_default)
    (out / "mc_summary.json").write_text(text + "\n")


def _json_default(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))
