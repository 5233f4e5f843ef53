"""Wall time and peak memory of one attention layer against sequence length."""

from __future__ import annotations

import csv
import io
import json
import math
import time
import tracemalloc
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from luna import attention as attn
from luna.features import FeatureMapSpec, LunaConfig, LunaParams, PerformerParams, RffParams, features
from luna.numeric import LineFit, SeededRng, fit_line

BENCH_VARIANTS = ("softmax", "luna", "performer", "rff")
LINEAR_VARIANTS = ("luna", "performer", "rff")
BLOCK = 256  # tokens featurized at a time; keeps the linear working set in L2


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchPlan:
    ns: tuple[int, ...] = (512, 1024, 2048, 4096, 8192)
    d: int = 64
    d_v: int = 64
    D: int = 64
    variants: tuple[str, ...] = BENCH_VARIANTS
    repetitions: int = 5
    warmup: int = 2
    max_quadratic_n: int = 8192
    seed: int = 0

    def __post_init__(self) -> None:
        if self.repetitions < 5:
            raise ValueError("repetitions must be at least 5")
        if self.warmup < 2:
            raise ValueError("warmup must be at least 2")
        if len(self.ns) < 2 or any(n < 1 for n in self.ns):
            raise ValueError("n schedule needs at least two positive lengths")
        ratios = {b / a for a, b in zip(self.ns, self.ns[1:])}
        if len(ratios) != 1 or ratios.pop() <= 1:
            raise ValueError(f"n schedule must be geometric and increasing, got {self.ns}")
        unknown = set(self.variants) - set(BENCH_VARIANTS)
        if unknown:
            raise ValueError(f"unknown bench variants {sorted(unknown)}")
        if self.D % 8:
            raise ValueError("D must be a multiple of 8 (LUNA uses m = 8)")

    @property
    def timer_resolution(self) -> float:
        return time.get_clock_info("perf_counter").resolution


@dataclass
class BenchReport:
    plan: BenchPlan
    times: dict[str, dict[int, list[float]]]
    slopes: dict[str, LineFit] = field(default_factory=dict)
    capped: dict[str, int] = field(default_factory=dict)

    def median(self, variant: str, n: int) -> float:
        return float(np.median(self.times[variant][n]))

    def iqr(self, variant: str, n: int) -> float:
        q1, q3 = np.percentile(self.times[variant][n], [25, 75])
        return float(q3 - q1)

    def ratio(self, variant: str, hi: int = 8192, lo: int = 1024) -> float | None:
        t = self.times[variant]
        return self.median(variant, hi) / self.median(variant, lo) if hi in t and lo in t else None


def make_maps(plan: BenchPlan) -> dict[str, FeatureMapSpec | None]:
    rng = SeededRng(plan.seed).derive(1)
    maps: dict[str, FeatureMapSpec | None] = {"softmax": None}
    maps["luna"] = LunaParams.init(rng.derive(0), LunaConfig(d=plan.d, m=8, L=plan.D // 8))
    maps["performer"] = PerformerParams.sample(rng.derive(1), plan.d, plan.D)
    maps["rff"] = RffParams.sample(rng.derive(2), plan.d, plan.D)
    return {v: maps[v] for v in plan.variants}


def bench_inputs(plan: BenchPlan, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gaussian q, k, v shared by every variant at this n; q, k scaled so the maps stay well conditioned."""
    rng = SeededRng(plan.seed).derive(0, n)
    scale = 1.0 / math.sqrt(plan.d)
    return rng.normal((n, plan.d), scale), rng.normal((n, plan.d), scale), rng.normal((n, plan.d_v))


def layer(variant: str, fmap: FeatureMapSpec | None, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    if fmap is None:
        return attn.softmax_attention(q, k, v)
    return attn.blocked_linear_attention(q, k, v, lambda x: features(x, fmap), block=BLOCK)


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    t1 = time.perf_counter()
    if not t1 > t0:
        raise BenchError(f"non-monotonic or stalled clock: {t0!r} -> {t1!r}")
    return t1 - t0


def run_bench(plan: BenchPlan = BenchPlan()) -> BenchReport:
    """Median-of-repetitions timings after warmup, single BLAS thread.

    Repetitions run round-robin over every (n, variant) cell, so slow drift in
    machine speed spreads evenly across n instead of tilting the slope.
    """
    maps = make_maps(plan)
    times: dict[str, dict[int, list[float]]] = {v: {} for v in plan.variants}
    capped = {}
    inputs = {n: bench_inputs(plan, n) for n in plan.ns}
    cells = []
    for n in plan.ns:
        for name in plan.variants:
            if name == "softmax" and n > plan.max_quadratic_n:
                capped[name] = plan.max_quadratic_n
                continue
            cells.append((name, n))
            times[name][n] = []
    with threadpool_limits(limits=1):
        for rep in range(plan.warmup + plan.repetitions):
            for name, n in cells:
                q, k, v = inputs[n]
                t = _timed(lambda: layer(name, maps[name], q, k, v))
                if rep >= plan.warmup:
                    times[name][n].append(t)
    report = BenchReport(plan, times, capped=capped)
    for name, by_n in times.items():
        if len(by_n) >= 4:
            ns = sorted(by_n)
            report.slopes[name] = fit_loglog_slope([(n, report.median(name, n)) for n in ns])
    return report


def fit_loglog_slope(points) -> LineFit:
    """Least squares of log t on log n; needs at least four positive points and two distinct n."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 4:
        raise ValueError("need at least 4 (n, t) points")
    if np.any(pts <= 0):
        raise ValueError("n and t must be positive")
    if np.all(pts[:, 0] == pts[0, 0]):
        raise ValueError("all n are equal; slope undefined")
    return fit_line(np.log(pts[:, 0]), np.log(pts[:, 1]))


def peak_memory(plan: BenchPlan, variant: str, n: int) -> int:
    """Peak bytes allocated by one layer call beyond its inputs (tracemalloc)."""
    fmap = make_maps(BenchPlan(**{**asdict(plan), "variants": (variant,)}))[variant]
    q, k, v = bench_inputs(plan, n)
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        layer(variant, fmap, q, k, v)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()
    return peak - base


def report_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "n", "rep", "seconds"])
    for name, by_n in report.times.items():
        for n in sorted(by_n):
            for rep, t in enumerate(by_n[n]):
                w.writerow([name, n, rep, format(t, ".9g")])
    return buf.getvalue()


def report_summary(report: BenchReport) -> dict:
    p = report.plan
    return {
        "plan": {**asdict(p), "timer_resolution": p.timer_resolution},
        "median": {v: {str(n): report.median(v, n) for n in sorted(t)} for v, t in report.times.items()},
        "iqr": {v: {str(n): report.iqr(v, n) for n in sorted(t)} for v, t in report.times.items()},
        "slopes": {v: {"slope": f.slope, "r2": f.r2} for v, f in report.slopes.items()},
        "ratio_8192_1024": {v: report.ratio(v) for v in report.times},
        "capped": report.capped,
    }


def write_report(report: BenchReport, out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "bench.csv", "json": out / "bench_summary.json"}
    paths["csv"].write_text(report_csv(report))
    paths["json"].write_text(json.dumps(report_summary(report), indent=2, sort_keys=True) + "\n")
    return paths
