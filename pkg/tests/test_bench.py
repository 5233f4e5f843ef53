import json

import numpy as np
import pytest

from luna import bench
from luna.bench import BenchError, BenchPlan, fit_loglog_slope, peak_memory, run_bench, write_report

NS = np.array([512, 1024, 2048, 4096, 8192])


@pytest.mark.parametrize("power", [1, 2])
def test_exact_power_law_gives_exact_slope(power):
    fit = fit_loglog_slope(list(zip(NS, 3e-6 * NS**power)))
    assert fit.slope == pytest.approx(power, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_ten_percent_noise_keeps_slope_near_one(seed):
    rng = np.random.default_rng(seed)
    t = 1e-5 * NS * rng.uniform(0.9, 1.1, len(NS))
    assert 0.9 <= fit_loglog_slope(list(zip(NS, t))).slope <= 1.1


@pytest.mark.parametrize(
    "points",
    [[(1, 1.0), (2, 2.0), (4, 4.0)], [(8, 1.0)] * 4, [(1, 1.0), (2, 0.0), (4, 1.0), (8, 1.0)]],
)
def test_degenerate_fits_raise(points):
    with pytest.raises(ValueError):
        fit_loglog_slope(points)


@pytest.mark.parametrize(
    "kw",
    [{"repetitions": 4}, {"warmup": 1}, {"ns": (512, 1024, 3000)}, {"ns": (512,)}, {"variants": ("flash",)}],
)
def test_invalid_plans_raise(kw):
    with pytest.raises(ValueError):
        BenchPlan(**kw)


@pytest.fixture(scope="module")
def small_report():
    return run_bench(BenchPlan(ns=(64, 128, 256, 512), max_quadratic_n=256))


def test_report_shapes_cap_and_outputs(small_report, tmp_path):
    r = small_report
    assert set(r.times["luna"]) == {64, 128, 256, 512}
    assert set(r.times["softmax"]) == {64, 128, 256}
    assert r.capped == {"softmax": 256}
    assert "softmax" not in r.slopes and set(r.slopes) == {"luna", "performer", "rff"}
    assert all(len(ts) == 5 and min(ts) > 0 for by_n in r.times.values() for ts in by_n.values())
    paths = write_report(r, tmp_path)
    lines = paths["csv"].read_text().splitlines()
    assert lines[0] == "variant,n,rep,seconds"
    assert len(lines) == 1 + 5 * (3 * 4 + 3)
    summary = json.loads(paths["json"].read_text())
    assert summary["plan"]["timer_resolution"] > 0
    assert summary["iqr"]["rff"]["64"] >= 0


def test_stalled_clock_aborts(monkeypatch):
    monkeypatch.setattr(bench.time, "perf_counter", lambda: 1.0)
    with pytest.raises(BenchError, match="clock"):
        run_bench(BenchPlan(ns=(8, 16), variants=("rff",)))


def test_linear_layers_agree_with_the_quadratic_oracle():
    plan = BenchPlan()
    q, k, v = bench.bench_inputs(plan, 32)
    maps = bench.make_maps(plan)
    from luna.attention import quadratic_oracle
    from luna.features import features

    for name in bench.LINEAR_VARIANTS:
        fq, fk = features(q, maps[name]), features(k, maps[name])
        np.testing.assert_allclose(bench.layer(name, maps[name], q, k, v), quadratic_oracle(fq, fk, v), atol=1e-10)


@pytest.mark.parametrize("variant", bench.LINEAR_VARIANTS)
def test_linear_working_memory_is_flat_beyond_output(variant):
    plan = BenchPlan()
    extra = [peak_memory(plan, variant, n) - n * plan.d_v * 8 for n in (512, 1024, 2048, 4096)]
    assert max(extra) <= 1.1 * min(extra)


def test_softmax_working_memory_grows_quadratically():
    a, b = peak_memory(BenchPlan(), "softmax", 512), peak_memory(BenchPlan(), "softmax", 1024)
    assert 3.5 <= b / a <= 4.5
