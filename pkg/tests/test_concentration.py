import json
import math

import numpy as np
import pytest

from luna.concentration import (
    McSweepConfig,
    SampledFeatureMap,
    mc_error_sweep,
    report_csv,
    tail_shape_fit,
    truncation_check,
    write_report,
)

SMALL = (16, 32, 64, 128, 256)


@pytest.fixture(scope="module")
def rff_report():
    return mc_error_sweep(McSweepConfig(family="rff", m_schedule=SMALL + (512, 1024), trials=100, seed=3))


def test_rff_rms_decays_as_inverse_sqrt_m(rff_report):
    assert -0.6 <= rff_report.rms_slope <= -0.4
    assert rff_report.rms_r2 > 0.95


def test_rms_monotone_up_to_two_standard_errors(rff_report):
    r, se = rff_report.rms, rff_report.rms_se
    assert np.all(np.diff(r) <= 2 * (se[1:] + se[:-1]))


def test_tail_frequencies_are_probabilities_monotone_in_eps(rff_report):
    f = rff_report.tail_freq
    assert np.all((f >= 0) & (f <= 1))
    assert np.all(np.diff(f, axis=1) <= 0)
    assert list(rff_report.eps) == sorted(rff_report.eps)


def test_thirtieth_percentile_eps_gives_log_linear_decreasing_tail(rff_report):
    fit = rff_report.tail_fits[0]
    assert rff_report.tail_freq[0, 0] == pytest.approx(0.7, abs=0.01)
    assert fit.status == "ok" and fit.slope < 0 and fit.r2 >= 0.8


def test_huge_eps_is_inconclusive(rff_report):
    fit = tail_shape_fit(rff_report, 10.0)
    assert fit.status == "inconclusive" and not fit.decreasing and fit.m_used == ()


def test_constant_features_have_zero_error():
    rep = mc_error_sweep(McSweepConfig(family="constant", m_schedule=(1, 4, 16), trials=20))
    assert not np.any(rep.rms)
    assert rep.eps == () and rep.tail_fits == []
    with pytest.raises(ValueError):
        tail_shape_fit(rep, 0.0)
    assert tail_shape_fit(rep, 1e-3).status == "inconclusive"


def test_sweep_is_deterministic_and_schedule_independent():
    cfg = McSweepConfig(family="performer", m_schedule=(16, 64), trials=20, seed=9)
    a, b = mc_error_sweep(cfg), mc_error_sweep(cfg, jobs=2)
    assert report_csv(a) == report_csv(b)
    # a per-m result does not depend on which other m values are in the schedule
    c = mc_error_sweep(McSweepConfig(family="performer", m_schedule=(64,), trials=20, seed=9))
    assert np.array_equal(a.abs_errors[64], c.abs_errors[64])


def test_doubling_trials_shrinks_tail_standard_error():
    kw = dict(family="rff", m_schedule=(16, 32), eps_grid=(0.1,), seed=4)
    a = mc_error_sweep(McSweepConfig(trials=200, **kw))
    b = mc_error_sweep(McSweepConfig(trials=400, **kw))
    ratio = b.tail_se[0, 0] / a.tail_se[0, 0]
    assert ratio == pytest.approx(1 / math.sqrt(2), rel=0.1)


@pytest.mark.parametrize("regime", ["bounded", "unbounded"])
def test_luna_surrogate_sweep_decays(regime):
    rep = mc_error_sweep(McSweepConfig(family="luna", regime=regime, m_schedule=(16, 32, 64, 128), trials=40))
    assert rep.rms_slope < -0.3
    assert rep.tail_fits[0].decreasing


@pytest.mark.parametrize(
    "bad",
    [dict(m_schedule=(32, 16)), dict(trials=10), dict(family="softmax"), dict(regime="mixed"), dict(m_schedule=())],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        McSweepConfig(**bad)


def test_luna_reference_requires_enough_oversampling():
    fmap = SampledFeatureMap(McSweepConfig(family="luna", m_schedule=(16,), trials=20, ref_factor=8))
    with pytest.raises(ValueError, match="ref_factor"):
        fmap.reference()


def test_truncation_check_bounded_channels():
    d = 4
    fmap = SampledFeatureMap(McSweepConfig(family="luna", regime="bounded", d=d, m_schedule=(16,), trials=20))
    rep = truncation_check(fmap, [0.0, 1.0, 2.0, 3.0, 10 * math.sqrt(d)], n_omega=8000)
    assert rep.mass[0] == pytest.approx(rep.total, rel=1e-12)
    assert np.all(np.diff(rep.mass) <= 0) and rep.monotone
    assert rep.fraction[-1] < 1e-3
    assert rep.mass[2] > 0


def test_truncation_rejects_unsorted_radii():
    fmap = SampledFeatureMap(McSweepConfig(m_schedule=(16,), trials=20))
    with pytest.raises(ValueError):
        truncation_check(fmap, [2.0, 1.0])


def test_report_files(tmp_path, rff_report):
    write_report(rff_report, tmp_path)
    lines = (tmp_path / "mc_sweep.csv").read_text().splitlines()
    assert lines[0] == "m,rms,eps,tail_freq,trials"
    assert len(lines) == 1 + len(rff_report.m) * len(rff_report.eps)
    summary = json.loads((tmp_path / "mc_summary.json").read_text())
    assert summary["rms_slope"] == rff_report.rms_slope
    assert len(summary["tail_fits"]) == len(rff_report.eps)
