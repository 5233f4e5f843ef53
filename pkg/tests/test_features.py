import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from luna.autodiff.tensor import Tape
from luna.checks import performer_z_scores
from luna.features import (
    FAMILIES,
    BankCoefParams,
    FeatureMapError,
    LunaConfig,
    LunaParams,
    PerformerParams,
    RffParams,
    bankcoef_features,
    exp_kernel,
    features,
    gaussian_kernel,
    gram_matrix,
    kernel_estimate,
    load_params,
    luna_features,
    make_feature_map,
    params_from_dict,
    phi,
    params_to_dict,
    performer_features,
    rff_features,
    save_params,
)
from luna.numeric import SeededRng, min_eigenvalue_sym


def passthrough_luna(d: int, c: float = 1.0) -> LunaParams:
    """m = L = 1 map with relu(u) - relu(-u) = u, so phi(x) = c * x_0."""
    cfg = LunaConfig(d=d, m=1, L=1, hidden=2, nonneg=False, shared=True)
    W = np.zeros((1, d))
    W[0, 0] = c
    w = {
        "W": W,
        "b": np.zeros(1),
        "fc1_w": np.array([1.0, -1.0]),
        "fc1_b": np.zeros(2),
        "fc2_w": np.array([[1.0], [-1.0]]),
        "fc2_b": np.zeros(1),
    }
    return LunaParams(cfg, w)


# ---------------------------------------------------------------- RFF


def test_rff_zero_input():
    p = RffParams.sample(SeededRng(0), 5, 16)
    np.testing.assert_allclose(rff_features(np.zeros(5), p), math.sqrt(2 / 16) * np.cos(p.biases), rtol=1e-15)


def test_rff_biases_in_range_and_default_bandwidth():
    p = RffParams.sample(SeededRng(1), 16, 4096)
    assert np.all((p.biases >= 0) & (p.biases < 2 * math.pi))
    assert p.bandwidth == pytest.approx(16**-0.25)
    assert p.omegas.std() == pytest.approx(0.5, rel=0.02)


def test_rff_self_kernel_is_one_on_average():
    x = SeededRng(2).normal(6)
    root = SeededRng(3)
    vals = np.array([np.sum(rff_features(x, RffParams.sample(root.derive(r), 6, 32)) ** 2) for r in range(200)])
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - 1.0) < 3 * se


def test_rff_approximates_gaussian_kernel():
    d = 4
    rng = SeededRng(4)
    p = RffParams.sample(rng, d, 2048)
    X, Y = rng.normal((100, d)) * 0.7, rng.normal((100, d)) * 0.7
    k_hat = np.sum(rff_features(X, p) * rff_features(Y, p), axis=1)
    assert np.mean(np.abs(k_hat - gaussian_kernel(X, Y))) < 0.05


def test_rff_error_decays_with_inverse_sqrt_m():
    d = 4
    pts = SeededRng(5)
    X, Y = pts.normal((50, d)) * 0.7, pts.normal((50, d)) * 0.7
    ref = gaussian_kernel(X, Y)
    ratios = []
    for s in range(24):
        rms = []
        for m in (64, 1024):
            errs = []
            for r in range(8):
                p = RffParams.sample(SeededRng(100 + s).derive(m, r), d, m)
                errs.append(np.sum(rff_features(X, p) * rff_features(Y, p), axis=1) - ref)
            rms.append(np.sqrt(np.mean(np.square(errs))))
        ratios.append(rms[0] / rms[1])
    assert 3.0 <= np.median(ratios) <= 6.0


# ---------------------------------------------------------------- Performer


def test_performer_zero_input():
    p = PerformerParams.sample(SeededRng(6), 8, 32)
    f = performer_features(np.zeros(8), p)
    np.testing.assert_allclose(f, 1 / math.sqrt(32), rtol=1e-15)
    assert kernel_estimate(f, f) == pytest.approx(1.0, abs=1e-15)


def test_performer_features_strictly_positive():
    rng = SeededRng(7)
    p = PerformerParams.sample(rng, 8, 64)
    assert np.all(performer_features(rng.normal((50, 8)) * 3, p) > 0)


def test_performer_unbiased_for_exponential_kernel():
    assert np.all(performer_z_scores() < 3)


def test_performer_inverse_sqrt_d_covariance_is_biased():
    assert np.max(performer_z_scores(covariance_scale=1 / math.sqrt(8))) > 10


def test_performer_clamp_events_are_counted():
    p = PerformerParams.sample(SeededRng(8), 2, 4)
    stats = {}
    f = performer_features(np.array([[30.0, 0.0], [0.0, 0.1]]), p, stats)
    assert stats["clamp_events"] >= 4
    assert np.all(np.isfinite(f))


# ---------------------------------------------------------------- LUNA


def test_luna_passthrough_recovers_first_coordinate():
    x = SeededRng(9).normal((7, 5))
    np.testing.assert_allclose(luna_features(x, passthrough_luna(5))[:, 0], x[:, 0], rtol=1e-15)


def test_luna_zero_second_layer_is_zero_map():
    p = LunaParams.init(SeededRng(10), LunaConfig(d=3, nonneg=False))
    p.weights["fc2_w"][:] = 0
    p.weights["fc2_b"][:] = 0
    x = SeededRng(11).normal((6, 3))
    assert not np.any(luna_features(x, p))
    assert not np.any(gram_matrix(x, p))


def test_luna_default_config_shape_and_sign():
    cfg = LunaConfig(d=16)
    assert (cfg.m, cfg.L, cfg.hidden, cfg.activation, cfg.nonneg) == (8, 8, 64, "relu", True)
    p = LunaParams.init(SeededRng(12), cfg)
    f = luna_features(SeededRng(13).normal((20, 16)), p)
    assert f.shape == (20, 64)
    assert np.all(f >= 0)


def test_luna_single_vector_and_batch_agree_without_rms():
    p = LunaParams.init(SeededRng(14), LunaConfig(d=4, envelope="vector_mlp"))
    x = SeededRng(15).normal((5, 4))
    batch = luna_features(x, p)
    for i in range(5):
        np.testing.assert_allclose(luna_features(x[i], p), batch[i], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
def test_luna_projection_scale_equivariance(c):
    x = SeededRng(16).normal((9, 4))
    base = luna_features(x, passthrough_luna(4, 1.0))
    np.testing.assert_allclose(luna_features(x, passthrough_luna(4, c)), c * base, rtol=1e-14)


def test_luna_shared_mode_is_one_mlp_to_L_channels():
    rng = SeededRng(17)
    p = LunaParams.init(rng, LunaConfig(d=3, m=2, L=3, hidden=5, shared=True, nonneg=False))
    w = p.weights
    x = rng.normal(3)
    u = w["W"] @ x + w["b"]
    expect = np.stack([np.maximum(ui * w["fc1_w"] + w["fc1_b"], 0) @ w["fc2_w"] + w["fc2_b"] for ui in u])
    np.testing.assert_allclose(luna_features(x, p), expect.ravel() / math.sqrt(2), rtol=1e-13)


def test_luna_separate_mode_runs_L_scalar_mlps():
    rng = SeededRng(18)
    p = LunaParams.init(rng, LunaConfig(d=3, m=2, L=3, hidden=5, activation="tanh", nonneg=False))
    w = p.weights
    x = rng.normal(3)
    u = w["W"] @ x + w["b"]
    expect = np.array(
        [[np.tanh(ui * w["fc1_w"][l] + w["fc1_b"][l]) @ w["fc2_w"][l] + w["fc2_b"][l] for l in range(3)] for ui in u]
    )
    np.testing.assert_allclose(luna_features(x, p), expect.ravel() / math.sqrt(2), rtol=1e-13)


def test_luna_channel_rms_caps_and_never_amplifies():
    rng = SeededRng(19)
    x = rng.normal((32, 6))
    loud = LunaParams.init(rng, LunaConfig(d=6, ch_rms=True, ch_rms_target=0.1))
    y = luna_features(x, loud).reshape(32, 8, 8) * math.sqrt(8)
    assert np.all(np.sqrt(np.mean(y**2, axis=(0, 1))) <= 0.1 + 1e-12)
    # a target above every channel RMS leaves the features untouched
    quiet = LunaParams(LunaConfig(d=6, ch_rms=True, ch_rms_target=1e6), loud.weights)
    plain = LunaParams(LunaConfig(d=6), loud.weights)
    np.testing.assert_array_equal(luna_features(x, quiet), luna_features(x, plain))


@pytest.mark.parametrize("envelope", ["scalar_mlp", "vector_mlp"])
def test_luna_envelope_modulates_channels(envelope):
    rng = SeededRng(20)
    cfg = LunaConfig(d=4, envelope=envelope)
    p = LunaParams.init(rng, cfg)
    x = rng.normal((5, 4))
    gated = luna_features(x, p).reshape(5, 8, 8)
    plain = luna_features(x, LunaParams(LunaConfig(d=4), p.weights)).reshape(5, 8, 8)
    w = p.weights
    z = np.maximum(x @ w["env_w1"] + w["env_b1"], 0) @ w["env_w2"] + w["env_b2"]
    env = np.log1p(np.exp(z)) if envelope == "scalar_mlp" else 1 / (1 + np.exp(-z))
    np.testing.assert_allclose(gated, plain * env[:, None, :], rtol=1e-12)
    assert np.all(gated >= 0)


def test_luna_non_finite_intermediate_names_the_stage():
    p = LunaParams.init(SeededRng(21), LunaConfig(d=3))
    p.weights["W"][0, 0] = np.inf
    with pytest.raises(FeatureMapError, match="projection"):
        luna_features(np.ones(3), p)
    q = LunaParams.init(SeededRng(21), LunaConfig(d=3))
    q.weights["fc2_b"][0] = np.nan
    with pytest.raises(FeatureMapError, match="channel"):
        luna_features(np.ones(3), q)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.1, 5.0))
def test_nonneg_luna_gives_nonnegative_kernels(seed, scale):
    rng = SeededRng(seed)
    p = LunaParams.init(rng, LunaConfig(d=5, m=4, L=3, hidden=8))
    f = luna_features(rng.normal((12, 5)) * scale, p)
    assert np.all(f >= 0)
    assert np.all(f @ f.T >= 0)


# ---------------------------------------------------------------- Bank+Coef


def test_bankcoef_selector_and_zero():
    rng = SeededRng(22)
    p = BankCoefParams.sample(rng, 4, 16, 3)
    x = rng.normal((5, 4))
    sel = BankCoefParams(p.bases, np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(bankcoef_features(x, sel), rff_features(x, p.bases[0]), rtol=1e-15)
    assert not np.any(bankcoef_features(x, BankCoefParams(p.bases, np.zeros(3))))


def test_bankcoef_weighted_sum_matches_direct_sum():
    rng = SeededRng(23)
    b1, b2 = RffParams.sample(rng, 3, 8), RffParams.sample(rng, 3, 8, 2.0)
    x = rng.normal(3)
    p = BankCoefParams([b1, b2], np.array([0.3, -1.7]))
    np.testing.assert_allclose(
        bankcoef_features(x, p), 0.3 * rff_features(x, b1) - 1.7 * rff_features(x, b2), rtol=1e-14, atol=1e-16
    )


def test_bankcoef_rejects_mismatched_bases():
    rng = SeededRng(24)
    with pytest.raises(ValueError):
        BankCoefParams([RffParams.sample(rng, 3, 8), RffParams.sample(rng, 3, 9)], np.ones(2))


# ---------------------------------------------------------------- kernel / Gram


def test_kernel_estimate_basic():
    v = np.array([3.0, 4.0])
    assert kernel_estimate(v, v) == 25.0
    assert kernel_estimate(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    with pytest.raises(ValueError):
        kernel_estimate(np.ones(2), np.ones(3))


def test_gram_single_point():
    p = make_feature_map("luna", SeededRng(25), 4)
    x = SeededRng(26).normal((1, 4))
    g = gram_matrix(x, p)
    assert g.shape == (1, 1) and g[0, 0] == pytest.approx(np.sum(luna_features(x, p) ** 2)) and g[0, 0] >= 0


@pytest.mark.parametrize("family", FAMILIES)
def test_gram_is_psd_for_every_family(family):
    for seed in range(3):
        p = make_feature_map(family, SeededRng(seed), 8)
        x = SeededRng(seed + 50).normal((64, 8))
        g = gram_matrix(x, p)
        assert np.array_equal(g, g.T)
        assert min_eigenvalue_sym(g) >= -1e-10 * np.linalg.eigvalsh(g)[-1]


def test_gram_duplicate_points_give_identical_rows():
    p = make_feature_map("luna", SeededRng(27), 4, envelope="vector_mlp")
    x = SeededRng(28).normal((5, 4))
    x[3] = x[1]
    g = gram_matrix(x, p)
    np.testing.assert_array_equal(g[1], g[3])


# ---------------------------------------------------------------- serialization


@pytest.mark.parametrize("family", FAMILIES)
def test_json_round_trip_is_bit_exact(family, tmp_path):
    extra = {"envelope": "vector_mlp", "ch_rms": True} if family == "luna" else {}
    p = make_feature_map(family, SeededRng(29), 5, **extra)
    path = tmp_path / "p.json"
    save_params(p, path)
    q = load_params(path)
    assert type(q) is type(p)
    x = SeededRng(30).normal((4, 5))
    assert features(x, q).tobytes() == features(x, p).tobytes()
    doc, doc2 = params_to_dict(p), params_to_dict(q)
    assert doc == doc2
    assert params_from_dict(doc2).family == family


@pytest.mark.parametrize("shared", [True, False])
def test_chunked_inference_matches_taped_forward(shared):
    cfg = LunaConfig(d=3, m=8, L=8, hidden=64, shared=shared)
    p = LunaParams.init(5, cfg)
    x = SeededRng(6).normal((700, 3))  # several inference chunks
    with Tape() as tape:
        taped = phi(x, p, {n: tape.watch(n, w) for n, w in p.trainable().items()}).data
    assert np.array_equal(features(x, p), taped)
