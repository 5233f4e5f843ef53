import math

import numpy as np
import pytest

from luna.autodiff import tensor as ad
from luna.autodiff.graph import Batch, LossError, backward, fd_check, forward_loss, teacher_rows
from luna.autodiff.tensor import Tape, Tensor
from luna.features import BankCoefParams, LunaConfig, LunaParams, RffParams, features
from luna.numeric import SeededRng


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_of(fn, *arrays):
    with Tape() as tape:
        leaves = [tape.watch(f"x{i}", a) for i, a in enumerate(arrays)]
        out = fn(*leaves)
    tape.output = out
    tape.backward()
    return [leaf.grad for leaf in leaves], out, tape


UNARY = {
    "exp": (ad.exp, np.exp),
    "log": (ad.log, np.log),
    "sqrt": (ad.sqrt, np.sqrt),
    "cos": (ad.cos, np.cos),
    "sin": (ad.sin, np.sin),
    "tanh": (ad.tanh, np.tanh),
    "sigmoid": (ad.sigmoid, lambda x: 1 / (1 + np.exp(-x))),
    "softplus": (ad.softplus, lambda x: np.log1p(np.exp(x))),
    "relu": (ad.relu, lambda x: np.maximum(x, 0)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name):
    op, ref = UNARY[name]
    x = SeededRng(1).uniform(0.2, 2.0, (3, 4))
    if name in ("relu", "cos", "sin", "tanh", "sigmoid", "softplus"):
        x = x * np.where(SeededRng(2).uniform(0, 1, x.shape) > 0.5, 1, -1)
    np.testing.assert_allclose(op(Tensor(x)).data, ref(x), rtol=1e-12, atol=1e-14)
    (g,), _, _ = grad_of(lambda t: ad.tsum(op(t) * op(t)), x)
    fd = numeric_grad(lambda z: np.sum(ref(z) ** 2), x)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-8)


def test_broadcast_binary_ops():
    rng = SeededRng(3)
    a, b = rng.normal((2, 3, 4)), rng.uniform(0.5, 1.5, (3, 1))

    def f(x, y):
        return ad.tsum((x * y + x / y - y) ** 2)

    (ga, gb), _, _ = grad_of(f, a, b)
    np.testing.assert_allclose(ga, numeric_grad(lambda z: float(f(Tensor(z), Tensor(b)).data), a), rtol=1e-6)
    np.testing.assert_allclose(gb, numeric_grad(lambda z: float(f(Tensor(a), Tensor(z)).data), b), rtol=1e-6)


def test_batched_matmul_softmax_and_reshape_grads():
    rng = SeededRng(4)
    a, b = rng.normal((2, 3, 5)), rng.normal((5, 4))

    def f(x, y):
        s = ad.softmax(ad.matmul(x, y), axis=-1)
        r = ad.transpose(ad.reshape(s, (2, 12)), (1, 0))
        return ad.tsum(r * ad.log_softmax(r, axis=0))

    (ga, gb), _, _ = grad_of(f, a, b)
    np.testing.assert_allclose(ga, numeric_grad(lambda z: float(f(Tensor(z), Tensor(b)).data), a), rtol=1e-5, atol=1e-9)
    np.testing.assert_allclose(gb, numeric_grad(lambda z: float(f(Tensor(a), Tensor(z)).data), b), rtol=1e-5, atol=1e-9)


def test_take_rows_and_concat_grads():
    rng = SeededRng(5)
    table = rng.normal((6, 3))
    idx = np.array([[0, 2, 2], [5, 0, 1]])

    def f(t):
        e = ad.take_rows(t, idx)
        return ad.tsum(ad.concat([e, e * e], axis=-1) ** 2)

    (g,), _, _ = grad_of(f, table)
    np.testing.assert_allclose(g, numeric_grad(lambda z: float(f(Tensor(z)).data), table), rtol=1e-6, atol=1e-9)


def test_quadratic_form_closed_form():
    rng = SeededRng(6)
    W, x = rng.normal((4, 3)), rng.normal((3, 1))
    (g,), _, _ = grad_of(lambda w: 0.5 * ad.tsum(ad.matmul(w, x) ** 2), W)
    np.testing.assert_allclose(g, W @ x @ x.T, rtol=1e-13)


def test_clip_and_minimum_block_gradient_where_bound_binds():
    x = np.array([-5.0, -0.5, 0.5, 5.0])
    (g,), _, _ = grad_of(lambda t: ad.tsum(ad.clip(t, -1.0, 1.0)), x)
    np.testing.assert_array_equal(g, [0, 1, 1, 0])
    (g,), _, _ = grad_of(lambda t: ad.tsum(ad.minimum(t, 1.0)), x)
    np.testing.assert_array_equal(g, [1, 1, 1, 0])


def test_relu_subgradient_at_zero_is_zero():
    (g,), _, _ = grad_of(lambda t: ad.tsum(ad.relu(t)), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_replay_reproduces_output_bit_exactly():
    rng = SeededRng(7)
    p = LunaParams.init(rng, LunaConfig(d=4, ch_rms=True, envelope="vector_mlp"))
    batch = Batch(rng.normal((8, 4)), rng.normal((8, 4)), rng.normal((8, 3)), target=rng.normal((8, 3)))
    loss, tape = forward_loss(p, batch, "mse")
    recorded = tape.output.data.copy()
    assert tape.replay().tobytes() == recorded.tobytes()
    assert float(recorded) == loss


def test_no_recording_outside_tape():
    out = ad.exp(Tensor(np.ones(3), requires_grad=True))
    assert out._backward is None


# ---------------------------------------------------------------- loss graph


def _luna_batch(seed, n=8, d=4, d_v=3, **cfg):
    rng = SeededRng(seed)
    p = LunaParams.init(rng, LunaConfig(d=d, **cfg))
    batch = Batch(rng.normal((n, d)), rng.normal((n, d)), rng.normal((n, d_v)), target=rng.normal((n, d_v)))
    return p, batch


def test_zero_head_mse_against_zero_targets_is_zero():
    p, batch = _luna_batch(0)
    batch.target = np.zeros((8, 2))
    head = {"w": np.zeros((3, 2)), "b": np.zeros(2)}
    loss, _ = forward_loss(p, batch, "mse", head)
    assert loss == 0.0


def test_uniform_logits_cross_entropy_is_log_c():
    p, batch = _luna_batch(1)
    C = 5
    batch.labels = np.arange(8) % C
    loss, _ = forward_loss(p, batch, "xent", {"w": np.zeros((3, C)), "b": np.zeros(C)})
    assert loss == pytest.approx(math.log(C), abs=1e-14)


def test_kl_between_identical_rows_is_zero_with_zero_gradient():
    p, batch = _luna_batch(2)
    batch.eps = 0.0
    fq, fk = features(batch.q, p), features(batch.k, p)
    a = fq @ fk.T
    batch.target = a / a.sum(axis=1, keepdims=True)
    loss, tape = forward_loss(p, batch, "attn_kl")
    assert abs(loss) < 1e-15
    for g in backward(tape).values():
        assert np.max(np.abs(g)) < 1e-12


def test_kl_against_softmax_teacher_is_positive():
    p, batch = _luna_batch(3)
    with pytest.raises(LossError, match="shape"):
        forward_loss(p, batch, "attn_kl")  # mse-shaped target is not a row matrix
    batch.target = None
    loss, _ = forward_loss(p, batch, "attn_kl")
    assert loss > 0
    np.testing.assert_allclose(teacher_rows(batch.q, batch.k).sum(1), 1.0, atol=1e-12)


def test_unknown_loss_kind():
    p, batch = _luna_batch(4)
    with pytest.raises(LossError):
        forward_loss(p, batch, "hinge")


def test_bankcoef_frozen_bases_get_exactly_zero_gradient():
    rng = SeededRng(5)
    p = BankCoefParams.sample(rng, 4, 16, 3)
    batch = Batch(rng.normal((8, 4)) * 0.3, rng.normal((8, 4)) * 0.3, rng.normal((8, 3)), target=rng.normal((8, 3)))
    _, tape = forward_loss(p, batch, "mse")
    grads = backward(tape)
    assert np.any(grads["coeffs"] != 0)
    frozen = [k for k in grads if k.startswith("bases.")]
    assert len(frozen) == 6
    for k in frozen:
        assert not np.any(grads[k])


def test_value_gradient_is_linear_in_upstream_seed():
    p, batch = _luna_batch(6)
    from luna import attention

    def dv(seed_scale):
        with Tape() as tape:
            v = tape.watch("v", batch.v)
            out = attention.linear_attention(features(batch.q, p), features(batch.k, p), v)
        tape.backward(out, seed=seed_scale * np.ones(out.shape))
        return tape.gradients()["v"]

    np.testing.assert_array_equal(dv(2.0), 2.0 * dv(1.0))


def test_no_gradient_through_binding_rms_clamp():
    # With a huge target the scale clamps at 1, so ch_rms must be an exact no-op for gradients.
    p_on, batch = _luna_batch(7, ch_rms=True, ch_rms_target=1e6)
    p_off = LunaParams(LunaConfig(d=4, ch_rms=False), p_on.weights)
    _, t_on = forward_loss(p_on, batch, "mse")
    _, t_off = forward_loss(p_off, batch, "mse")
    g_on, g_off = backward(t_on), backward(t_off)
    for k in g_on:
        np.testing.assert_allclose(g_on[k], g_off[k], rtol=1e-12, atol=1e-15)


def test_rms_statistic_is_differentiated_when_clamp_is_free():
    p_on, batch = _luna_batch(8, ch_rms=True, ch_rms_target=1e-3)
    report = fd_check(p_on, batch, "mse")
    assert report.passed, report.lines()


@pytest.mark.parametrize("loss_kind", ["mse", "xent", "attn_kl", "attn_mse"])
def test_fd_check_default_config(loss_kind):
    p, batch = _luna_batch(9)
    if loss_kind.startswith("attn"):
        batch.target = None
    head = None
    if loss_kind == "xent":
        batch.labels = np.arange(8) % 3
        head = {"w": SeededRng(1).normal((3, 3)), "b": np.zeros(3)}
    report = fd_check(p, batch, loss_kind, step=1e-5, tol=1e-4, head=head)
    assert report.passed, report.lines()
    assert {b.name for b in report.blocks} >= {"W", "b", "fc1_w", "fc1_b", "fc2_w", "fc2_b"}


@pytest.mark.parametrize("cfg", [dict(shared=True), dict(activation="tanh", envelope="scalar_mlp"), dict(activation="sigmoid", nonneg=False)])
def test_fd_check_variants(cfg):
    p, batch = _luna_batch(10, **cfg)
    report = fd_check(p, batch, "mse")
    assert report.passed, report.lines()


def test_fd_check_bankcoef():
    rng = SeededRng(11)
    p = BankCoefParams.sample(rng, 4, 16, 4)
    batch = Batch(rng.normal((8, 4)) * 0.3, rng.normal((8, 4)) * 0.3, rng.normal((8, 3)), target=rng.normal((8, 3)))
    assert fd_check(p, batch, "mse").passed


def test_fd_check_perturbs_inputs_sitting_on_the_projection_kink():
    p, batch = _luna_batch(12)
    batch.q[0] = 0.0  # b = 0 at init, so every projection of this row is exactly 0
    report = fd_check(p, batch, "mse")
    assert report.passed, report.lines()


def test_fd_check_rejects_zero_step():
    p, batch = _luna_batch(13)
    with pytest.raises(ValueError):
        fd_check(p, batch, "mse", step=0.0)


def test_rff_has_no_trainable_blocks():
    rng = SeededRng(14)
    p = RffParams.sample(rng, 4, 32)
    batch = Batch(rng.normal((6, 4)) * 0.2, rng.normal((6, 4)) * 0.2, rng.normal((6, 2)), target=np.zeros((6, 2)))
    report = fd_check(p, batch, "mse")
    assert report.blocks == [] and report.passed
