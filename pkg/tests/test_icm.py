import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from marl_curiosity.icm import (
    CuriosityModule,
    IcmConfig,
    _losses_and_grads,
    encode,
    icm_update,
    intrinsic_reward,
    inverse_loss,
    predict_next,
    total_reward,
)
from marl_curiosity.nn import Network

from oracles import central_difference, max_relative_error

OBS = 29


def _zero_all(net: Network) -> None:
    for p in net.params():
        p[...] = 0.0


def _onehot(k):
    return np.eye(5)[k]


def test_shapes():
    m = CuriosityModule(OBS, IcmConfig(), 0)
    phi = encode(m, np.zeros(OBS))
    assert phi.shape == (16,)
    assert predict_next(m, phi, _onehot(2)).shape == (16,)
    assert encode(m, np.zeros((7, OBS))).shape == (7, 16)


def test_zero_encoder_gives_zero_features():
    m = CuriosityModule(OBS, IcmConfig(), 0)
    _zero_all(m.encoder)
    assert np.all(encode(m, np.random.default_rng(0).normal(size=OBS)) == 0.0)


def test_zero_forward_model_reward_is_half_squared_norm():
    cfg = IcmConfig(eta=0.1)
    m = CuriosityModule(OBS, cfg, 0)
    _zero_all(m.forward_model)
    o1 = np.random.default_rng(1).normal(size=OBS)
    phi1 = encode(m, o1)
    pred = predict_next(m, encode(m, np.zeros(OBS)), _onehot(1))
    assert intrinsic_reward(cfg, pred, phi1) == pytest.approx(0.1 * 0.5 * float(phi1 @ phi1), rel=1e-14)


def test_reward_arithmetic_example():
    # unit vector at distance 1 from zero: 0.5 * 1 * eta
    assert intrinsic_reward(IcmConfig(eta=1.0), np.zeros(16), _basis(16, 3)) == 0.5
    assert intrinsic_reward(IcmConfig(eta=0.1), np.zeros(16), _basis(16, 3)) == pytest.approx(0.05)


def _basis(n, k):
    v = np.zeros(n)
    v[k] = 1.0
    return v


def test_reward_matches_elementwise_oracle():
    rng = np.random.default_rng(2)
    cfg = IcmConfig(eta=0.37)
    for _ in range(50):
        a, b = rng.normal(size=16), rng.normal(size=16)
        ref = 0.0
        for x, y in zip(a, b):
            ref += (x - y) ** 2
        assert intrinsic_reward(cfg, a, b) == pytest.approx(0.37 * 0.5 * ref, rel=1e-12)


def test_reward_shape_mismatch():
    with pytest.raises(ValueError):
        intrinsic_reward(IcmConfig(), np.zeros(16), np.zeros(15))


def test_uniform_inverse_logits_give_log_five():
    m = CuriosityModule(OBS, IcmConfig(), 0)
    _zero_all(m.inverse_model)
    rng = np.random.default_rng(0)
    for k in range(5):
        loss = inverse_loss(m, rng.normal(size=16), rng.normal(size=16), _onehot(k))
        assert abs(loss - math.log(5)) < 1e-12


def test_saturated_logits_give_vanishing_loss():
    m = CuriosityModule(OBS, IcmConfig(), 0)
    _zero_all(m.inverse_model)
    m.inverse_model.layers[-1].bias[:] = [0.0, 0.0, 60.0, 0.0, 0.0]
    loss = inverse_loss(m, np.zeros(16), np.zeros(16), _onehot(2))
    assert loss < 1e-20


def test_beta_one_leaves_inverse_model_and_encoder_unchanged():
    m = CuriosityModule(OBS, IcmConfig(beta=1.0), 0)
    inv = [p.copy() for p in m.inverse_model.params()]
    enc = [p.copy() for p in m.encoder.params()]
    fwd = [p.copy() for p in m.forward_model.params()]
    rng = np.random.default_rng(0)
    icm_update(m, rng.normal(size=(8, OBS)), np.eye(5)[rng.integers(0, 5, 8)], rng.normal(size=(8, OBS)))
    assert all(np.array_equal(a, b) for a, b in zip(inv, m.inverse_model.params()))
    assert all(np.array_equal(a, b) for a, b in zip(enc, m.encoder.params()))
    assert not all(np.array_equal(a, b) for a, b in zip(fwd, m.forward_model.params()))


def test_forward_loss_does_not_reach_encoder():
    # with beta = 1 only the forward term is active; encoder gradient must be exactly zero
    m = CuriosityModule(OBS, IcmConfig(beta=1.0), 3)
    rng = np.random.default_rng(3)
    out = _losses_and_grads(m, rng.normal(size=(4, OBS)), np.eye(5)[[0, 1, 2, 3]], rng.normal(size=(4, OBS)))
    n_enc = len(m.encoder.params())
    assert all(np.all(g == 0.0) for g in out["grads"][:n_enc])


def test_one_update_on_fixed_batch_lowers_forward_loss():
    rng = np.random.default_rng(4)
    o, o1 = rng.normal(size=(16, OBS)), rng.normal(size=(16, OBS))
    a = np.eye(5)[rng.integers(0, 5, 16)]
    m = CuriosityModule(OBS, IcmConfig(lr=1e-4), 4)
    f0, _ = icm_update(m, o, a, o1)
    f1, _ = icm_update(m, o, a, o1)
    assert f1 < f0


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    m = CuriosityModule(6, IcmConfig(hidden=5, feature_dim=3, beta=0.3), rng)
    for net in m.networks().values():
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=0.2, size=layer.bias.shape)
    o, o1 = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    a = np.eye(5)[[1, 4, 2]]
    out = _losses_and_grads(m, o, a, o1)
    # the encoder-side gradient carries only the inverse term; check each part against its own objective
    n_enc, n_fwd = len(m.encoder.params()), len(m.forward_model.params())

    phi_t, phi_t1 = encode(m, o), encode(m, o1)

    def forward_obj():
        d = predict_next(m, phi_t, a) - phi_t1
        return 0.3 * float((0.5 * (d * d).sum(axis=1)).mean())

    def inverse_obj():
        return 0.7 * inverse_loss(m, encode(m, o), encode(m, o1), a)

    g_fwd = central_difference(forward_obj, m.forward_model.params())
    g_inv = central_difference(inverse_obj, m.encoder.params() + m.inverse_model.params())
    assert max_relative_error(out["grads"][n_enc:n_enc + n_fwd], g_fwd) < 1e-4
    assert max_relative_error(out["grads"][:n_enc] + out["grads"][n_enc + n_fwd:], g_inv) < 1e-4


def test_repeated_pair_prediction_error_collapses():
    m = CuriosityModule(OBS, IcmConfig(), 7)
    rng = np.random.default_rng(7)
    o, o1, a = rng.normal(size=OBS), rng.normal(size=OBS), _onehot(3)
    first = m.step(o, a, o1, learn=False)
    for _ in range(200):
        m.step(o, a, o1)
    assert m.step(o, a, o1, learn=False) < 0.1 * first


def test_inverse_model_learns_action_above_chance():
    # next observation depends on the action, so the action is recoverable
    rng = np.random.default_rng(8)
    m = CuriosityModule(OBS, IcmConfig(lr=3e-3), 8)
    shift = rng.normal(size=(5, OBS))
    for _ in range(400):
        k = rng.integers(0, 5, 32)
        o = rng.normal(size=(32, OBS))
        icm_update(m, o, np.eye(5)[k], o + shift[k])
    k = rng.integers(0, 5, 500)
    o = rng.normal(size=(500, OBS))
    logits = m.inverse_model(np.concatenate([encode(m, o), encode(m, o + shift[k])], axis=1))
    assert (logits.argmax(axis=1) == k).mean() > 0.2


@settings(max_examples=30, deadline=None)
@given(eta=st.floats(0.0, 5.0), seed=st.integers(0, 1000))
def test_reward_linear_in_eta(eta, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=16), rng.normal(size=16)
    base = intrinsic_reward(IcmConfig(eta=1.0), p, q)
    assert intrinsic_reward(IcmConfig(eta=eta), p, q) == pytest.approx(eta * base, rel=1e-12, abs=1e-300)
    assert intrinsic_reward(IcmConfig(eta=eta), p, q) >= 0.0


def test_modules_are_independent():
    a, b = CuriosityModule(OBS, IcmConfig(), 1), CuriosityModule(OBS, IcmConfig(), 2)
    before = [p.copy() for p in b.params()]
    rng = np.random.default_rng(0)
    for _ in range(10):
        a.step(rng.normal(size=OBS), _onehot(0), rng.normal(size=OBS))
    assert all(np.array_equal(x, y) for x, y in zip(before, b.params()))


def test_raw_prediction_variant():
    m = CuriosityModule(OBS, IcmConfig(predict_raw_observations=True), 0)
    assert m.forward_model.n_out == OBS
    rng = np.random.default_rng(0)
    r = m.step(rng.normal(size=OBS), _onehot(1), rng.normal(size=OBS))
    assert r > 0


def test_step_reward_is_pre_update():
    m = CuriosityModule(OBS, IcmConfig(), 9)
    rng = np.random.default_rng(9)
    o, o1, a = rng.normal(size=OBS), rng.normal(size=OBS), _onehot(4)
    expected = m.step(o, a, o1, learn=False)
    assert m.step(o, a, o1) == pytest.approx(expected, rel=1e-12)


def test_total_reward_sums():
    assert total_reward(0.25, -10.0) == -9.75


def test_config_validation():
    with pytest.raises(ValueError):
        IcmConfig(beta=1.5)
    with pytest.raises(ValueError):
        IcmConfig(eta=-0.1)


def test_wrong_observation_width():
    with pytest.raises(ValueError):
        encode(CuriosityModule(OBS, IcmConfig(), 0), np.zeros(OBS + 1))
