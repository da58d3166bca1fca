"""Consistency net, Gaussian encoder, time embedding and EMA shadows."""

import numpy as np
import pytest

from ctlab import autodiff as ad
from ctlab import networks
from ctlab.autodiff import Tensor
from ctlab.kernels import TransitionKernel
from ctlab.networks import (
    ConsistencyNet,
    GaussianEncoder,
    MLPSpec,
    ParamSet,
    ema_update,
    time_embedding,
)

KERNEL = TransitionKernel("li", 0.002, 0.1, 0.05)


def make_net(hidden=16, temb=8):
    return ConsistencyNet(
        MLPSpec(input_dim=2, hidden_dim=hidden, depth=4, time_embed_dim=temb), KERNEL
    )


def test_time_embedding_at_zero():
    emb = time_embedding(0.0, 8)
    np.testing.assert_allclose(emb[:4], 0.0, atol=0)
    np.testing.assert_allclose(emb[4:], 1.0, atol=0)


def test_time_embedding_norm_bound():
    for t in (0.002, 0.05, 3.7, 80.0):
        emb = time_embedding(t, 32)
        assert np.linalg.norm(emb) <= np.sqrt(32) + 1e-12


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        time_embedding(1.0, 7)


def test_time_embedding_injective_on_random_pairs():
    rng = np.random.default_rng(0)
    ts = rng.uniform(0.002, 80.0, size=(10_000, 2))
    for t1, t2 in ts:
        if t1 == t2:
            continue
        e1, e2 = time_embedding(t1, 16), time_embedding(t2, 16)
        assert not np.array_equal(e1, e2)


def test_consistency_forward_identity_at_sigma_min():
    net = make_net()
    theta = net.init(np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((6, 2)))
    out = net.forward(theta, x, KERNEL.sigma_min)
    np.testing.assert_allclose(out.data, x.data, atol=1e-12, rtol=0)


def test_consistency_forward_shape():
    net = make_net()
    theta = net.init(np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((5, 2)))
    assert net.forward(theta, x, 0.05).shape == (5, 2)


def test_consistency_forward_gradient_vs_fd():
    net = make_net(hidden=6, temb=4)
    theta = net.init(np.random.default_rng(3))
    x0 = np.random.default_rng(4).standard_normal((3, 2))
    name = "w1"

    def loss(param):
        trial = ParamSet({k: (param if k == name else v) for k, v in theta.items()})
        return ad.square(net.forward(trial, Tensor(x0), 0.07)).sum()

    with ad.Tape() as tape:
        tape.watch(*theta.tensors())
        out = loss(theta[name])
    analytic = ad.backward(tape, out).wrt(theta[name])
    numeric = ad.finite_difference_gradient(loss, theta[name])
    assert ad.fd_relative_error(analytic, numeric) < 1e-4


def test_encoder_shapes_match_input():
    enc = GaussianEncoder(input_dim=2, hidden_dim=8, depth=3)
    phi = enc.init(np.random.default_rng(0))
    post = enc.forward(phi, Tensor(np.zeros((7, 2))))
    assert post.mean.shape == (7, 2)
    assert post.scale.shape == (7, 2)
    assert np.all(post.scale.data > 0)


def test_encoder_starts_at_prior():
    enc = GaussianEncoder(input_dim=2, hidden_dim=8, depth=3)
    phi = enc.init(np.random.default_rng(1))
    post = enc.forward(phi, Tensor(np.random.default_rng(2).standard_normal((5, 2))))
    np.testing.assert_allclose(post.mean.data, 0.0, atol=0)
    np.testing.assert_allclose(post.scale.data, 1.0, atol=0)


def test_encoder_gradient_vs_fd():
    enc = GaussianEncoder(input_dim=2, hidden_dim=6, depth=3)
    rng = np.random.default_rng(5)
    phi_base = enc.init(rng)
    # non-trivial last layer
    names = phi_base.names()
    tensors = {k: v for k, v in phi_base.items()}
    tensors[names[-2]] = Tensor(0.5 * rng.standard_normal(phi_base[names[-2]].shape))
    phi = ParamSet(tensors)
    x0 = rng.standard_normal((3, 2))
    name = "w0"

    def loss(param):
        trial = ParamSet({k: (param if k == name else v) for k, v in phi.items()})
        post = enc.forward(trial, Tensor(x0))
        return ad.add(ad.square(post.mean).sum(), ad.square(post.scale).sum())

    with ad.Tape() as tape:
        tape.watch(*phi.tensors())
        out = loss(phi[name])
    analytic = ad.backward(tape, out).wrt(phi[name])
    numeric = ad.finite_difference_gradient(loss, phi[name])
    assert ad.fd_relative_error(analytic, numeric) < 1e-4


def test_encoder_smaller_than_consistency_net_under_toy_defaults():
    from ctlab.config import preset
    from ctlab.training import init_state

    cfg = preset("toy-appendix-e")
    state = init_state(cfg)
    assert state.phi.n_scalars < state.theta.n_scalars


def test_deterministic_initialization():
    net = make_net()
    t1 = net.init(np.random.default_rng(77))
    t2 = net.init(np.random.default_rng(77))
    assert t1.names() == t2.names()
    for name in t1.names():
        assert np.array_equal(t1[name].data, t2[name].data)


def test_ema_update_mu_zero_copies_current():
    net = make_net(hidden=4, temb=4)
    shadow = net.init(np.random.default_rng(0))
    current = net.init(np.random.default_rng(1))
    out = ema_update(shadow, current, 0.0)
    for name in out.names():
        assert np.array_equal(out[name].data, current[name].data)


def test_ema_update_geometric_series():
    spec_net = make_net(hidden=4, temb=4)
    shadow = spec_net.init(np.random.default_rng(2))
    current = spec_net.init(np.random.default_rng(3))
    mu, steps = 0.9, 7
    rolled = shadow
    for _ in range(steps):
        rolled = ema_update(rolled, current, mu)
    for name in rolled.names():
        expected = shadow[name].data * mu**steps + current[name].data * (1 - mu**steps)
        np.testing.assert_allclose(rolled[name].data, expected, atol=1e-12)


def test_ema_update_layout_mismatch_rejected():
    a = make_net(hidden=4, temb=4).init(np.random.default_rng(0))
    b = make_net(hidden=6, temb=4).init(np.random.default_rng(0))
    with pytest.raises(ValueError):
        ema_update(a, b, 0.9)
    with pytest.raises(ValueError):
        ema_update(a, a, 1.0)


def test_toy_preset_ema_rate_is_0999():
    from ctlab.config import preset

    assert preset("toy-appendix-e").ema_rate == 0.999


def test_mlp_spec_validation():
    with pytest.raises(ValueError):
        MLPSpec(input_dim=2, depth=0)
    with pytest.raises(ValueError):
        MLPSpec(input_dim=0)
