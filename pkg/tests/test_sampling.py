"""Sampler semantics: 1-step equivalence, noise scale, EMA switch, determinism."""

import numpy as np
import pytest

from ctlab import evaluation, sampling, training
from ctlab.sampling import SamplerConfig
from tests.test_training import tiny_config


@pytest.fixture(scope="module")
def trained_tiny():
    cfg = tiny_config(iterations=500)
    setup = training.TrainSetup(cfg)
    state = training.init_state(cfg)
    while state.k < cfg.iterations:
        x0 = setup.dataset.sample(cfg.batch_size, state.rng)
        state, _ = training.train_step(state, setup, x0)
    return cfg, setup, state


def test_empty_time_points_is_one_step(trained_tiny):
    cfg, setup, state = trained_tiny
    out_a = sampling.generate_from_state(
        setup, state, SamplerConfig(), 64, np.random.default_rng(3)
    )
    out_b = sampling.sample_baseline_multistep(
        setup.net, state.theta_ema, setup.kernel, SamplerConfig(), 64, np.random.default_rng(3)
    )
    np.testing.assert_array_equal(out_a, out_b)  # loop body skipped in both


def test_one_step_is_f_of_scaled_noise(trained_tiny):
    cfg, setup, state = trained_tiny
    rng = np.random.default_rng(5)
    out = sampling.generate_from_state(setup, state, SamplerConfig(), 32, rng)
    rng2 = np.random.default_rng(5)
    from ctlab.autodiff import Tensor

    noise = setup.kernel.sigma_max * rng2.standard_normal((32, setup.dataset.dim))
    expected = setup.net.forward(state.theta_ema, Tensor(noise), setup.kernel.sigma_max)
    np.testing.assert_array_equal(out, expected.data)


def test_multistep_time_points_validated(trained_tiny):
    cfg, setup, state = trained_tiny
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sampling.generate_from_state(
            setup, state, SamplerConfig(time_points=(0.2,)), 8, rng
        )
    with pytest.raises(ValueError):
        sampling.generate_from_state(
            setup, state, SamplerConfig(time_points=(0.03, 0.07)), 8, rng
        )


def test_multistep_noise_scale_with_prior_encoder(trained_tiny):
    """std of x_hat - a * x over the batch is tau when the noise is prior draws."""
    cfg, setup, state = trained_tiny
    from ctlab import kernels
    from ctlab.autodiff import Tensor

    rng = np.random.default_rng(11)
    count = 4000
    x = sampling.sample_baseline_multistep(
        setup.net, state.theta_ema, setup.kernel, SamplerConfig(), count, rng
    )
    tau = 0.07
    x1 = rng.standard_normal(x.shape)
    x_hat = kernels.perturb(setup.kernel, Tensor(x), Tensor(x1), tau).data
    a, _ = kernels.blend(setup.kernel, tau)
    residual_std = (x_hat - a * x).std()
    assert residual_std == pytest.approx(tau, rel=0.05)


def test_deterministic_given_seed(trained_tiny):
    cfg, setup, state = trained_tiny
    two = SamplerConfig(time_points=(0.07,))
    a = sampling.generate_from_state(setup, state, two, 64, np.random.default_rng(9))
    b = sampling.generate_from_state(setup, state, two, 64, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_ema_switch_changes_only_parameter_set(trained_tiny):
    cfg, setup, state = trained_tiny
    live = sampling.generate_from_state(
        setup, state, SamplerConfig(use_ema=False), 32, np.random.default_rng(4)
    )
    ema = sampling.generate_from_state(
        setup, state, SamplerConfig(use_ema=True), 32, np.random.default_rng(4)
    )
    assert not np.array_equal(live, ema)
    direct = sampling.sample(
        setup.net,
        state.theta,
        setup.encoder,
        state.phi,
        setup.kernel,
        SamplerConfig(use_ema=False),
        32,
        np.random.default_rng(4),
    )
    np.testing.assert_array_equal(live, direct)


def test_prior_encoder_matches_baseline_in_distribution():
    """With the encoder still at (0, 1) the two samplers sample the same law."""
    cfg = tiny_config(iterations=1)
    setup = training.TrainSetup(cfg)
    state = training.init_state(cfg)  # zero-initialized encoder head: exact prior
    two = SamplerConfig(time_points=(0.07,))
    a = sampling.generate_from_state(setup, state, two, 512, np.random.default_rng(21))
    b = sampling.sample_baseline_multistep(
        setup.net, state.theta_ema, setup.kernel, two, 512, np.random.default_rng(22)
    )
    p = evaluation.energy_permutation_pvalue(a, b, np.random.default_rng(23), n_perm=100)
    assert p > 0.01


def test_trained_two_step_outputs_within_data_bounds(trained_tiny):
    cfg, setup, state = trained_tiny
    out = sampling.generate_from_state(
        setup, state, SamplerConfig(time_points=(0.07,)), 512, np.random.default_rng(13)
    )
    assert np.all(np.isfinite(out))
    # mixture support: means at y = +-0.5, component std 0.05; 5 sigma slack
    assert np.all(np.abs(out[:, 0]) < 0.0 + 5 * 0.05 + 0.1)
    assert np.all(np.abs(out[:, 1]) < 0.5 + 5 * 0.05 + 0.1)
