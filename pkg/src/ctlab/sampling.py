"""One-step and multistep generation, with or without the learned coupling.

Multistep sampling alternates denoising with re-noising: after the first
full denoise from sigma_max, each round draws fresh noise (from the
encoder conditioned on the current estimate, or from the prior for the
baseline sampler), re-perturbs to the next time point and denoises again.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor
from .networks import ConsistencyNet, GaussianEncoder, ParamSet


@dataclass(frozen=True)
class SamplerConfig:
    """Descending interior time points; empty means 1-step generation."""

    time_points: tuple[float, ...] = ()
    use_ema: bool = True
    seed: int = 32

    def steps(self) -> int:
        return len(self.time_points) + 1


def _check_times(kernel: kernels.TransitionKernel, taus: tuple[float, ...]) -> None:
    for tau in taus:
        if not (kernel.sigma_min < tau < kernel.sigma_max):
            raise ValueError(
                f"intermediate time {tau} outside ({kernel.sigma_min}, {kernel.sigma_max})"
            )
    if any(a <= b for a, b in zip(taus, taus[1:])):
        raise ValueError(f"time points must be strictly descending, got {taus}")


def _multistep(
    net: ConsistencyNet,
    theta: ParamSet,
    kernel: kernels.TransitionKernel,
    cfg: SamplerConfig,
    count: int,
    dim: int,
    rng: np.random.Generator,
    draw_noise,
    return_noise: bool,
):
    _check_times(kernel, cfg.time_points)
    x_init = kernel.sigma_max * rng.standard_normal((count, dim))
    x = net.forward(theta, Tensor(x_init), kernel.sigma_max).data
    for tau in cfg.time_points:
        x1 = draw_noise(x, rng)
        x_hat = kernels.perturb(kernel, Tensor(x), Tensor(x1), tau).data
        x = net.forward(theta, Tensor(x_hat), tau).data
    if return_noise:
        return x, x_init
    return x


def sample(
    net: ConsistencyNet,
    theta: ParamSet,
    encoder: GaussianEncoder,
    phi: ParamSet,
    kernel: kernels.TransitionKernel,
    cfg: SamplerConfig,
    count: int,
    rng: np.random.Generator,
    return_noise: bool = False,
):
    """Multistep generation with the encoder producing the re-noising draws.

    With an empty time_points list this is exactly 1-step generation from
    sigma_max-scaled standard-normal noise.
    """

    def draw(x: np.ndarray, r: np.random.Generator) -> np.ndarray:
        posterior = encoder.forward(phi, Tensor(x))
        eps = r.standard_normal(x.shape)
        return posterior.mean.data + posterior.scale.data * eps

    return _multistep(
        net, theta, kernel, cfg, count, net.spec.input_dim, rng, draw, return_noise
    )


def sample_baseline_multistep(
    net: ConsistencyNet,
    theta: ParamSet,
    kernel: kernels.TransitionKernel,
    cfg: SamplerConfig,
    count: int,
    rng: np.random.Generator,
    return_noise: bool = False,
):
    """Multistep generation with prior (standard-normal) re-noising draws."""

    def draw(x: np.ndarray, r: np.random.Generator) -> np.ndarray:
        return r.standard_normal(x.shape)

    return _multistep(
        net, theta, kernel, cfg, count, net.spec.input_dim, rng, draw, return_noise
    )


def generate_from_state(
    setup,
    state,
    cfg: SamplerConfig,
    count: int,
    rng: np.random.Generator,
    return_noise: bool = False,
):
    """Sample from a TrainState, honoring cfg.use_ema and the coupling kind."""
    theta = state.theta_ema if cfg.use_ema else state.theta
    if state.phi is not None:
        phi = state.phi_ema if cfg.use_ema else state.phi
        return sample(
            setup.net, theta, setup.encoder, phi, setup.kernel, cfg, count, rng, return_noise
        )
    return sample_baseline_multistep(
        setup.net, theta, setup.kernel, cfg, count, rng, return_noise
    )
