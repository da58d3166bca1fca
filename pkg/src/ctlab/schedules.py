"""Time grids, step-count schedules, time samplers and loss weightings.

Covers both training styles:

* discrete: a rho-warped grid between sigma_min and sigma_max whose point
  count N(k) doubles on an exponential schedule, with adjacent pairs drawn
  from a discrete lognormal distribution;
* continuous: lognormal times clipped into the kernel range, with the
  earlier time produced by a shrinking-ratio mapping.

Weightings: the adaptive inverse-gap consistency weight (paired with a
KL weight that rescales with the last grid gap) and the EDM-style weight
``1/t^2 + 1/sigma_data^2`` (paired with a fixed KL weight).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special as _sp

ADAPTIVE = "adaptive"
EDM = "edm"


@dataclass(frozen=True)
class TimeGrid:
    """Ascending rho-warped time points with exact endpoints."""

    sigmas: np.ndarray
    rho: float = 7.0

    @property
    def n(self) -> int:
        return len(self.sigmas)

    @property
    def last_gap(self) -> float:
        return float(self.sigmas[-1] - self.sigmas[-2])


@dataclass(frozen=True)
class StepSchedule:
    """Exponential doubling of the interval count from s0 to s1 over K iterations."""

    s0: int = 10
    s1: int = 1280
    total_iters: int = 400_000

    def __post_init__(self):
        if not (0 < self.s0 <= self.s1):
            raise ValueError(f"need 0 < s0 <= s1, got ({self.s0}, {self.s1})")
        if self.total_iters <= 0:
            raise ValueError(f"total_iters must be positive, got {self.total_iters}")

    @property
    def stage_length(self) -> int:
        # K' = ceil(K / (log2(s1/s0) + 1)); the +1 counts the initial stage
        return math.ceil(self.total_iters / (math.log2(self.s1 / self.s0) + 1.0))

    @property
    def num_doublings(self) -> int:
        return math.ceil(math.log2(self.s1 / self.s0))


def step_count(schedule: StepSchedule, k: int) -> int:
    """Number of grid points N(k) = min(s0 * 2^floor(k / K'), s1) + 1.

    The s0 multiplier keeps N(0) = s0 + 1; without it the count could not
    start from s0 intervals as the schedule is meant to.
    """
    if k < 0:
        raise ValueError(f"iteration must be non-negative, got {k}")
    stage = k // schedule.stage_length
    return min(schedule.s0 * (2**stage), schedule.s1) + 1


def karras_grid(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> TimeGrid:
    """Rho-warped grid: sigma_i = (smin^(1/rho) + u_i (smax^(1/rho) - smin^(1/rho)))^rho."""
    if n < 2:
        raise ValueError(f"grid needs at least 2 points, got {n}")
    if not (0.0 < sigma_min < sigma_max):
        raise ValueError(f"need 0 < sigma_min < sigma_max, got ({sigma_min}, {sigma_max})")
    lo = sigma_min ** (1.0 / rho)
    hi = sigma_max ** (1.0 / rho)
    u = np.arange(n, dtype=np.float64) / (n - 1)
    sigmas = (lo + u * (hi - lo)) ** rho
    sigmas[0] = sigma_min
    sigmas[-1] = sigma_max
    return TimeGrid(sigmas=sigmas, rho=rho)


def discrete_lognormal_weights(grid: TimeGrid, p_mean: float, p_std: float) -> np.ndarray:
    """Normalized interval weights, erf-difference form of a lognormal over the grid."""
    z = (np.log(grid.sigmas) - p_mean) / (math.sqrt(2.0) * p_std)
    w = _sp.erf(z[1:]) - _sp.erf(z[:-1])
    return w / w.sum()


def sample_discrete_lognormal(
    grid: TimeGrid, p_mean: float, p_std: float, rng: np.random.Generator
) -> int:
    """Draw an interval index i (0-based) so the pair is (sigmas[i], sigmas[i+1])."""
    return int(sample_discrete_lognormal_batch(grid, p_mean, p_std, rng, 1)[0])


def sample_discrete_lognormal_batch(
    grid: TimeGrid, p_mean: float, p_std: float, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Vectorized interval draws; one per batch element during training."""
    if grid.n < 2:
        raise ValueError("grid must have at least 2 points")
    if p_std <= 0.0:
        raise ValueError(f"p_std must be positive, got {p_std}")
    w = discrete_lognormal_weights(grid, p_mean, p_std)
    return rng.choice(len(w), size=size, p=w)


def sample_continuous_lognormal(
    p_mean: float,
    p_std: float,
    sigma_min: float,
    sigma_max: float,
    rng: np.random.Generator,
) -> float:
    """Lognormal time clipped into [sigma_min, sigma_max]."""
    if p_std <= 0.0:
        raise ValueError(f"p_std must be positive, got {p_std}")
    t = math.exp(p_mean + p_std * rng.standard_normal())
    return min(max(t, sigma_min), sigma_max)


def sample_continuous_lognormal_batch(
    p_mean: float,
    p_std: float,
    sigma_min: float,
    sigma_max: float,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Vectorized clipped lognormal times; one per batch element."""
    if p_std <= 0.0:
        raise ValueError(f"p_std must be positive, got {p_std}")
    t = np.exp(p_mean + p_std * rng.standard_normal(size))
    return np.clip(t, sigma_min, sigma_max)


def ecm_r_mapping(
    t,
    iters: int,
    q: float,
    stage_iters: int,
    k_param: float = 8.0,
    b_param: float = 1.0,
    sigma_min: float = 0.002,
):
    """Earlier time r for a sampled t, with the relative gap shrinking over training.

    The ratio r/t is max(0, 1 - n(t) / q^ceil(iters / stage_iters)) with
    n(t) = 1 + k_param * sigmoid(-b_param * t); r is then clamped into
    [sigma_min, t]. For t > sigma_min the result satisfies r < t. Accepts a
    scalar t or a per-sample vector.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0):
        raise ValueError("t must be positive")
    if q <= 1.0:
        raise ValueError(f"q must exceed 1, got {q}")
    if stage_iters <= 0:
        raise ValueError(f"stage_iters must be positive, got {stage_iters}")
    n_t = 1.0 + k_param * _sp.expit(-b_param * t)
    # n(t) / q^a in log space: q^a overflows for very large stage counts
    frac = n_t * math.exp(-math.ceil(iters / stage_iters) * math.log(q))
    ratio = np.maximum(0.0, 1.0 - frac)
    r = np.minimum(np.maximum(t * ratio, sigma_min), t)
    # late-training float saturation of the ratio: keep r strictly below t
    saturated = (r >= t) & (t > sigma_min)
    r = np.where(saturated, np.nextafter(t, 0.0), r)
    return float(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class WeightingSpec:
    """Consistency-loss weighting kind plus the KL regularization strength."""

    kind: str = ADAPTIVE
    beta: float = 0.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.kind not in (ADAPTIVE, EDM):
            raise ValueError(f"unknown weighting kind {self.kind!r}")
        if self.beta < 0.0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


def lambda_ct(spec: WeightingSpec, t_next, t_prev):
    """Consistency weight for the pair (t_prev, t_next); scalar or per-sample."""
    t_next = np.asarray(t_next, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    if spec.kind == ADAPTIVE:
        gap = t_next - t_prev
        if np.any(gap <= 0.0):
            raise ValueError("inverse-gap weighting needs t_next > t_prev everywhere")
        out = 1.0 / gap
    else:
        out = 1.0 / (t_next * t_next) + 1.0 / (spec.sigma_data * spec.sigma_data)
    return float(out) if out.ndim == 0 else out


def lambda_kl(spec: WeightingSpec, grid: TimeGrid | None = None) -> float:
    """KL weight: beta rescaled by the last grid gap (adaptive) or beta itself (edm)."""
    if spec.kind == EDM:
        return spec.beta
    if grid is None:
        raise ValueError("adaptive KL weighting requires the current time grid")
    return spec.beta / grid.last_gap
