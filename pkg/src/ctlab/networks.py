"""Toy-scale consistency network, Gaussian encoder and EMA parameter shadows.

Both networks are plain GeLU MLPs. The consistency network conditions on
the noise level through a sinusoidal positional embedding concatenated to
the input-scaled state; the encoder sees only the clean data and emits a
mean and a strictly positive per-coordinate scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

# floor on the encoder scale; keeps the KL log term away from -inf
SCALE_FLOOR = 1e-6
_LOGVAR_FLOOR = 2.0 * math.log(SCALE_FLOOR)


@dataclass(frozen=True)
class MLPSpec:
    """Shape of a GeLU MLP; depth counts weight layers."""

    input_dim: int
    hidden_dim: int = 128
    depth: int = 4
    time_embed_dim: int = 64

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be at least 1, got {self.depth}")
        for name in ("input_dim", "hidden_dim", "time_embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")


class ParamSet:
    """Ordered, named collection of parameter tensors with a stable layout."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._tensors.values())

    @property
    def n_scalars(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._tensors.items()})

    def same_layout(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape for k in self._tensors
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._tensors.values()])


def init_mlp(
    in_dim: int,
    hidden_dim: int,
    out_dim: int,
    depth: int,
    rng: np.random.Generator,
    zero_last: bool = False,
) -> ParamSet:
    """Variance-preserving init: weights ~ N(0, 1/fan_in), zero biases."""
    dims = [in_dim] + [hidden_dim] * (depth - 1) + [out_dim]
    tensors: dict[str, Tensor] = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        if zero_last and i == depth - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
        tensors[f"w{i}"] = Tensor(w)
        tensors[f"b{i}"] = Tensor(np.zeros(fan_out))
    return ParamSet(tensors)


def mlp_forward(params: ParamSet, x: Tensor) -> Tensor:
    """GeLU on every layer but the last."""
    h = x
    i = 0
    while f"w{i}" in params:
        h = ad.add(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"])
        if f"w{i + 1}" in params:
            h = ad.gelu(h)
        i += 1
    return h


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal features [sin(t w_j), cos(t w_j)], w_j geometric in [1, 1e4].

    A scalar t gives a (dim,) vector; a batch vector gives (len(t), dim).
    """
    if dim % 2 != 0:
        raise ValueError(f"time embedding dimension must be even, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(np.linspace(0.0, math.log(1e4), half))
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        ang = float(t) * freqs
        return np.concatenate([np.sin(ang), np.cos(ang)])
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ConsistencyNet:
    """MLP denoiser behind the boundary parameterization.

    forward(theta, x, sigma) = c_skip(sigma) * x + c_out(sigma) * F(c_in(sigma) * x, emb(sigma));
    at sigma == sigma_min the output is exactly x, whatever theta is.
    """

    def __init__(
        self,
        spec: MLPSpec,
        kernel: kernels.TransitionKernel,
        embed_log_sigma: bool = False,
    ):
        self.spec = spec
        self.kernel = kernel
        self.embed_log_sigma = embed_log_sigma

    def init(self, rng: np.random.Generator) -> ParamSet:
        return init_mlp(
            self.spec.input_dim + self.spec.time_embed_dim,
            self.spec.hidden_dim,
            self.spec.input_dim,
            self.spec.depth,
            rng,
        )

    def forward(self, theta: ParamSet, x: Tensor, sigma) -> Tensor:
        """Denoise a batch at noise level sigma (scalar or per-sample vector)."""
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ad.ShapeError(
                f"expected a (batch, {self.spec.input_dim}) input, got {x.shape}"
            )
        c_in, _, _ = kernels.scalings(self.kernel, sigma)
        cond = np.log(sigma) if self.embed_log_sigma else sigma
        emb = time_embedding(cond, self.spec.time_embed_dim)
        if emb.ndim == 1:
            emb_rows = ad.broadcast_to(Tensor(emb[None, :]), (x.shape[0], emb.size))
            scaled = ad.scale(x, c_in)
        else:
            emb_rows = Tensor(emb)
            scaled = ad.multiply(x, Tensor(np.asarray(c_in)[:, None]))
        feats = ad.concatenate([scaled, emb_rows], axis=1)
        raw = mlp_forward(theta, feats)
        return kernels.consistency_output(self.kernel, raw, x, sigma)


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian over noise space; scale is strictly positive."""

    mean: Tensor
    scale: Tensor


class GaussianEncoder:
    """Data-conditional Gaussian over noise, no time conditioning.

    The final layer starts at zero so the initial posterior is exactly the
    standard-normal prior (mean 0, scale 1) and training begins at the
    independent coupling.
    """

    def __init__(self, input_dim: int, hidden_dim: int = 64, depth: int = 4):
        if depth < 1:
            raise ValueError(f"depth must be at least 1, got {depth}")
        if input_dim <= 0 or hidden_dim <= 0:
            raise ValueError("encoder dimensions must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.depth = depth

    def init(self, rng: np.random.Generator) -> ParamSet:
        return init_mlp(
            self.input_dim, self.hidden_dim, 2 * self.input_dim, self.depth, rng, zero_last=True
        )

    def forward(self, phi: ParamSet, x0: Tensor) -> GaussianPosterior:
        x0 = ad.as_tensor(x0)
        if x0.ndim != 2 or x0.shape[1] != self.input_dim:
            raise ad.ShapeError(
                f"expected a (batch, {self.input_dim}) input, got {x0.shape}"
            )
        h = mlp_forward(phi, x0)
        d = self.input_dim
        mean = h[:, :d]
        logvar = ad.clip_min(h[:, d:], _LOGVAR_FLOOR)
        return GaussianPosterior(mean=mean, scale=ad.exp(ad.scale(logvar, 0.5)))


def ema_update(shadow: ParamSet, current: ParamSet, mu: float) -> ParamSet:
    """Elementwise mu * shadow + (1 - mu) * current; never differentiated."""
    if not (0.0 <= mu < 1.0):
        raise ValueError(f"EMA rate must lie in [0, 1), got {mu}")
    if not shadow.same_layout(current):
        raise ValueError("EMA update between parameter sets with different layouts")
    return ParamSet(
        {
            k: Tensor(mu * shadow[k].data + (1.0 - mu) * current[k].data)
            for k in shadow.names()
        }
    )
