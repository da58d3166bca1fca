"""Forward transition kernels and the boundary-respecting output parameterization.

Both supported kernels write the noisy state as ``x_t = a_t * x0 + t * x1``
with unit-scale noise ``x1``:

* ``ve`` (variance exploding): ``a_t = 1``;
* ``li`` (linear interpolation): ``a_t = 1 - t / sigma_max``; the nominal
  interpolation coefficient ``b_t = t / sigma_max`` multiplies noise that
  is pre-scaled by ``sigma_max``, so the effective multiplier on
  unit-scale noise is again ``t``.

The input/skip/output scalings use the sigma_min-shifted boundary forms so
that ``c_skip(sigma_min) = 1`` and ``c_out(sigma_min) = 0`` exactly, making
the composed network the identity map at the clean endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VE = "ve"
LI = "li"
_KINDS = (VE, LI)


@dataclass(frozen=True)
class TransitionKernel:
    """Configuration of the forward perturbation ``x_t = a_t x0 + t x1``."""

    kind: str
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}, expected one of {_KINDS}")
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(
                f"need 0 < sigma_min < sigma_max, got ({self.sigma_min}, {self.sigma_max})"
            )
        if self.sigma_data <= 0.0:
            raise ValueError(f"sigma_data must be positive, got {self.sigma_data}")


def _check_time(kernel: TransitionKernel, t):
    """Validate a scalar time or a per-sample time vector against the range."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < kernel.sigma_min) or np.any(t > kernel.sigma_max):
        bad = t if t.ndim == 0 else t[(t < kernel.sigma_min) | (t > kernel.sigma_max)][0]
        raise ValueError(
            f"time {float(bad)} outside kernel range [{kernel.sigma_min}, {kernel.sigma_max}]"
        )
    return float(t) if t.ndim == 0 else t


def coefficients(kernel: TransitionKernel, t: float) -> tuple[float, float]:
    """Nominal kernel pair (a_t, b_t).

    For ``li`` the returned ``b_t = t / sigma_max`` applies to noise
    pre-scaled by ``sigma_max``; the effective multiplier on unit-scale
    noise is ``b_t * sigma_max = t`` for both kinds.
    """
    t = _check_time(kernel, t)
    if kernel.kind == VE:
        return 1.0, t
    return 1.0 - t / kernel.sigma_max, t / kernel.sigma_max


def blend(kernel: TransitionKernel, t):
    """Effective pair (a_t, s_t) so that ``x_t = a_t x0 + s_t x1`` on unit noise.

    Accepts a scalar time or a per-sample vector.
    """
    t = _check_time(kernel, t)
    if kernel.kind == VE:
        a = 1.0 if np.ndim(t) == 0 else np.ones_like(t)
    else:
        a = 1.0 - t / kernel.sigma_max
    return a, t


def _row_mix(x0: Tensor, x1: Tensor, a, s) -> Tensor:
    """a*x0 + s*x1 with a, s scalars or per-sample column weights."""
    if np.ndim(a) == 0:
        return ad.add(ad.scale(x0, float(a)), ad.scale(x1, float(s)))
    col_a = Tensor(np.asarray(a, dtype=np.float64)[:, None])
    col_s = Tensor(np.asarray(s, dtype=np.float64)[:, None])
    return ad.add(ad.multiply(x0, col_a), ad.multiply(x1, col_s))


def perturb(kernel: TransitionKernel, x0: Tensor, x1: Tensor, t) -> Tensor:
    """Noisy state at time t (scalar or per-sample vector) from x0 and unit noise x1."""
    x0, x1 = ad.as_tensor(x0), ad.as_tensor(x1)
    if x0.shape != x1.shape:
        raise ad.ShapeError(f"perturb: x0 shape {x0.shape} != x1 shape {x1.shape}")
    a, s = blend(kernel, t)
    if np.ndim(t) != 0 and len(np.asarray(t)) != x0.shape[0]:
        raise ad.ShapeError(
            f"perturb: {len(np.asarray(t))} times for a batch of {x0.shape[0]}"
        )
    return _row_mix(x0, x1, a, s)


def scalings(kernel: TransitionKernel, sigma):
    """(c_in, c_skip, c_out) at noise level sigma (scalar or per-sample vector).

    ve:  c_in  = 1 / sqrt(sigma_data^2 + sigma^2)
         c_skip = sigma_data^2 / ((sigma - sigma_min)^2 + sigma_data^2)
         c_out = (sigma - sigma_min) * sigma_data / sqrt(sigma^2 + sigma_data^2)
    li:  with alpha = 1 - sigma/sigma_max and
         w = 1 - (sigma - sigma_min) / (sigma_max - sigma_min):
         c_in  = 1 / sqrt(sigma_data^2 * alpha^2 + sigma^2)
         c_skip = sigma_data^2 * w / ((sigma - sigma_min)^2 + sigma_data^2 * w^2)
         c_out = (sigma - sigma_min) * sigma_data * c_in
    """
    sigma = _check_time(kernel, sigma)
    sd2 = kernel.sigma_data * kernel.sigma_data
    shifted = sigma - kernel.sigma_min
    if kernel.kind == VE:
        c_in = 1.0 / np.sqrt(sd2 + sigma * sigma)
        c_skip = sd2 / (shifted * shifted + sd2)
        c_out = shifted * kernel.sigma_data / np.sqrt(sigma * sigma + sd2)
    else:
        alpha = 1.0 - sigma / kernel.sigma_max
        w = 1.0 - shifted / (kernel.sigma_max - kernel.sigma_min)
        c_in = 1.0 / np.sqrt(sd2 * alpha * alpha + sigma * sigma)
        c_skip = sd2 * w / (shifted * shifted + sd2 * w * w)
        c_out = shifted * kernel.sigma_data * c_in
    if np.ndim(sigma) == 0:
        return float(c_in), float(c_skip), float(c_out)
    return c_in, c_skip, c_out


def consistency_output(kernel: TransitionKernel, raw: Tensor, x: Tensor, sigma) -> Tensor:
    """Compose the network head: c_skip(sigma) * x + c_out(sigma) * raw.

    At sigma == sigma_min this is exactly the identity in x.
    """
    raw, x = ad.as_tensor(raw), ad.as_tensor(x)
    if raw.shape != x.shape:
        raise ad.ShapeError(
            f"consistency_output: raw shape {raw.shape} != x shape {x.shape}"
        )
    _, c_skip, c_out = scalings(kernel, sigma)
    return _row_mix(x, raw, c_skip, c_out)
