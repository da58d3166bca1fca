"""Data-to-noise couplings: independent, minibatch optimal transport, variational.

Every coupling emits unit-scale noise; all sigma scaling lives in the
kernel, so couplings are kernel-agnostic. The variational coupling draws
noise through a learned Gaussian encoder via the reparameterization
x1 = mean + scale * eps and carries the analytic KL to the standard-normal
prior as its auxiliary loss; the other two carry an exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .networks import GaussianEncoder, ParamSet

INDEPENDENT = "independent"
OT = "ot"
VARIATIONAL = "variational"
KINDS = (INDEPENDENT, OT, VARIATIONAL)


@dataclass
class CouplingSample:
    """One batch draw from a coupling.

    x1 is unit-scale noise shaped like the data batch; aux_loss is a scalar
    tensor (differentiable for the variational coupling, exact zero
    otherwise); kl_per_point holds per-element KL diagnostics.
    """

    x1: Tensor
    aux_loss: Tensor
    kl_per_point: np.ndarray = field(default_factory=lambda: np.zeros(0))


def kl_diag_gaussian_to_standard(
    mean: Tensor, scale: Tensor, dim_reduction: str = "sum"
) -> Tensor:
    """Analytic KL( N(mean, diag(scale^2)) || N(0, I) ), averaged over the batch.

    Per element the integrand is (mean^2 + scale^2 - 1 - 2 log scale) / 2;
    feature axes are summed (or averaged, per `dim_reduction`) and axis 0 is
    treated as the batch when the input is at least 2-d.
    """
    mean, scale = ad.as_tensor(mean), ad.as_tensor(scale)
    if mean.shape != scale.shape:
        raise ad.ShapeError(f"KL: mean shape {mean.shape} != scale shape {scale.shape}")
    if np.any(scale.data <= 0.0):
        raise ad.DomainError("KL requires strictly positive scale")
    if dim_reduction not in ("sum", "mean"):
        raise ValueError(f"unknown dim_reduction {dim_reduction!r}")
    elem = ad.scale(
        ad.subtract(
            ad.add(ad.square(mean), ad.square(scale)),
            ad.add(Tensor(1.0), ad.scale(ad.log(scale), 2.0)),
        ),
        0.5,
    )
    if mean.ndim < 2:
        return elem.sum() if dim_reduction == "sum" else elem.mean()
    feature_axes = tuple(range(1, mean.ndim))
    per_point = (
        elem.sum(axis=feature_axes) if dim_reduction == "sum" else elem.mean(axis=feature_axes)
    )
    return per_point.mean()


def kl_per_point_values(
    mean: np.ndarray, scale: np.ndarray, dim_reduction: str = "sum"
) -> np.ndarray:
    """Per-batch-element KL values (plain numpy mirror used for telemetry)."""
    elem = 0.5 * (mean**2 + scale**2 - 1.0 - 2.0 * np.log(scale))
    if elem.ndim < 2:
        return np.atleast_1d(elem.sum() if dim_reduction == "sum" else elem.mean())
    axes = tuple(range(1, elem.ndim))
    return elem.sum(axis=axes) if dim_reduction == "sum" else elem.mean(axis=axes)


def independent_sample(x0: np.ndarray, rng: np.random.Generator) -> CouplingSample:
    """Standard-normal noise, no pairing structure, zero auxiliary loss."""
    x1 = rng.standard_normal(x0.shape)
    return CouplingSample(
        x1=Tensor(x1), aux_loss=Tensor(0.0), kl_per_point=np.zeros(len(x0))
    )


def minibatch_ot_pairing(x0_batch: np.ndarray, x1_batch: np.ndarray) -> np.ndarray:
    """Assignment pi minimizing sum_i ||x0_i - x1_pi(i)||^2 (exact, not entropic)."""
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    x1_batch = np.asarray(x1_batch, dtype=np.float64)
    if len(x0_batch) == 0:
        raise ValueError("OT pairing needs a non-empty batch")
    if len(x0_batch) != len(x1_batch):
        raise ValueError(
            f"OT pairing needs equal batch sizes, got {len(x0_batch)} and {len(x1_batch)}"
        )
    a = x0_batch.reshape(len(x0_batch), -1)
    b = x1_batch.reshape(len(x1_batch), -1)
    # ||a_i - b_j||^2 expanded; the row term is constant per row and does not
    # change the argmin, but keeping it makes the matrix a true cost matrix
    cost = (
        (a * a).sum(axis=1)[:, None] - 2.0 * (a @ b.T) + (b * b).sum(axis=1)[None, :]
    )
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(len(x0_batch), dtype=np.intp)
    perm[rows] = cols
    return perm


def ot_sample(x0: np.ndarray, rng: np.random.Generator) -> CouplingSample:
    """Independent draws re-paired within the batch by exact linear assignment."""
    x1 = rng.standard_normal(x0.shape)
    perm = minibatch_ot_pairing(x0, x1)
    return CouplingSample(
        x1=Tensor(x1[perm]), aux_loss=Tensor(0.0), kl_per_point=np.zeros(len(x0))
    )


def variational_sample(
    encoder: GaussianEncoder,
    phi: ParamSet,
    x0: np.ndarray,
    rng: np.random.Generator,
    dim_reduction: str = "sum",
) -> CouplingSample:
    """Reparameterized encoder draw with its KL to the prior as auxiliary loss.

    Gradients flow to phi through both x1 (reparameterization path) and the
    KL term when this runs under an active tape.
    """
    posterior = encoder.forward(phi, Tensor(np.asarray(x0, dtype=np.float64)))
    mean_v, scale_v = posterior.mean.data, posterior.scale.data
    if not (np.all(np.isfinite(mean_v)) and np.all(np.isfinite(scale_v))):
        raise ad.NonFiniteError("encoder produced non-finite mean or scale")
    eps = rng.standard_normal(mean_v.shape)
    x1 = ad.add(posterior.mean, ad.multiply(posterior.scale, Tensor(eps)))
    aux = kl_diag_gaussian_to_standard(posterior.mean, posterior.scale, dim_reduction)
    return CouplingSample(
        x1=x1,
        aux_loss=aux,
        kl_per_point=kl_per_point_values(mean_v, scale_v, dim_reduction),
    )
