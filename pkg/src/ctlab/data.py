"""Toy datasets: isotropic Gaussian mixtures in low dimension."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture: component means, shared std, weights."""

    means: tuple[tuple[float, ...], ...]
    std: float
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.means) == 0:
            raise ValueError("mixture needs at least one component")
        dims = {len(m) for m in self.means}
        if len(dims) != 1:
            raise ValueError(f"component means disagree on dimension: {sorted(dims)}")
        if self.std <= 0.0:
            raise ValueError(f"mixture std must be positive, got {self.std}")
        if len(self.weights) != len(self.means):
            raise ValueError(
                f"{len(self.weights)} weights for {len(self.means)} components"
            )
        if any(w <= 0.0 for w in self.weights):
            raise ValueError("mixture weights must be positive")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError(f"mixture weights must sum to 1, got {sum(self.weights)}")

    @property
    def dim(self) -> int:
        return len(self.means[0])


class GaussianMixture:
    """Sampler for an isotropic Gaussian mixture."""

    def __init__(self, spec: MixtureSpec):
        self.spec = spec
        self._means = np.asarray(spec.means, dtype=np.float64)
        self._weights = np.asarray(spec.weights, dtype=np.float64)

    @property
    def dim(self) -> int:
        return self.spec.dim

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self._weights), size=n, p=self._weights)
        return self._means[comp] + self.spec.std * rng.standard_normal((n, self.dim))

    def component_means(self) -> np.ndarray:
        return self._means.copy()
