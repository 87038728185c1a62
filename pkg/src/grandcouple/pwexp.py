"""Exact piecewise-exponential density algebra.

Shifted unit-rate exponentials have densities ``c * exp(-x)`` with a
piecewise-constant coefficient ``c`` over intervals between shift points.
That family is closed under mixtures and under the residual operation
``nu * (1 - min(1, mu / (m * nubar)))`` because the ratio of two members is
piecewise constant, so the recursive list coupler can materialize every
intermediate residual exactly.  See docs/piecewise_exponential_residuals.md
for the derivation.
"""

from __future__ import annotations

import numpy as np

__all__ = ["PiecewiseExp"]


class PiecewiseExp:
    """Density ``coeffs[j] * exp(-x)`` on ``[knots[j], knots[j+1])`` with the
    last segment extending to infinity.  Not necessarily normalized."""

    __slots__ = ("knots", "coeffs")

    def __init__(self, knots, coeffs):
        self.knots = np.asarray(knots, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=float)
        if self.knots.ndim != 1 or self.knots.size != self.coeffs.size:
            raise ValueError("need one coefficient per knot")
        if self.knots.size == 0:
            raise ValueError("empty density")
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        if np.any(self.coeffs < 0):
            raise ValueError("coefficients must be nonnegative")

    @classmethod
    def exponential(cls, shift: float) -> "PiecewiseExp":
        """Normalized density of ``shift + Exp(1)``."""
        return cls([shift], [np.exp(shift)])

    def segment_masses(self) -> np.ndarray:
        upper = np.append(np.exp(-self.knots[1:]), 0.0)
        return self.coeffs * (np.exp(-self.knots) - upper)

    def total_mass(self) -> float:
        return float(self.segment_masses().sum())

    def density(self, x: float) -> float:
        if x < self.knots[0]:
            return 0.0
        j = int(np.searchsorted(self.knots, x, side="right")) - 1
        return float(self.coeffs[j] * np.exp(-x))

    def _coeffs_on(self, grid: np.ndarray) -> np.ndarray:
        """Coefficients of this density on a refined knot grid."""
        idx = np.searchsorted(self.knots, grid, side="right") - 1
        return np.where(idx >= 0, self.coeffs[np.clip(idx, 0, None)], 0.0)

    @staticmethod
    def _union_grid(parts: list["PiecewiseExp"]) -> np.ndarray:
        return np.unique(np.concatenate([p.knots for p in parts]))

    @classmethod
    def mixture(cls, parts: list["PiecewiseExp"], weights=None) -> "PiecewiseExp":
        if not parts:
            raise ValueError("empty mixture")
        w = np.full(len(parts), 1.0 / len(parts)) if weights is None else np.asarray(weights, float)
        grid = cls._union_grid(parts)
        coeffs = np.zeros_like(grid)
        for wi, p in zip(w, parts):
            coeffs += wi * p._coeffs_on(grid)
        return cls(grid, coeffs)

    def residual_against(self, mu: "PiecewiseExp", nubar: "PiecewiseExp", m: int) -> "PiecewiseExp":
        """Unnormalized residual ``self * (1 - min(1, mu/(m*nubar)))``.

        The ratio ``mu/(m*nubar)`` is constant on each segment of the union
        grid, so the result stays in the family; segments where ``nubar``
        vanishes contribute nothing (the integrand convention for mass-less
        regions of the barycenter).
        """
        grid = self._union_grid([self, mu, nubar])
        c_self = self._coeffs_on(grid)
        c_mu = mu._coeffs_on(grid)
        c_bar = m * nubar._coeffs_on(grid)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(c_bar > 0, c_mu / c_bar, np.inf)
        keep = np.clip(1.0 - np.minimum(1.0, ratio), 0.0, None)
        return PiecewiseExp(grid, c_self * keep)

    def normalized(self) -> "PiecewiseExp":
        z = self.total_mass()
        if z <= 0:
            raise ValueError("cannot normalize a zero-mass density")
        return PiecewiseExp(self.knots, self.coeffs / z)

    def sample(self, rng: np.random.Generator) -> float:
        """Draw from the normalized density: pick a segment by mass, then
        invert the truncated-exponential cdf inside it."""
        masses = self.segment_masses()
        total = masses.sum()
        if total <= 0:
            raise ValueError("cannot sample from a zero-mass density")
        j = int(np.searchsorted(np.cumsum(masses / total), rng.random(), side="right"))
        j = min(j, masses.size - 1)
        a = self.knots[j]
        u = rng.random()
        if j == masses.size - 1:
            ea, eb = np.exp(-a), 0.0
        else:
            ea, eb = np.exp(-a), np.exp(-self.knots[j + 1])
        return float(-np.log(ea - u * (ea - eb)))
