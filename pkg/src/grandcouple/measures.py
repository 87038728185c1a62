"""Probability measures with sampling, log-densities, and divergences.

All measures are immutable after construction and carry no RNG state; every
``sample`` call takes an explicit ``numpy.random.Generator``.  Densities are
taken w.r.t. the canonical dominating measure: counting measure for finite
spaces, Lebesgue for continuous ones.  Points are ``int`` states on finite
spaces and ``float64`` arrays of shape ``(d,)`` on continuous ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr

__all__ = [
    "SampleSpace",
    "Measure",
    "Finite",
    "GaussianDiag",
    "ShiftedExponential",
    "StudentTWalk",
    "Banana",
    "UniformBox",
    "Mixture",
    "barycenter",
    "probs_vector",
    "tv_finite",
    "tv_gaussian_shared_cov",
    "hockey_stick",
    "measure_from_json",
]

_LOG_2PI = math.log(2.0 * math.pi)
_ATOL = 1e-12


@dataclass(frozen=True)
class SampleSpace:
    """Discrete (``n_states``) or continuous (``dim``) sample space."""

    discrete: bool
    size: int  # state count if discrete, dimension if continuous

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("sample space must have size >= 1")


class Measure:
    """Base class; subclasses implement sampling and log-density."""

    space: SampleSpace

    def sample(self, rng: np.random.Generator):
        raise NotImplementedError

    def log_density(self, x) -> float:
        raise NotImplementedError

    # Vectorized hooks used by the Poisson-process scans; the generic
    # fallbacks loop, concrete measures override with array code.
    def sample_many(self, rng: np.random.Generator, n: int):
        if self.space.discrete:
            return np.array([self.sample(rng) for _ in range(n)], dtype=np.int64)
        return np.stack([self.sample(rng) for _ in range(n)])

    def log_density_many(self, xs) -> np.ndarray:
        return np.array([self.log_density(x) for x in xs], dtype=float)

    def _point(self, x) -> np.ndarray:
        p = np.asarray(x, dtype=float).reshape(-1)
        if p.shape[0] != self.space.size:
            raise ValueError(
                f"point has dimension {p.shape[0]}, measure expects {self.space.size}"
            )
        return p

    # 1-D continuous measures may expose a cdf (used by KS tests) and a
    # support interval containing all but ``eps`` of their mass plus interior
    # density breakpoints (used by the quadrature scheme).
    def cdf(self, x: float) -> float:
        raise NotImplementedError(f"{type(self).__name__} has no cdf")

    def support_interval(self, eps: float = 1e-13) -> tuple[float, float]:
        raise NotImplementedError

    def breakpoints(self) -> list[float]:
        return []

    def to_json(self) -> dict:
        raise NotImplementedError


class Finite(Measure):
    """Distribution over states ``0..n-1`` given by a probability vector."""

    def __init__(self, probs):
        p = np.asarray(probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise ValueError("probs must be a nonempty vector")
        if np.any(p < 0):
            raise ValueError("probs must be nonnegative")
        if abs(p.sum() - 1.0) > _ATOL:
            raise ValueError(f"probs must sum to 1 (got {p.sum()!r})")
        self.probs = p
        self.space = SampleSpace(discrete=True, size=p.size)
        self._cum = np.cumsum(p)

    def sample(self, rng):
        return int(np.searchsorted(self._cum, rng.random(), side="right"))

    def sample_many(self, rng, n):
        return np.searchsorted(self._cum, rng.random(n), side="right").astype(np.int64)

    def log_density(self, x):
        s = int(x)
        if not 0 <= s < self.probs.size:
            raise ValueError(f"state {s} outside 0..{self.probs.size - 1}")
        p = self.probs[s]
        return math.log(p) if p > 0 else -math.inf

    def log_density_many(self, xs):
        with np.errstate(divide="ignore"):
            return np.log(self.probs[np.asarray(xs, dtype=np.int64)])

    def to_json(self):
        return {"kind": "finite", "probs": self.probs.tolist()}


class GaussianDiag(Measure):
    """Product Gaussian with mean vector and per-coordinate variances."""

    def __init__(self, mean, var):
        m = np.atleast_1d(np.asarray(mean, dtype=float))
        v = np.broadcast_to(np.asarray(var, dtype=float), m.shape).copy()
        if np.any(v <= 0):
            raise ValueError("all variances must be > 0")
        self.mean = m
        self.var = v
        self.std = np.sqrt(v)
        self.space = SampleSpace(discrete=False, size=m.size)
        self._log_norm = -0.5 * float(np.sum(np.log(2.0 * np.pi * v)))

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(self.mean.size)

    def sample_many(self, rng, n):
        return self.mean + self.std * rng.standard_normal((n, self.mean.size))

    def log_density(self, x):
        p = self._point(x)
        return self._log_norm - 0.5 * float(np.sum((p - self.mean) ** 2 / self.var))

    def log_density_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        return self._log_norm - 0.5 * np.sum((xs - self.mean) ** 2 / self.var, axis=-1)

    def cdf(self, x):
        if self.space.size != 1:
            raise NotImplementedError("cdf only for 1-D Gaussians")
        return float(ndtr((x - self.mean[0]) / self.std[0]))

    def support_interval(self, eps=1e-13):
        r = math.sqrt(-2.0 * math.log(eps)) + 1.0
        return (
            float(np.min(self.mean - r * self.std)),
            float(np.max(self.mean + r * self.std)),
        )

    def to_json(self):
        return {"kind": "gaussian-diag", "mean": self.mean.tolist(), "var": self.var.tolist()}


class ShiftedExponential(Measure):
    """``shift + Exp(1)``: density ``exp(-(x - shift))`` on ``[shift, inf)``."""

    def __init__(self, shift: float):
        self.shift = float(shift)
        self.space = SampleSpace(discrete=False, size=1)

    def sample(self, rng):
        return np.array([self.shift + rng.exponential()])

    def sample_many(self, rng, n):
        return (self.shift + rng.exponential(size=n)).reshape(n, 1)

    def log_density(self, x):
        v = float(self._point(x)[0])
        return self.shift - v if v >= self.shift else -math.inf

    def log_density_many(self, xs):
        v = np.asarray(xs, dtype=float).reshape(-1)
        return np.where(v >= self.shift, self.shift - v, -np.inf)

    def cdf(self, x):
        return -math.expm1(self.shift - x) if x >= self.shift else 0.0

    def support_interval(self, eps=1e-13):
        return (self.shift, self.shift - math.log(eps))

    def breakpoints(self):
        return [self.shift]

    def to_json(self):
        return {"kind": "shifted-exponential", "shift": self.shift}


class StudentTWalk(Measure):
    """Product of independent scaled Student-t coordinates around a center.

    Serves both as a random-walk increment law (df = 2 in the experiments)
    and, with df = 1, as a product-Cauchy target.
    """

    def __init__(self, center, scale: float, df: float = 2.0):
        c = np.atleast_1d(np.asarray(center, dtype=float))
        if scale <= 0 or df <= 0:
            raise ValueError("scale and df must be > 0")
        self.center = c
        self.scale = float(scale)
        self.df = float(df)
        self.space = SampleSpace(discrete=False, size=c.size)
        self._log_norm = float(
            gammaln((self.df + 1) / 2)
            - gammaln(self.df / 2)
            - 0.5 * math.log(self.df * math.pi)
            - math.log(self.scale)
        )

    def sample(self, rng):
        return self.center + self.scale * rng.standard_t(self.df, size=self.center.size)

    def sample_many(self, rng, n):
        return self.center + self.scale * rng.standard_t(self.df, size=(n, self.center.size))

    def _log_pdf_terms(self, z):
        return self._log_norm - 0.5 * (self.df + 1) * np.log1p(z * z / self.df)

    def log_density(self, x):
        z = (self._point(x) - self.center) / self.scale
        return float(np.sum(self._log_pdf_terms(z)))

    def log_density_many(self, xs):
        z = (np.asarray(xs, dtype=float) - self.center) / self.scale
        return np.sum(self._log_pdf_terms(z), axis=-1)

    def cdf(self, x):
        if self.space.size != 1:
            raise NotImplementedError("cdf only for 1-D Student-t")
        from scipy.stats import t as student_t

        return float(student_t.cdf(x, self.df, loc=self.center[0], scale=self.scale))

    def support_interval(self, eps=1e-13):
        # quantile bound via the polynomial tail: P(|T| > z) ~ z^-df
        r = self.scale * (1.0 / eps) ** (1.0 / self.df)
        return (float(np.min(self.center)) - r, float(np.max(self.center)) + r)

    def to_json(self):
        return {
            "kind": "student-t-walk",
            "center": self.center.tolist(),
            "scale": self.scale,
            "df": self.df,
        }


class Banana(Measure):
    """Curved 2-D density: a Gaussian pushed through a quadratic warp.

    ``log pdf = -x1^2/(2 s1^2) - (x2 + b (x1^2 - s1^2))^2 / (2 s2^2) + const``.
    The warp has unit Jacobian, so the normalizer is the Gaussian one and
    exact sampling is available.
    """

    def __init__(self, sigma1: float = 2.0, sigma2: float = 1.0, b: float = 0.05):
        if sigma1 <= 0 or sigma2 <= 0:
            raise ValueError("sigma1 and sigma2 must be > 0")
        self.sigma1 = float(sigma1)
        self.sigma2 = float(sigma2)
        self.b = float(b)
        self.space = SampleSpace(discrete=False, size=2)
        self._log_norm = -math.log(2.0 * math.pi * self.sigma1 * self.sigma2)

    def _warp(self, x1):
        return self.b * (x1 * x1 - self.sigma1 * self.sigma1)

    def sample(self, rng):
        x1 = self.sigma1 * rng.standard_normal()
        z = self.sigma2 * rng.standard_normal()
        return np.array([x1, z - self._warp(x1)])

    def sample_many(self, rng, n):
        g = rng.standard_normal((n, 2))
        x1 = self.sigma1 * g[:, 0]
        return np.column_stack([x1, self.sigma2 * g[:, 1] - self._warp(x1)])

    def log_density(self, x):
        p = self._point(x)
        w = p[1] + self._warp(p[0])
        return self._log_norm - 0.5 * (
            p[0] ** 2 / self.sigma1**2 + w * w / self.sigma2**2
        )

    def log_density_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        w = xs[..., 1] + self._warp(xs[..., 0])
        return self._log_norm - 0.5 * (
            xs[..., 0] ** 2 / self.sigma1**2 + w * w / self.sigma2**2
        )

    def grad_log_density(self, x):
        p = self._point(x)
        w = p[1] + self._warp(p[0])
        g1 = -p[0] / self.sigma1**2 - w * 2.0 * self.b * p[0] / self.sigma2**2
        g2 = -w / self.sigma2**2
        return np.array([g1, g2])

    def hessian_log_density(self, x):
        p = self._point(x)
        w = p[1] + self._warp(p[0])
        h11 = -1.0 / self.sigma1**2 - (2.0 * self.b / self.sigma2**2) * (
            w + 2.0 * self.b * p[0] ** 2
        )
        h12 = -2.0 * self.b * p[0] / self.sigma2**2
        h22 = -1.0 / self.sigma2**2
        return np.array([[h11, h12], [h12, h22]])

    def grad_log_density_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        w = xs[:, 1] + self._warp(xs[:, 0])
        g1 = -xs[:, 0] / self.sigma1**2 - w * 2.0 * self.b * xs[:, 0] / self.sigma2**2
        g2 = -w / self.sigma2**2
        return np.column_stack([g1, g2])

    def hessian_log_density_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        w = xs[:, 1] + self._warp(xs[:, 0])
        out = np.empty((xs.shape[0], 2, 2))
        out[:, 0, 0] = -1.0 / self.sigma1**2 - (2.0 * self.b / self.sigma2**2) * (
            w + 2.0 * self.b * xs[:, 0] ** 2
        )
        out[:, 0, 1] = out[:, 1, 0] = -2.0 * self.b * xs[:, 0] / self.sigma2**2
        out[:, 1, 1] = -1.0 / self.sigma2**2
        return out

    def to_json(self):
        return {"kind": "banana", "sigma1": self.sigma1, "sigma2": self.sigma2, "b": self.b}


class UniformBox(Measure):
    """Uniform law on ``[low, high]^d`` (used to initialize ensembles)."""

    def __init__(self, low: float, high: float, dim: int):
        if not high > low:
            raise ValueError("need high > low")
        self.low = float(low)
        self.high = float(high)
        self.space = SampleSpace(discrete=False, size=int(dim))
        self._log_dens = -self.space.size * math.log(self.high - self.low)

    def sample(self, rng):
        return rng.uniform(self.low, self.high, size=self.space.size)

    def sample_many(self, rng, n):
        return rng.uniform(self.low, self.high, size=(n, self.space.size))

    def log_density(self, x):
        p = self._point(x)
        inside = np.all((p >= self.low) & (p <= self.high))
        return self._log_dens if inside else -math.inf

    def log_density_many(self, xs):
        xs = np.asarray(xs, dtype=float)
        inside = np.all((xs >= self.low) & (xs <= self.high), axis=-1)
        return np.where(inside, self._log_dens, -np.inf)

    def cdf(self, x):
        if self.space.size != 1:
            raise NotImplementedError
        return float(np.clip((x - self.low) / (self.high - self.low), 0.0, 1.0))

    def support_interval(self, eps=1e-13):
        return (self.low, self.high)

    def breakpoints(self):
        return [self.low, self.high]

    def to_json(self):
        return {
            "kind": "uniform-box",
            "low": self.low,
            "high": self.high,
            "dim": self.space.size,
        }


class Mixture(Measure):
    """Weighted mixture of measures sharing one sample space."""

    def __init__(self, components, weights=None):
        if not components:
            raise ValueError("mixture needs at least one component")
        space = components[0].space
        for c in components[1:]:
            if c.space != space:
                raise ValueError("mixture components must share one sample space")
        if weights is None:
            w = np.full(len(components), 1.0 / len(components))
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (len(components),):
                raise ValueError("weights must match component count")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            if abs(w.sum() - 1.0) > _ATOL:
                raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        self.components = tuple(components)
        self.weights = w
        self.space = space
        self._cum = np.cumsum(w)
        with np.errstate(divide="ignore"):
            self._log_w = np.log(w)
        self._gauss_fast = self._gaussian_fast_path()

    def _gaussian_fast_path(self):
        # Shared-variance Gaussian mixtures get a GEMM-based density; this is
        # the hot path of the Poisson scans in high dimension.
        if not all(isinstance(c, GaussianDiag) for c in self.components):
            return None
        var0 = self.components[0].var
        if not all(np.array_equal(c.var, var0) for c in self.components):
            return None
        means = np.stack([c.mean for c in self.components])  # (k, d)
        log_norm = self.components[0]._log_norm
        return means, var0, log_norm

    def sample(self, rng):
        i = int(np.searchsorted(self._cum, rng.random(), side="right"))
        return self.components[i].sample(rng)

    def sample_many(self, rng, n):
        idx = np.searchsorted(self._cum, rng.random(n), side="right")
        if self.space.discrete:
            out = np.empty(n, dtype=np.int64)
        else:
            out = np.empty((n, self.space.size), dtype=float)
        for i, comp in enumerate(self.components):
            sel = idx == i
            k = int(sel.sum())
            if k:
                out[sel] = comp.sample_many(rng, k)
        return out

    def log_density(self, x):
        terms = self._log_w + np.array([c.log_density(x) for c in self.components])
        return float(logsumexp(terms))

    def log_density_many(self, xs):
        if self._gauss_fast is not None and not self.space.discrete:
            means, var, log_norm = self._gauss_fast
            xs = np.asarray(xs, dtype=float)
            xv = xs / var
            sq = (
                np.sum(xs * xv, axis=-1)[:, None]
                - 2.0 * xv @ means.T
                + np.sum(means * means / var, axis=-1)[None, :]
            )
            return logsumexp(self._log_w[None, :] + log_norm - 0.5 * sq, axis=1)
        terms = np.stack([c.log_density_many(xs) for c in self.components])
        return logsumexp(self._log_w[:, None] + terms, axis=0)

    def cdf(self, x):
        return float(np.dot(self.weights, [c.cdf(x) for c in self.components]))

    def support_interval(self, eps=1e-13):
        ivals = [c.support_interval(eps) for c in self.components]
        return (min(lo for lo, _ in ivals), max(hi for _, hi in ivals))

    def breakpoints(self):
        pts: list[float] = []
        for c in self.components:
            pts.extend(c.breakpoints())
        return pts

    def to_json(self):
        return {
            "kind": "mixture",
            "components": [c.to_json() for c in self.components],
            "weights": self.weights.tolist(),
        }


def barycenter(measures, weights=None) -> Measure:
    """Mixture barycenter of a family (uniform weights by default).

    The density ratio of any component against the barycenter is bounded by
    the component count, which is what makes it a universally valid Poisson
    proposal.
    """
    if not measures:
        raise ValueError("barycenter of an empty family")
    return Mixture(list(measures), weights)


def probs_vector(m: Measure) -> np.ndarray:
    """Probability vector of a discrete measure (finite or finite mixture)."""
    if isinstance(m, Finite):
        return m.probs
    if isinstance(m, Mixture) and m.space.discrete:
        return m.weights @ np.stack([probs_vector(c) for c in m.components])
    raise TypeError(f"{type(m).__name__} has no finite probability vector")


def tv_finite(p: Measure, q: Measure) -> float:
    """Total variation ``0.5 * sum |p - q|`` between finite measures."""
    pv, qv = probs_vector(p), probs_vector(q)
    if pv.size != qv.size:
        raise ValueError("state counts differ")
    return 0.5 * float(np.abs(pv - qv).sum())


def tv_gaussian_shared_cov(mean1, mean2, sigma: float, d: int | None = None) -> float:
    """Closed-form TV between two isotropic Gaussians with shared scale."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    m1 = np.atleast_1d(np.asarray(mean1, dtype=float))
    m2 = np.atleast_1d(np.asarray(mean2, dtype=float))
    if d is not None and (m1.size != d or m2.size != d):
        raise ValueError("mean dimension mismatch")
    delta = float(np.linalg.norm(m1 - m2))
    return float(2.0 * ndtr(delta / (2.0 * sigma)) - 1.0)


def _adaptive_simpson(f, a, b, tol, fa=None, fm=None, fb=None, depth=48):
    if fa is None:
        fa = f(a)
    if fb is None:
        fb = f(b)
    m = 0.5 * (a + b)
    if fm is None:
        fm = f(m)
    whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    lm, rm = 0.5 * (a + m), 0.5 * (m + b)
    flm, frm = f(lm), f(rm)
    left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
    right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
    if depth <= 0 or abs(left + right - whole) <= 15.0 * tol:
        return left + right + (left + right - whole) / 15.0
    return _adaptive_simpson(
        f, a, m, tol / 2.0, fa, flm, fm, depth - 1
    ) + _adaptive_simpson(f, m, b, tol / 2.0, fm, frm, fb, depth - 1)


def integrate_1d(f, lo: float, hi: float, breakpoints=(), tol: float = 1e-8) -> float:
    """Adaptive composite Simpson on ``[lo, hi]`` split at interior breakpoints."""
    knots = sorted({lo, hi, *(b for b in breakpoints if lo < b < hi)})
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        total += _adaptive_simpson(f, a, b, tol)
    return total


def hockey_stick(p: Measure, q: Measure, m: float, scheme: str = "auto", n: int = 100_000, rng=None):
    """Hockey-stick divergence ``E_m(p || q) = integral (p - m q)_+``.

    ``scheme`` is one of ``exact-finite``, ``quadrature-1d``, ``monte-carlo``
    or ``auto`` (exact for finite pairs, quadrature for 1-D continuous).
    Monte Carlo returns ``(estimate, standard_error)`` using the importance
    form ``E_{X~p}[(1 - m q(X)/p(X))_+]``; the other schemes return a float.
    """
    if m < 1.0:
        raise ValueError("order m must be >= 1")
    if p.space != q.space:
        raise ValueError("measures live on different spaces")
    if scheme == "auto":
        if p.space.discrete:
            scheme = "exact-finite"
        elif p.space.size == 1:
            scheme = "quadrature-1d"
        else:
            raise ValueError("no automatic scheme for this measure pair")

    if scheme == "exact-finite":
        return float(np.clip(probs_vector(p) - m * probs_vector(q), 0.0, None).sum())

    if scheme == "quadrature-1d":
        if p.space.discrete or p.space.size != 1:
            raise ValueError("quadrature-1d scheme needs 1-D continuous measures")
        lo_p, hi_p = p.support_interval()
        lo_q, hi_q = q.support_interval()
        lo, hi = min(lo_p, lo_q), max(hi_p, hi_q)

        def integrand(x):
            fp = math.exp(p.log_density(np.array([x])))
            fq = math.exp(q.log_density(np.array([x])))
            return max(fp - m * fq, 0.0)

        return integrate_1d(
            integrand, lo, hi, breakpoints=[*p.breakpoints(), *q.breakpoints()]
        )

    if scheme == "monte-carlo":
        if rng is None:
            raise ValueError("monte-carlo scheme needs an rng")
        xs = p.sample_many(rng, n)
        lp = p.log_density_many(xs)
        lq = q.log_density_many(xs)
        with np.errstate(over="ignore"):
            ratio = np.where(np.isneginf(lq), 0.0, m * np.exp(lq - lp))
        vals = np.clip(1.0 - ratio, 0.0, None)
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return est, se

    raise ValueError(f"unknown scheme {scheme!r}")


_KINDS = {
    "finite": lambda d: Finite(d["probs"]),
    "gaussian-diag": lambda d: GaussianDiag(d["mean"], d["var"]),
    "shifted-exponential": lambda d: ShiftedExponential(d["shift"]),
    "student-t-walk": lambda d: StudentTWalk(d["center"], d["scale"], d.get("df", 2.0)),
    "banana": lambda d: Banana(d.get("sigma1", 2.0), d.get("sigma2", 1.0), d.get("b", 0.05)),
    "uniform-box": lambda d: UniformBox(d["low"], d["high"], d["dim"]),
}


def measure_from_json(desc: dict) -> Measure:
    """Build a measure from its JSON description (see docs/config.md)."""
    kind = desc.get("kind")
    if kind == "mixture":
        comps = [measure_from_json(c) for c in desc["components"]]
        return Mixture(comps, desc.get("weights"))
    if kind not in _KINDS:
        raise ValueError(f"unknown measure kind {kind!r}")
    return _KINDS[kind](desc)
