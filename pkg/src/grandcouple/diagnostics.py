"""Coupling-based convergence diagnostics and weight harmonization.

Two upper bounds on ``||pi_t - pi||_TV`` are built from the grand meeting
time tail: a multiplicative one that needs the domination coefficient
``omega = sup{a : pi0 >= a pi}``, and an additive one built from an
achievable initial list-inclusion probability ``alpha_C``.  Weight
harmonization propagates importance weights by averaging them inside
coalesced clusters of group-wise coupled chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import GaussianDiag, Measure

__all__ = [
    "BoundCurve",
    "WeightedEnsemble",
    "omega_gaussian",
    "johnson_bound",
    "estimate_alpha_C",
    "list_level_bound",
    "combined_bound_curve",
    "hellinger_sq_gaussian",
    "weights_to_uniform_hellinger_sq",
    "ar_kernel_step",
    "ar_marginal",
    "harmonize_step",
]


@dataclass
class BoundCurve:
    """Meeting-tail estimates with the derived diagnostic bound series."""

    t_grid: np.ndarray
    tail: np.ndarray
    johnson: np.ndarray | None = None  # None when the bound is vacuous
    listlevel: np.ndarray | None = None

    def __post_init__(self):
        if np.any(np.diff(self.tail) > 1e-12):
            raise ValueError("tail must be nonincreasing in t")

    @property
    def combined(self) -> np.ndarray:
        series = [s for s in (self.johnson, self.listlevel) if s is not None]
        if not series:
            raise ValueError("no bound series present")
        return np.minimum.reduce(series)


@dataclass
class WeightedEnsemble:
    """N chain states with positive weights, partitioned into groups."""

    states: np.ndarray  # (N, d)
    weights: np.ndarray  # (N,)
    grouping: np.ndarray  # (L, m) chain indices

    @classmethod
    def initial(cls, states, weights, m: int):
        states = np.asarray(states, dtype=float)
        weights = np.asarray(weights, dtype=float)
        n = states.shape[0]
        if np.any(weights <= 0):
            raise ValueError("weights must be > 0")
        if n % m != 0:
            raise ValueError("chain count must be divisible by the group size")
        return cls(states=states, weights=weights, grouping=np.arange(n).reshape(n // m, m))


def omega_gaussian(pi0: GaussianDiag, pi: GaussianDiag) -> float:
    """Domination coefficient ``sup{a in [0,1] : pi0 >= a pi}`` for diagonal
    Gaussians: the product over coordinates of the per-coordinate density
    ratio infimum; 0 as soon as one coordinate of pi0 is narrower than pi."""
    if not isinstance(pi0, GaussianDiag) or not isinstance(pi, GaussianDiag):
        raise TypeError("omega_gaussian needs diagonal Gaussians")
    if pi0.space != pi.space:
        raise ValueError("dimension mismatch")
    log_omega = 0.0
    for m0, v0, m1, v1 in zip(pi0.mean, pi0.var, pi.mean, pi.var):
        if v0 < v1 or (v0 == v1 and m0 != m1):
            return 0.0
        if v0 == v1:
            continue
        # minimize (x-m1)^2/(2 v1) - (x-m0)^2/(2 v0); convex since v1 < v0
        x_star = (m1 / v1 - m0 / v0) / (1.0 / v1 - 1.0 / v0)
        g = (x_star - m1) ** 2 / (2.0 * v1) - (x_star - m0) ** 2 / (2.0 * v0)
        log_omega += 0.5 * math.log(v1 / v0) + g
    return math.exp(log_omega)


def johnson_denominator(omega: float, c: int) -> float:
    return 1.0 - (1.0 - omega) ** c


def johnson_bound(tail: np.ndarray, omega: float, c: int) -> np.ndarray | None:
    """Tail / (1 - (1-omega)^C); ``None`` when omega = 0 (vacuous)."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    if omega == 0.0:
        return None
    return np.asarray(tail, dtype=float) / johnson_denominator(omega, c)


def estimate_alpha_C(pi0: Measure, pi: Measure, c: int, n: int, rng) -> tuple[float, float]:
    """Monte Carlo estimate of the achievable initial inclusion probability
    ``E_{X~pi0}[C pi(X) / (C pi0(X) + pi(X))]`` with its standard error."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = pi0.sample_many(rng, n)
    log_ratio = pi0.log_density_many(xs) - pi.log_density_many(xs)
    with np.errstate(over="ignore"):
        vals = c / (c * np.exp(log_ratio) + 1.0)
    vals = np.where(np.isneginf(log_ratio), 1.0, vals)
    est = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return est, se


def list_level_bound(tail: np.ndarray, alpha_c: float) -> np.ndarray:
    """Additive bound ``1 - alpha_C + tail``."""
    if not 0.0 <= alpha_c <= 1.0:
        raise ValueError("alpha_C must lie in [0, 1]")
    return (1.0 - alpha_c) + np.asarray(tail, dtype=float)


def combined_bound_curve(t_grid, tail, omega, alpha_c, c) -> BoundCurve:
    tail = np.asarray(tail, dtype=float)
    return BoundCurve(
        t_grid=np.asarray(t_grid),
        tail=tail,
        johnson=johnson_bound(tail, omega, c),
        listlevel=list_level_bound(tail, alpha_c),
    )


def hellinger_sq_gaussian(p: GaussianDiag, q: GaussianDiag) -> float:
    """Squared Hellinger distance between diagonal Gaussians (product form)."""
    if p.space != q.space:
        raise ValueError("dimension mismatch")
    log_bc = 0.0
    for m1, v1, m2, v2 in zip(p.mean, p.var, q.mean, q.var):
        s = v1 + v2
        log_bc += 0.25 * math.log(4.0 * v1 * v2 / (s * s)) - (m1 - m2) ** 2 / (4.0 * s)
    return 1.0 - math.exp(log_bc)


def weights_to_uniform_hellinger_sq(weights: np.ndarray) -> float:
    """Squared Hellinger distance between the normalized weights and the
    uniform vector: ``1 - sum sqrt(w_i / W) / sqrt(N)``."""
    w = np.asarray(weights, dtype=float)
    p = w / w.sum()
    return float(1.0 - np.sqrt(p).sum() / math.sqrt(p.size))


def ar_kernel_step(x: np.ndarray, rho: float, rng) -> np.ndarray:
    """One autoregressive step ``N(rho x, (1 - rho^2) I)``."""
    if not abs(rho) < 1.0:
        raise ValueError("need |rho| < 1")
    x = np.asarray(x, dtype=float)
    return rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(x.shape)


def ar_marginal(t: int, rho: float, d: int) -> GaussianDiag:
    """Closed-form law at time t of the AR(1) chain started from
    ``N(10 * 1_d, 5 I_d)``: mean ``rho^t 10``, variance ``1 + 4 rho^(2t)``."""
    if not abs(rho) < 1.0:
        raise ValueError("need |rho| < 1")
    mean = np.full(d, 10.0 * rho**t)
    var = np.full(d, 1.0 + 4.0 * rho ** (2 * t))
    return GaussianDiag(mean, var)


def _cluster_labels(states: np.ndarray) -> np.ndarray:
    seen: dict[bytes, int] = {}
    labels = np.empty(states.shape[0], dtype=np.int64)
    for i in range(states.shape[0]):
        labels[i] = seen.setdefault(states[i].tobytes(), len(seen))
    return labels


def harmonize_step(we: WeightedEnsemble, coupler, rng) -> WeightedEnsemble:
    """One weight-harmonization sweep.

    Per group: apply the grand coupling ``coupler(states, rng) -> states`` to
    the member states, find coalesced clusters (bitwise equality), and give
    every member of a cluster of size >= 2 the cluster's mean weight.  Groups
    that produced at least one coalescence are reshuffled together for the
    next sweep when there are two or more of them; otherwise the grouping is
    kept.  Total weight is conserved exactly up to the averaging arithmetic.
    """
    n, m = we.states.shape[0], we.grouping.shape[1]
    new_states = we.states.copy()
    new_weights = we.weights.copy()
    touched: list[int] = []
    for g, members in enumerate(we.grouping):
        updated = coupler(we.states[members], rng)
        new_states[members] = updated
        labels = _cluster_labels(updated)
        coalesced = False
        for lab in range(labels.max() + 1):
            cluster = members[labels == lab]
            if cluster.size >= 2:
                new_weights[cluster] = we.weights[cluster].mean()
                coalesced = True
        if coalesced:
            touched.append(g)
    grouping = we.grouping
    if len(touched) >= 2:
        grouping = grouping.copy()
        pool = grouping[touched].reshape(-1)
        grouping[touched] = rng.permutation(pool).reshape(len(touched), m)
    return WeightedEnsemble(states=new_states, weights=new_weights, grouping=grouping)
