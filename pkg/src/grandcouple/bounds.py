"""Bounds on the optimal expected cluster count of a multi-marginal coupling.

The lower bound sums suffix hockey-stick terms over an ordering of the
marginals (optionally maximized over orderings); the upper bound is a closed
form in the pairwise total variations.  For tiny finite instances an exact
linear program over the joint mass function gives the true optimum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .measures import Finite, Measure, Mixture, hockey_stick
from .simplex import simplex_min

__all__ = [
    "TooLargeError",
    "BoundReport",
    "lower_bound_G",
    "upper_bound_G",
    "pml_pairwise_bound",
    "lp_optimal_G",
    "bound_report",
]

_EXHAUSTIVE_MAX_C = 8
_LP_MAX_TUPLES = 1_000_000


class TooLargeError(ValueError):
    """Instance exceeds the guard for an exact computation."""


@dataclass
class BoundReport:
    lower: float
    upper: float
    c: int
    ordering_used: tuple[int, ...] | str
    lp_exact: float | None = None
    estimated: tuple[float, float] | None = None


def _suffix_term_cache(marginals):
    cache: dict = {}

    def term(first: int, rest: frozenset) -> float:
        key = (first, rest)
        if key not in cache:
            suffix = [marginals[j] for j in sorted(rest)]
            nubar = Mixture(suffix)
            cache[key] = hockey_stick(marginals[first], nubar, float(len(suffix)))
        return cache[key]

    return term


def _ordering_sum(order, term) -> float:
    total = 0.0
    remaining = frozenset(order)
    for i in order[:-1]:
        remaining = remaining - {i}
        total += term(i, remaining)
    return total


def lower_bound_G(marginals: list[Measure], mode: str = "greedy", sigma=None) -> float:
    """``1 + sum of suffix hockey-stick terms`` under an ordering.

    ``mode``: ``exhaustive`` maximizes over all orderings (C <= 8 only),
    ``fixed`` uses ``sigma`` (identity if omitted), ``greedy`` picks at each
    step the remaining index with the largest current term.
    """
    c = len(marginals)
    if c == 0:
        raise ValueError("no marginals")
    if c == 1:
        return 1.0
    term = _suffix_term_cache(marginals)

    if mode == "fixed":
        order = list(range(c)) if sigma is None else list(sigma)
        if sorted(order) != list(range(c)):
            raise ValueError("sigma must be a permutation of 0..C-1")
        return 1.0 + _ordering_sum(order, term)

    if mode == "exhaustive":
        if c > _EXHAUSTIVE_MAX_C:
            raise TooLargeError(f"exhaustive ordering search capped at C={_EXHAUSTIVE_MAX_C}")
        best = -math.inf
        for order in itertools.permutations(range(c)):
            best = max(best, _ordering_sum(order, term))
        return 1.0 + best

    if mode == "greedy":
        remaining = set(range(c))
        total = 0.0
        while len(remaining) > 1:
            best_i, best_v = None, -math.inf
            for i in sorted(remaining):
                v = term(i, frozenset(remaining - {i}))
                if v > best_v:
                    best_i, best_v = i, v
            remaining.discard(best_i)
            total += best_v
        return 1.0 + total

    raise ValueError(f"unknown mode {mode!r}")


def upper_bound_G(pairwise_tv: np.ndarray) -> float:
    """Closed-form upper bound from the pairwise mismatch probabilities of a
    shared-process coupling: ``(1 + sqrt(1 + 8 sum 2 tv / (1 + tv))) / 2``."""
    tv = np.asarray(pairwise_tv, dtype=float)
    if tv.ndim != 2 or tv.shape[0] != tv.shape[1]:
        raise ValueError("pairwise_tv must be square")
    if not np.allclose(tv, tv.T, atol=1e-12):
        raise ValueError("pairwise_tv must be symmetric")
    if np.any(np.abs(np.diag(tv)) > 1e-12):
        raise ValueError("diagonal must be zero")
    if np.any((tv < 0) | (tv > 1)):
        raise ValueError("entries must lie in [0, 1]")
    iu = np.triu_indices(tv.shape[0], k=1)
    s = float(np.sum(2.0 * tv[iu] / (1.0 + tv[iu])))
    return 0.5 * (1.0 + math.sqrt(1.0 + 8.0 * s))


def pml_pairwise_bound(tv: float) -> float:
    """Shared-process pairwise match probability bound ``(1-tv)/(1+tv)``."""
    if not 0.0 <= tv <= 1.0:
        raise ValueError("tv must lie in [0, 1]")
    return (1.0 - tv) / (1.0 + tv)


def lp_optimal_G(marginals: list[Finite], tol: float = 1e-9) -> float:
    """Exact optimum of the expected cluster count over all couplings of
    finite marginals, by linear programming over the joint mass function."""
    if not all(isinstance(m, Finite) for m in marginals):
        raise TypeError("lp_optimal_G needs finite marginals")
    c = len(marginals)
    s = marginals[0].probs.size
    for m in marginals:
        if m.probs.size != s:
            raise ValueError("marginals must share one state space")
    n_tuples = s**c
    if n_tuples > _LP_MAX_TUPLES:
        raise TooLargeError(f"{n_tuples} joint tuples exceed the LP guard")

    tuples = list(itertools.product(range(s), repeat=c))
    cost = np.array([len(set(t)) for t in tuples], dtype=float)

    rows = []
    rhs = []
    for i in range(c):
        # One state row per marginal is redundant (each marginal's rows sum
        # to the total mass); drop the last state for every marginal but the
        # first to keep the basis closer to nondegenerate.
        states = range(s) if i == 0 else range(s - 1)
        for state in states:
            row = np.fromiter(((1.0 if t[i] == state else 0.0) for t in tuples), float, n_tuples)
            rows.append(row)
            rhs.append(marginals[i].probs[state])
    value, _ = simplex_min(cost, np.array(rows), np.array(rhs), tol=tol)
    return value


def bound_report(marginals, mode: str = "greedy", with_lp: bool = False) -> BoundReport:
    c = len(marginals)
    lower = lower_bound_G(marginals, mode=mode)
    tv = np.zeros((c, c))
    from .measures import tv_finite

    if all(isinstance(m, Finite) for m in marginals):
        for i in range(c):
            for j in range(i + 1, c):
                tv[i, j] = tv[j, i] = tv_finite(marginals[i], marginals[j])
    else:
        for i in range(c):
            for j in range(i + 1, c):
                tv[i, j] = tv[j, i] = hockey_stick(marginals[i], marginals[j], 1.0)
    upper = upper_bound_G(tv)
    lp = lp_optimal_G(marginals) if with_lp else None
    return BoundReport(lower=lower, upper=upper, c=c, ordering_used=mode, lp_exact=lp)
