"""Shared marked Poisson processes and Poisson Monte Carlo sampling.

A marked process carries unit-rate arrival times and i.i.d. marks from a base
measure.  Exact sampling from a target absolutely continuous w.r.t. the base
scans atoms in order, minimizing ``S_j / (dP/dmu)(X_j)``, and stops once the
running minimum drops below ``S_j * w_min`` for a valid lower bound
``w_min <= inf dmu/dP``.  Running several targets over the SAME atoms couples
them: targets that select the same atom receive bitwise-equal values.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .couplings import CouplingDraw, make_draw
from .measures import GaussianDiag, Measure, barycenter
from .rng import substream

__all__ = [
    "InvalidBoundError",
    "MarkedPoissonProcess",
    "PfrSelection",
    "pfr_sample",
    "pfr_scan",
    "shared_match",
    "single_gaussian_w_min",
    "runtime_probe",
]

_MAX_CHUNK = 1 << 16


class InvalidBoundError(RuntimeError):
    """An atom violated the claimed density-ratio bound ``1 / w_min``."""


class MarkedPoissonProcess:
    """Lazily extended sequence of ``(arrival, mark)`` atoms.

    Atoms are append-only and owned by a dedicated stream, so a process can
    be shared by any number of sequential selection scans within one trial.
    ``base`` may be a Measure or any object with ``sample_many(rng, n)``
    returning an array (rows = atoms) or a tuple of aligned arrays.
    """

    def __init__(self, base, rng: np.random.Generator):
        self.base = base
        self.stream = rng
        self.arrivals = np.empty(0, dtype=float)
        self._marks = None

    def __len__(self) -> int:
        return self.arrivals.size

    def extend_to(self, j: int) -> None:
        """Materialize atoms up to count ``j``; existing atoms never change."""
        need = int(j) - len(self)
        if need <= 0:
            return
        incr = self.stream.exponential(size=need)
        last = self.arrivals[-1] if len(self) else 0.0
        self.arrivals = np.concatenate([self.arrivals, last + np.cumsum(incr)])
        new = self.base.sample_many(self.stream, need)
        if self._marks is None:
            self._marks = new
        elif isinstance(new, tuple):
            self._marks = tuple(
                np.concatenate([old, fresh]) for old, fresh in zip(self._marks, new)
            )
        else:
            self._marks = np.concatenate([self._marks, new])

    def marks_slice(self, a: int, b: int):
        if isinstance(self._marks, tuple):
            return tuple(col[a:b] for col in self._marks)
        return self._marks[a:b]

    def mark_at(self, i: int):
        if isinstance(self._marks, tuple):
            return tuple(np.copy(col[i]) for col in self._marks)
        value = self._marks[i]
        if np.ndim(value) == 0:
            return int(value) if np.issubdtype(self._marks.dtype, np.integer) else float(value)
        return np.array(value, copy=True)


@dataclass
class PfrSelection:
    """Outcome of one selection scan."""

    atom_index: int  # 0-based position of the selected atom
    point: object
    score: float  # S_J / ratio(X_J), the realized minimum
    atoms_examined: int


def pfr_scan(
    proc: MarkedPoissonProcess,
    log_ratio_fn,
    w_min: float,
    start_chunk: int = 64,
    deadline: float | None = None,
) -> PfrSelection:
    """Core selection scan.  ``log_ratio_fn(a, b)`` returns ``log dP/dmu`` for
    atoms ``a..b``; the scan raises if any examined atom violates the bound."""
    if not 0.0 < w_min <= 1.0:
        raise ValueError("w_min must lie in (0, 1]")
    log_bound = -math.log(w_min) + 1e-9
    j0 = 0
    chunk = start_chunk
    s_star = math.inf
    j_star = -1
    while True:
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutError("selection scan exceeded its deadline")
        j1 = j0 + chunk
        proc.extend_to(j1)
        arrivals = proc.arrivals[j0:j1]
        log_ratio = np.asarray(log_ratio_fn(j0, j1), dtype=float)
        if np.any(log_ratio > log_bound):
            raise InvalidBoundError(
                "density ratio exceeds 1/w_min; the supplied bound is invalid"
            )
        with np.errstate(over="ignore"):
            scores = arrivals * np.exp(-log_ratio)
        running = np.minimum(np.minimum.accumulate(scores), s_star)
        stop = running <= arrivals * w_min
        if stop.any():
            t = int(np.argmax(stop))
            local = int(np.argmin(scores[: t + 1]))
            if scores[local] < s_star:
                s_star = float(scores[local])
                j_star = j0 + local
            return PfrSelection(
                atom_index=j_star,
                point=proc.mark_at(j_star),
                score=s_star,
                atoms_examined=j0 + t + 1,
            )
        local = int(np.argmin(scores))
        if scores[local] < s_star:
            s_star = float(scores[local])
            j_star = j0 + local
        j0 = j1
        chunk = min(chunk * 2, _MAX_CHUNK)


def pfr_sample(
    proc: MarkedPoissonProcess,
    target: Measure,
    w_min: float,
    deadline: float | None = None,
) -> PfrSelection:
    """Exact draw from ``target`` using the process atoms (base as proposal)."""

    def log_ratio(a, b):
        marks = proc.marks_slice(a, b)
        return target.log_density_many(marks) - proc.base.log_density_many(marks)

    return pfr_scan(proc, log_ratio, w_min, deadline=deadline)


def shared_match(
    targets: list[Measure],
    rng: np.random.Generator,
    return_selections: bool = False,
):
    """Couple ``C`` targets through one shared process with the mixture
    barycenter proposal (density ratios bounded by ``C``, so ``w_min = 1/C``).

    Targets selecting the same atom receive bitwise-equal values.
    """
    c = len(targets)
    if c == 0:
        raise ValueError("no targets")
    mu = barycenter(targets)
    proc = MarkedPoissonProcess(mu, substream(rng))
    log_mu_cache = np.empty(0, dtype=float)

    def cached_log_mu(a, b):
        nonlocal log_mu_cache
        if b > log_mu_cache.size:
            fresh = mu.log_density_many(proc.marks_slice(log_mu_cache.size, b))
            log_mu_cache = np.concatenate([log_mu_cache, fresh])
        return log_mu_cache[a:b]

    selections = []
    for target in targets:

        def log_ratio(a, b, target=target):
            return target.log_density_many(proc.marks_slice(a, b)) - cached_log_mu(a, b)

        selections.append(pfr_scan(proc, log_ratio, 1.0 / c, start_chunk=max(2 * c, 16)))
    draw = make_draw([sel.point for sel in selections])
    if return_selections:
        return draw, selections
    return draw


def single_gaussian_w_min(target: GaussianDiag, proposal: GaussianDiag) -> float:
    """Closed-form ``w_min = 1 / sup dP/dmu`` for diagonal Gaussians with the
    proposal at least as wide as the target in every coordinate."""
    vt, vp = target.var, proposal.var
    if np.any(vp < vt):
        raise InvalidBoundError("proposal must dominate the target coordinatewise")
    delta = target.mean - proposal.mean
    log_sup = 0.5 * float(np.sum(np.log(vp / vt)))
    gap = vp - vt
    tight = gap <= 0
    if np.any(tight & (np.abs(delta) > 0)):
        raise InvalidBoundError("equal variances with shifted means: ratio unbounded")
    log_sup += float(np.sum(np.where(tight, 0.0, delta**2 / (2.0 * np.where(tight, 1.0, gap)))))
    return math.exp(-log_sup)


def runtime_probe(
    targets: list[Measure],
    proposal: str | GaussianDiag,
    n_reps: int,
    rng: np.random.Generator,
    timeout_s: float = 60.0,
):
    """Average wall time (ms) and atoms examined per target over replicates.

    ``proposal`` is ``"barycenter"`` (one shared process per replicate) or a
    ``GaussianDiag`` used as a naive common proposal with per-target scans.
    Replicates exceeding ``timeout_s`` are recorded as censored.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    times_ms: list[float] = []
    atoms: list[float] = []
    censored = 0
    for _ in range(n_reps):
        t0 = time.monotonic()
        deadline = t0 + timeout_s
        try:
            if proposal == "barycenter":
                _, sels = shared_match(targets, rng, return_selections=True)
                counts = [s.atoms_examined for s in sels]
            else:
                w_mins = [single_gaussian_w_min(t, proposal) for t in targets]
                counts = []
                for target, w_min in zip(targets, w_mins):
                    proc = MarkedPoissonProcess(proposal, substream(rng))
                    sel = pfr_sample(proc, target, w_min, deadline=deadline)
                    counts.append(sel.atoms_examined)
        except TimeoutError:
            censored += 1
            continue
        times_ms.append(1e3 * (time.monotonic() - t0))
        atoms.append(float(np.mean(counts)))
    mean_ms = float(np.mean(times_ms)) if times_ms else math.nan
    mean_atoms = float(np.mean(atoms)) if atoms else math.nan
    return mean_ms, mean_atoms, censored
