"""Grand couplings of C Metropolis-Hastings chains.

Four transition kernels evolve an ensemble so that each chain is marginally
the MH kernel:

* ``pmc-1step``: one shared Poisson process over proposal/accept-bit pairs;
  every equivalence class of equal chains selects its atom by scoring its own
  lifted density against the class-mixture proposal.
* ``pmc-2step``: shared-process selection over proposals only, then one
  shared uniform decides every accept.
* ``star-1step``: each class maximally coupled to a fixed reference class on
  the lifted pair space.
* ``star-2step``: proposal-level maximal coupling to the reference plus a
  shared accept uniform.

Faithfulness is structural: chains with bitwise-equal states form one class
and receive one update, so met chains stay met forever.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .couplings import CouplingError, REJECTION_CAP
from .measures import Measure
from .mh import ProposalKernel
from .poisson import MarkedPoissonProcess

__all__ = [
    "CoupledKernelSpec",
    "ChainEnsemble",
    "make_ensemble",
    "step",
    "step_pmc_1step",
    "step_pmc_2step",
    "step_star_1step",
    "step_star_2step",
    "run_until_meet",
    "estimate_meeting_curve",
]

_METHODS = ("pmc-1step", "pmc-2step", "star-1step", "star-2step")
_TINY = 1e-320  # floor for log(uniform)


@dataclass
class CoupledKernelSpec:
    method: str
    target: Measure
    proposal: ProposalKernel
    reference_index: int = 0
    mixture_variant: str = "exact-alpha"  # or "ber-half"

    def __post_init__(self):
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}")
        if self.mixture_variant not in ("exact-alpha", "ber-half"):
            raise ValueError("mixture_variant must be exact-alpha or ber-half")


@dataclass
class ChainEnsemble:
    """C chain states with their bitwise-equality partition."""

    states: np.ndarray  # (C, d)
    labels: np.ndarray  # (C,) class label per chain, first-occurrence order
    t: int = 0
    met_at: int | None = None

    @property
    def n_chains(self) -> int:
        return self.states.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1


def _partition_labels(states: np.ndarray) -> np.ndarray:
    seen: dict[bytes, int] = {}
    labels = np.empty(states.shape[0], dtype=np.int64)
    for i in range(states.shape[0]):
        labels[i] = seen.setdefault(states[i].tobytes(), len(seen))
    return labels


def make_ensemble(states: np.ndarray, t: int = 0) -> ChainEnsemble:
    states = np.asarray(states, dtype=float)
    labels = _partition_labels(states)
    met = t if int(labels.max()) == 0 else None
    return ChainEnsemble(states=states, labels=labels, t=t, met_at=met)


def _class_reps(ens: ChainEnsemble) -> np.ndarray:
    k = ens.n_classes
    reps = np.empty((k, ens.states.shape[1]))
    seen = np.zeros(k, dtype=bool)
    for i, lab in enumerate(ens.labels):
        if not seen[lab]:
            reps[lab] = ens.states[i]
            seen[lab] = True
    return reps


def _advance(ens: ChainEnsemble, new_reps: np.ndarray) -> ChainEnsemble:
    return _advance_states(ens, new_reps[ens.labels].copy())


def _advance_states(ens: ChainEnsemble, new_states: np.ndarray) -> ChainEnsemble:
    labels = _partition_labels(new_states)
    t = ens.t + 1
    met = ens.met_at
    if met is None and int(labels.max()) == 0:
        met = t
    return ChainEnsemble(states=new_states, labels=labels, t=t, met_at=met)


def _log1mexp(log_a: np.ndarray) -> np.ndarray:
    """log(1 - exp(log_a)) for log_a <= 0, with log_a = 0 -> -inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(-np.expm1(log_a))
    return np.where(log_a >= 0.0, -np.inf, out)


def _log_uniform(rng, n=None):
    if n is None:
        return math.log(max(rng.random(), _TINY))
    return np.log(np.maximum(rng.random(n), _TINY))


def _log_alpha_matrix(reps, log_pi_reps, ys, log_pi_ys, kern):
    """(K, n) matrix of log acceptance probabilities alpha(rep_i, y_j)."""
    ratio = log_pi_ys[None, :] - log_pi_reps[:, None]
    if not kern.symmetric:
        ratio = ratio + kern.log_density_matrix(ys, reps).T - kern.log_density_matrix(reps, ys)
    return np.minimum(0.0, ratio)


def _log_alpha_pairs(states, log_pi_states, ys, log_pi_ys, kern):
    """Aligned rows: log alpha(state_i, y_i)."""
    ratio = log_pi_ys - log_pi_states
    if not kern.symmetric:
        ratio = ratio + kern.log_density_pairs(ys, states) - kern.log_density_pairs(states, ys)
    return np.minimum(0.0, ratio)


class _LiftedBase:
    """Mark law for the joint kernel: the chain mixture over
    proposal/accept-bit pairs, deduplicated to one component per class with
    multiplicity weights, caching target log-densities per mark.

    ``exact-alpha`` draws the bit from the mixture component's own acceptance
    probability; ``ber-half`` draws it fair (ratio bound doubles to 2C).
    """

    def __init__(self, reps, class_weights, log_pi_reps, kern, target, variant):
        self.reps = reps
        self.cum_w = np.cumsum(class_weights)
        self.log_pi_reps = log_pi_reps
        self.kern = kern
        self.target = target
        self.variant = variant
        self.log_pi_marks = np.empty(0)

    def _components(self, rng, n):
        return np.minimum(
            np.searchsorted(self.cum_w, rng.random(n), side="right"),
            self.reps.shape[0] - 1,
        )

    def sample_many(self, rng, n):
        comp = self._components(rng, n)
        states = self.reps[comp]
        ys = self.kern.propose_from_states(states, rng)
        log_pi_ys = self.target.log_density_many(ys)
        if self.variant == "ber-half":
            us = (rng.random(n) < 0.5).astype(np.int8)
        else:
            la = _log_alpha_pairs(states, self.log_pi_reps[comp], ys, log_pi_ys, self.kern)
            us = (_log_uniform(rng, n) <= la).astype(np.int8)
        self.log_pi_marks = np.concatenate([self.log_pi_marks, log_pi_ys])
        return ys, us


class _ProposalBase:
    """Proposal-only marks (two-step kernel), with the same density cache."""

    def __init__(self, reps, class_weights, kern, target):
        self.reps = reps
        self.cum_w = np.cumsum(class_weights)
        self.kern = kern
        self.target = target
        self.log_pi_marks = np.empty(0)

    def sample_many(self, rng, n):
        comp = np.minimum(
            np.searchsorted(self.cum_w, rng.random(n), side="right"),
            self.reps.shape[0] - 1,
        )
        ys = self.kern.propose_from_states(self.reps[comp], rng)
        self.log_pi_marks = np.concatenate(
            [self.log_pi_marks, self.target.log_density_many(ys)]
        )
        return ys


def _scan_all_classes(proc, ratio_fn, w_min, k, start_chunk):
    """Selection scan for all K classes over one shared atom stream.

    ``ratio_fn(a, b) -> (K, n)`` density ratios (linear scale) for atoms
    ``a..b``.  Returns the selected atom index per class.
    """
    bound = (1.0 + 1e-9) / w_min
    sel = np.full(k, -1, dtype=np.int64)
    s_star = np.full(k, np.inf)
    j_star = np.full(k, -1, dtype=np.int64)
    done = np.zeros(k, dtype=bool)
    j0 = 0
    chunk = start_chunk
    while True:
        j1 = j0 + chunk
        proc.extend_to(j1)
        arrivals = proc.arrivals[j0:j1]
        ratio = ratio_fn(j0, j1)
        if np.any(ratio > bound):
            raise CouplingError("lifted density ratio exceeded its mixture bound")
        with np.errstate(divide="ignore", over="ignore"):
            scores = arrivals[None, :] / ratio
        running = np.minimum(np.minimum.accumulate(scores, axis=1), s_star[:, None])
        stop = running <= arrivals[None, :] * w_min
        stopping = stop.any(axis=1) & ~done
        if stopping.any():
            rows = np.nonzero(stopping)[0]
            t = np.argmax(stop[rows], axis=1)
            visible = np.arange(scores.shape[1])[None, :] <= t[:, None]
            masked = np.where(visible, scores[rows], np.inf)
            local = np.argmin(masked, axis=1)
            local_val = masked[np.arange(rows.size), local]
            better = local_val < s_star[rows]
            j_star[rows[better]] = j0 + local[better]
            s_star[rows[better]] = local_val[better]
            sel[rows] = j_star[rows]
            done[rows] = True
        if done.all():
            return sel
        cont = np.nonzero(~done)[0]
        local = np.argmin(scores[cont], axis=1)
        local_val = scores[cont, local]
        better = local_val < s_star[cont]
        j_star[cont[better]] = j0 + local[better]
        s_star[cont[better]] = local_val[better]
        j0 = j1
        chunk = min(chunk * 2, 1 << 14)


def _class_weights(ens: ChainEnsemble) -> np.ndarray:
    counts = np.bincount(ens.labels, minlength=ens.n_classes).astype(float)
    return counts / ens.n_chains


def step_pmc_1step(ens: ChainEnsemble, spec: CoupledKernelSpec, rng) -> ChainEnsemble:
    reps = _class_reps(ens)
    k = reps.shape[0]
    kern, target = spec.proposal, spec.target
    log_pi_reps = target.log_density_many(reps)
    weights = _class_weights(ens)
    base = _LiftedBase(reps, weights, log_pi_reps, kern, target, spec.mixture_variant)
    proc = MarkedPoissonProcess(base, rng)
    exact = spec.mixture_variant == "exact-alpha"
    # dP'_i/dmu <= C because the chain mixture gives class i weight n_i/C.
    w_min = 1.0 / ens.n_chains if exact else 1.0 / (2.0 * ens.n_chains)

    def ratio_fn(a, b):
        # Linear-scale lifted densities, normalized per atom by the peak
        # proposal density so the common scale cancels in the ratio.
        ys, us = proc.marks_slice(a, b)
        log_pi_ys = base.log_pi_marks[a:b]
        log_kmat = kern.log_density_matrix(reps, ys)
        if kern.symmetric:
            alpha = np.exp(np.minimum(0.0, log_pi_ys[None, :] - log_pi_reps[:, None]))
        else:
            alpha = np.exp(_log_alpha_matrix(reps, log_pi_reps, ys, log_pi_ys, kern))
        kmat = np.exp(log_kmat - log_kmat.max(axis=0)[None, :])
        u_row = us.astype(bool)[None, :]
        lift = kmat * np.where(u_row, alpha, 1.0 - alpha)
        mu = (weights @ lift) if exact else 0.5 * (weights @ kmat)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = lift / mu[None, :]
        return np.where(mu[None, :] > 0.0, out, 0.0)

    sel = _scan_all_classes(proc, ratio_fn, w_min, k, start_chunk=4 * k + 16)
    ys_all, us_all = proc.marks_slice(0, int(sel.max()) + 1)
    y_sel = ys_all[sel]
    accept = us_all[sel].astype(bool)
    new_reps = np.where(accept[:, None], y_sel, reps)
    return _advance(ens, new_reps)


def step_pmc_2step(ens: ChainEnsemble, spec: CoupledKernelSpec, rng) -> ChainEnsemble:
    reps = _class_reps(ens)
    k = reps.shape[0]
    kern, target = spec.proposal, spec.target
    log_pi_reps = target.log_density_many(reps)
    weights = _class_weights(ens)
    base = _ProposalBase(reps, weights, kern, target)
    proc = MarkedPoissonProcess(base, rng)

    def ratio_fn(a, b):
        ys = proc.marks_slice(a, b)
        log_kmat = kern.log_density_matrix(reps, ys)
        kmat = np.exp(log_kmat - log_kmat.max(axis=0)[None, :])
        mu = weights @ kmat
        return kmat / mu[None, :]

    sel = _scan_all_classes(proc, ratio_fn, 1.0 / ens.n_chains, k, start_chunk=4 * k + 16)
    proposals = proc.marks_slice(0, int(sel.max()) + 1)[sel]
    log_alpha = _log_alpha_pairs(reps, log_pi_reps, proposals, base.log_pi_marks[sel], kern)
    accept = _log_uniform(rng) <= log_alpha
    new_reps = np.where(accept[:, None], proposals, reps)
    return _advance(ens, new_reps)


def _residual_proposals(pending_reps, rep_r, kern, rng, cap=REJECTION_CAP):
    """Proposal-residual draws against the reference, one per pending class;
    every class iterates until its candidate passes the reverse test."""
    out = np.empty_like(pending_reps)
    idx = np.arange(pending_reps.shape[0])
    for _ in range(cap):
        cands = kern.propose_from_states(pending_reps[idx], rng)
        log_own = kern.log_density_pairs(pending_reps[idx], cands)
        log_ref = kern.log_density_from(rep_r, cands)
        keep = _log_uniform(rng, idx.size) > np.minimum(0.0, log_ref - log_own)
        out[idx[keep]] = cands[keep]
        idx = idx[~keep]
        if idx.size == 0:
            return out
    raise CouplingError("proposal residual rejection loop hit its cap")


def step_star_2step(ens: ChainEnsemble, spec: CoupledKernelSpec, rng) -> ChainEnsemble:
    # Star baselines couple each CHAIN to the fixed reference chain with its
    # own coupling uniform (chains that collide away from the reference may
    # split again); only the shared accept uniform is common to all.
    states = ens.states
    c = states.shape[0]
    kern, target = spec.proposal, spec.target
    log_pi = target.log_density_many(states)
    r = spec.reference_index
    y_r = kern.propose(states[r], rng)
    log_k_to_yr = kern.log_density_matrix(states, y_r[None, :])[:, 0]
    copy = _log_uniform(rng, c) <= np.minimum(0.0, log_k_to_yr - log_k_to_yr[r])
    copy[r] = True
    proposals = np.empty_like(states)
    proposals[copy] = y_r
    if not copy.all():
        proposals[~copy] = _residual_proposals(states[~copy], states[r], kern, rng)
    log_alpha = _log_alpha_pairs(states, log_pi, proposals, target.log_density_many(proposals), kern)
    accept = _log_uniform(rng) <= log_alpha
    new_states = np.where(accept[:, None], proposals, states)
    return _advance_states(ens, new_states)


def _residual_lifted(pending_reps, pending_log_pi, rep_r, log_pi_r, kern, target, rng, cap=REJECTION_CAP):
    """Lifted-pair residual draws against the reference, one per pending
    class: propose from the class, draw its accept bit, keep the pair when it
    fails the reverse lifted-density test."""
    n = pending_reps.shape[0]
    out_y = np.empty_like(pending_reps)
    out_u = np.zeros(n, dtype=np.int8)
    idx = np.arange(n)
    rep_r_row = rep_r[None, :]
    for _ in range(cap):
        states = pending_reps[idx]
        ys = kern.propose_from_states(states, rng)
        log_pi_ys = target.log_density_many(ys)
        la_own = _log_alpha_pairs(states, pending_log_pi[idx], ys, log_pi_ys, kern)
        us = _log_uniform(rng, idx.size) <= la_own
        la_ref = _log_alpha_pairs(
            np.broadcast_to(rep_r_row, ys.shape), np.full(idx.size, log_pi_r), ys, log_pi_ys, kern
        )
        log_num = kern.log_density_from(rep_r, ys) + np.where(us, la_ref, _log1mexp(la_ref))
        log_den = kern.log_density_pairs(states, ys) + np.where(us, la_own, _log1mexp(la_own))
        keep = _log_uniform(rng, idx.size) > np.minimum(0.0, log_num - log_den)
        out_y[idx[keep]] = ys[keep]
        out_u[idx[keep]] = us[keep]
        idx = idx[~keep]
        if idx.size == 0:
            return out_y, out_u
    raise CouplingError("lifted residual rejection loop hit its cap")


def step_star_1step(ens: ChainEnsemble, spec: CoupledKernelSpec, rng) -> ChainEnsemble:
    # Per-chain maximal coupling to the reference on the lifted pair space.
    states = ens.states
    c = states.shape[0]
    kern, target = spec.proposal, spec.target
    log_pi = target.log_density_many(states)
    r = spec.reference_index
    y_r = kern.propose(states[r], rng)
    log_pi_yr = np.array([target.log_density(y_r)])
    la = _log_alpha_matrix(states, log_pi, y_r[None, :], log_pi_yr, kern)[:, 0]
    u_r = bool(_log_uniform(rng) <= la[r])
    log_k_to_yr = kern.log_density_matrix(states, y_r[None, :])[:, 0]
    log_lift = log_k_to_yr + (la if u_r else _log1mexp(la))
    copy = _log_uniform(rng, c) <= np.minimum(0.0, log_lift - log_lift[r])
    copy[r] = True
    ys = np.empty_like(states)
    us = np.empty(c, dtype=bool)
    ys[copy] = y_r
    us[copy] = u_r
    if not copy.all():
        res_y, res_u = _residual_lifted(
            states[~copy], log_pi[~copy], states[r], float(log_pi[r]), kern, target, rng
        )
        ys[~copy] = res_y
        us[~copy] = res_u.astype(bool)
    new_states = np.where(us[:, None], ys, states)
    return _advance_states(ens, new_states)


_STEPPERS = {
    "pmc-1step": step_pmc_1step,
    "pmc-2step": step_pmc_2step,
    "star-1step": step_star_1step,
    "star-2step": step_star_2step,
}


def step(ens: ChainEnsemble, spec: CoupledKernelSpec, rng) -> ChainEnsemble:
    return _STEPPERS[spec.method](ens, spec, rng)


def run_until_meet(
    spec: CoupledKernelSpec,
    pi0: Measure,
    c: int,
    max_iter: int = 100_000,
    rng=None,
    record_trace: bool = False,
):
    """Evolve C chains from i.i.d. ``pi0`` draws until full coalescence.

    Returns ``(tau, trace)`` where ``tau`` is the grand meeting time or
    ``None`` if censored at ``max_iter``; ``trace`` (optional) holds the
    class count after every step.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    states = pi0.sample_many(rng, c)
    ens = make_ensemble(states)
    stepper = _STEPPERS[spec.method]
    trace = [ens.n_classes] if record_trace else None
    while ens.met_at is None and ens.t < max_iter:
        ens = stepper(ens, spec, rng)
        if record_trace:
            trace.append(ens.n_classes)
    return ens.met_at, trace


def estimate_meeting_curve(cells, n_reps: int, seed: int, max_iter: int = 100_000):
    """Sequential replicate driver over grid cells.

    ``cells`` is an iterable of ``(name, spec, pi0, C)``; returns one row per
    cell with mean/SE of tau over uncensored replicates and the censor rate.
    """
    from .rng import stream

    rows = []
    for name, spec, pi0, c in cells:
        taus = []
        censored = 0
        for rep in range(n_reps):
            rng = stream(seed, "meet", name, rep)
            tau, _ = run_until_meet(spec, pi0, c, max_iter=max_iter, rng=rng)
            if tau is None:
                censored += 1
            else:
                taus.append(tau)
        arr = np.asarray(taus, dtype=float)
        mean = float(arr.mean()) if arr.size else math.nan
        se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
        rows.append(
            {
                "cell": name,
                "method": spec.method,
                "C": c,
                "mean_tau": mean,
                "se": se,
                "censor_rate": censored / n_reps,
                "n": n_reps,
            }
        )
    return rows
