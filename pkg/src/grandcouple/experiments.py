"""Experiment implementations behind the CLI.

Every experiment is deterministic given ``(config, seed)``: each replicate
derives its own stream from ``(seed, experiment-id, cell-id, replicate)``,
so the emitted rows do not depend on the worker count and are byte-identical
at one worker.
"""

from __future__ import annotations

import math
import multiprocessing
import time

import numpy as np

from . import bounds as bounds_mod
from . import diagnostics as diag
from .couplings import greedy_recursive_list, sequence_coupling, star_coupling
from .grand import CoupledKernelSpec, run_until_meet
from .measures import Banana, Finite, GaussianDiag, ShiftedExponential, StudentTWalk, UniformBox
from .mh import RMALA, RWGaussian, RWStudentT, default_rw_scale
from .poisson import runtime_probe, shared_match
from .rng import stream

__all__ = [
    "ExperimentError",
    "run_multimarginal",
    "run_meet",
    "run_runtime",
    "run_diagnose",
    "run_harmonize",
    "sparse_discrete_family",
    "meet_cell_setup",
]


class ExperimentError(ValueError):
    """Invalid experiment configuration."""


def _mean_se(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def _chunks(n: int, pieces: int):
    edges = np.linspace(0, n, pieces + 1, dtype=int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _parallel(worker, tasks, workers: int):
    """Order-preserving map over picklable tasks."""
    if workers <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with multiprocessing.Pool(processes=workers) as pool:
        return pool.map(worker, tasks)


# ---------------------------------------------------------------------------
# multimarginal: estimated E[G] per coupler, with the lower-bound column
# ---------------------------------------------------------------------------

_STATE_COUNT = 60
_SUPPORT_SIZE = 5


def sparse_discrete_family(c: int, seed: int) -> list[Finite]:
    """C sparse distributions on 60 states, each supported on 5 uniformly
    chosen states with flat-Dirichlet weights; resampled until at least two
    measures share a state (otherwise every coupler trivially scores C)."""
    rng = stream(seed, "mm-instance", c)
    while True:
        probs = np.zeros((c, _STATE_COUNT))
        for i in range(c):
            support = rng.choice(_STATE_COUNT, size=_SUPPORT_SIZE, replace=False)
            probs[i, support] = rng.dirichlet(np.ones(_SUPPORT_SIZE))
        occupancy = (probs > 0).sum(axis=0)
        if occupancy.max() >= 2:
            return [Finite(p) for p in probs]


def _mm_marginals(family: str, c: int, seed: int):
    if family == "random-sparse-discrete":
        return sparse_discrete_family(c, seed)
    if family == "shifted-exponential":
        return [ShiftedExponential(float(i)) for i in range(c)]
    if family == "identical-smoke":
        return [Finite(np.full(4, 0.25)) for _ in range(c)]
    raise ExperimentError(f"unknown multimarginal family {family!r}")


def _mm_coupler(name: str, ordering: str):
    if name == "list":
        return lambda ms, rng: greedy_recursive_list(ms, ordering, rng)
    if name == "poisson":
        return lambda ms, rng: shared_match(ms, rng)
    if name == "anchor":
        return lambda ms, rng: star_coupling(ms, "random", rng)
    if name == "sequence":
        return lambda ms, rng: sequence_coupling(ms, rng)
    raise ExperimentError(f"unknown coupler {name!r}")


def _mm_worker(task):
    family, c, coupler_name, ordering, seed, lo, hi = task
    marginals = _mm_marginals(family, c, seed)
    coupler = _mm_coupler(coupler_name, ordering)
    gs = np.empty(hi - lo, dtype=np.int64)
    for rep in range(lo, hi):
        rng = stream(seed, "mm", family, c, coupler_name, rep)
        gs[rep - lo] = coupler(marginals, rng).g
    return gs


def run_multimarginal(config: dict) -> tuple[list[dict], list[str]]:
    family = config.get("family", "shifted-exponential")
    c_list = config.get("c_list", [2, 4, 8, 16, 32])
    couplers = config.get("couplers", ["list", "poisson", "anchor", "sequence"])
    ordering = config.get("list_ordering", "random" if family == "random-sparse-discrete" else "fixed")
    n = int(config["replicates"])
    seed = int(config["seed"])
    workers = int(config.get("workers", 1))

    rows = []
    for c in c_list:
        marginals = _mm_marginals(family, c, seed)
        if family == "shifted-exponential":
            lower = bounds_mod.lower_bound_G(marginals, mode="fixed")
        else:
            mode = "exhaustive" if c <= 8 else "greedy"
            lower = bounds_mod.lower_bound_G(marginals, mode=mode)
        for coupler_name in couplers:
            tasks = [
                (family, c, coupler_name, ordering, seed, lo, hi)
                for lo, hi in _chunks(n, max(1, 3 * workers))
            ]
            gs = np.concatenate(_parallel(_mm_worker, tasks, workers))
            mean, se = _mean_se(gs)
            rows.append(
                {
                    "family": family,
                    "C": c,
                    "coupler": coupler_name,
                    "mean_G": mean,
                    "se": se,
                    "n": n,
                    "lower_bound": lower,
                }
            )
    return rows, ["family", "C", "coupler", "mean_G", "se", "n", "lower_bound"]


# ---------------------------------------------------------------------------
# meet: average grand meeting times over a (method, d, C) grid
# ---------------------------------------------------------------------------


def meet_cell_setup(family: str, d: int, overrides: dict | None = None):
    """Target, initial law, and proposal kernel for one meeting-time cell."""
    overrides = overrides or {}
    scale = float(overrides.get("proposal_scale", default_rw_scale(d)))
    if family == "gaussian":
        target = GaussianDiag(np.zeros(d), np.ones(d))
        pi0 = GaussianDiag(np.ones(d), 16.0 * np.ones(d))
        kernel = RWGaussian(scale)
    elif family == "student-t":
        target = StudentTWalk(np.zeros(d), 1.0, df=float(overrides.get("target_df", 1.0)))
        pi0 = GaussianDiag(np.zeros(d), np.ones(d))
        kernel = RWStudentT(scale, df=float(overrides.get("proposal_df", 2.0)))
    elif family == "banana-rmala":
        if d != 2:
            raise ExperimentError("the banana target is 2-dimensional")
        target = Banana(
            sigma1=float(overrides.get("sigma1", 2.0)),
            sigma2=float(overrides.get("sigma2", 1.0)),
            b=float(overrides.get("b", 0.05)),
        )
        pi0 = UniformBox(-2.0, 2.0, d)
        kernel = RMALA(float(overrides.get("rmala_scale", 0.4)), target)
    else:
        raise ExperimentError(f"unknown meet family {family!r}")
    return target, pi0, kernel


def _meet_worker(task):
    family, method, d, c, variant, max_iter, overrides, seed, lo, hi = task
    target, pi0, kernel = meet_cell_setup(family, d, overrides)
    spec = CoupledKernelSpec(method, target, kernel, mixture_variant=variant)
    taus = []
    for rep in range(lo, hi):
        rng = stream(seed, "meet", family, method, d, c, rep)
        tau, _ = run_until_meet(spec, pi0, c, max_iter=max_iter, rng=rng)
        taus.append(-1 if tau is None else tau)
    return np.asarray(taus, dtype=np.int64)


def run_meet(config: dict) -> tuple[list[dict], list[str]]:
    family = config.get("family", "gaussian")
    d_list = config.get("d_list", [8])
    c_list = config.get("c_list", [2, 4, 8, 16, 32])
    methods = config.get("methods", ["pmc-1step", "pmc-2step", "star-1step", "star-2step"])
    variant = config.get("mixture_variant", "exact-alpha")
    max_iter = int(config.get("max_iter", 100_000))
    n = int(config["replicates"])
    seed = int(config["seed"])
    workers = int(config.get("workers", 1))
    overrides = config.get("overrides", {})

    rows = []
    for d in d_list:
        for c in c_list:
            for method in methods:
                tasks = [
                    (family, method, d, c, variant, max_iter, overrides, seed, lo, hi)
                    for lo, hi in _chunks(n, max(1, 3 * workers))
                ]
                taus = np.concatenate(_parallel(_meet_worker, tasks, workers))
                censored = int((taus < 0).sum())
                mean, se = _mean_se(taus[taus >= 0])
                rows.append(
                    {
                        "family": family,
                        "method": method,
                        "d": d,
                        "C": c,
                        "mean_tau": mean,
                        "se": se,
                        "censor_rate": censored / n,
                        "n": n,
                    }
                )
    return rows, ["family", "method", "d", "C", "mean_tau", "se", "censor_rate", "n"]


# ---------------------------------------------------------------------------
# runtime: shared-process scaling across dimension
# ---------------------------------------------------------------------------


def _runtime_targets(c: int, d: int, seed: int) -> list[GaussianDiag]:
    rng = stream(seed, "runtime-means", d)
    return [GaussianDiag(rng.standard_normal(d), np.ones(d)) for _ in range(c)]


def run_runtime(config: dict) -> tuple[list[dict], list[str]]:
    c = int(config.get("C", 32))
    d_list = config.get("d_list", [2**k for k in range(10)])
    proposals = config.get("proposals", ["mixture", "gaussian"])
    baseline_max_d = int(config.get("baseline_max_d", 8))
    n = int(config["replicates"])
    seed = int(config["seed"])
    timeout_s = float(config.get("timeout_s", 60.0))

    rows = []
    for proposal_name in proposals:
        for d in d_list:
            if proposal_name == "gaussian" and d > baseline_max_d:
                continue
            targets = _runtime_targets(c, d, seed)
            rng = stream(seed, "runtime", proposal_name, d)
            if proposal_name == "mixture":
                proposal = "barycenter"
            elif proposal_name == "gaussian":
                mean = np.mean([t.mean for t in targets], axis=0)
                proposal = GaussianDiag(mean, float(c) * np.ones(d))
            else:
                raise ExperimentError(f"unknown proposal {proposal_name!r}")
            mean_ms, mean_atoms, censored = runtime_probe(targets, proposal, n, rng, timeout_s)
            rows.append(
                {
                    "proposal": proposal_name,
                    "d": d,
                    "C": c,
                    "mean_ms": mean_ms,
                    "mean_atoms_examined": mean_atoms,
                    "censored": censored,
                    "n": n,
                }
            )
    return rows, ["proposal", "d", "C", "mean_ms", "mean_atoms_examined", "censored", "n"]


# ---------------------------------------------------------------------------
# diagnose: tail-based TV bounds and the alpha table
# ---------------------------------------------------------------------------


def _diag_setup(family: str, d: int, overrides: dict):
    if family == "gaussian":
        return meet_cell_setup("gaussian", d, overrides)
    if family == "student-t":
        return meet_cell_setup("student-t", d, overrides)
    raise ExperimentError(f"unknown diagnose family {family!r}")


def run_diagnose(config: dict) -> tuple[list[dict], list[str], list[dict], list[str]]:
    family = config.get("family", "gaussian")
    d = int(config.get("d", 1))
    c_list = config.get("c_list", [2, 8, 16, 32, 64, 128])
    horizon = int(config.get("t_horizon", 100))
    method = config.get("method", "pmc-1step")
    alpha_n = int(config.get("alpha_n", 1_000_000))
    max_iter = int(config.get("max_iter", 100_000))
    n = int(config["replicates"])
    seed = int(config["seed"])
    workers = int(config.get("workers", 1))
    overrides = config.get("overrides", {})

    target, pi0, kernel = _diag_setup(family, d, overrides)
    omega = diag.omega_gaussian(pi0, target) if family == "gaussian" else 0.0

    bound_rows = []
    alpha_rows = []
    for c in c_list:
        tasks = [
            (family, method, d, c, "exact-alpha", max_iter, overrides, seed, lo, hi)
            for lo, hi in _chunks(n, max(1, 3 * workers))
        ]
        taus = np.concatenate(_parallel(_meet_worker, tasks, workers))
        taus = np.where(taus < 0, max_iter + 1, taus)  # censored counted in the tail
        t_grid = np.arange(horizon + 1)
        tail = np.array([(taus > t).mean() for t in t_grid])
        alpha, alpha_se = diag.estimate_alpha_C(
            pi0, target, c, alpha_n, stream(seed, "alpha", family, d, c)
        )
        denom = diag.johnson_denominator(omega, c) if omega > 0 else math.nan
        johnson = diag.johnson_bound(tail, omega, c)
        listlevel = diag.list_level_bound(tail, alpha)
        alpha_rows.append(
            {
                "family": family,
                "d": d,
                "C": c,
                "one_minus_alpha": 1.0 - alpha,
                "alpha_se": alpha_se,
                "johnson_denominator": "vacuous" if omega == 0.0 else denom,
            }
        )
        for i, t in enumerate(t_grid):
            combined = listlevel[i] if johnson is None else min(johnson[i], listlevel[i])
            bound_rows.append(
                {
                    "family": family,
                    "d": d,
                    "C": c,
                    "t": int(t),
                    "tail": tail[i],
                    "johnson": "vacuous" if johnson is None else johnson[i],
                    "listlevel": listlevel[i],
                    "combined": combined,
                }
            )
    return (
        bound_rows,
        ["family", "d", "C", "t", "tail", "johnson", "listlevel", "combined"],
        alpha_rows,
        ["family", "d", "C", "one_minus_alpha", "alpha_se", "johnson_denominator"],
    )


# ---------------------------------------------------------------------------
# harmonize: group-wise coupled weight propagation on the AR(1) kernel
# ---------------------------------------------------------------------------


def run_harmonize(config: dict) -> tuple[list[dict], list[str]]:
    n_chains = int(config.get("N", 1000))
    m = int(config.get("m", 4))
    rho = float(config.get("rho", 0.9))
    d = int(config.get("d", 20))
    horizon = int(config.get("t_horizon", 60))
    seed = int(config["seed"])
    if n_chains % m != 0:
        raise ExperimentError("N must be divisible by m")

    rng = stream(seed, "harmonize")
    pi = GaussianDiag(np.zeros(d), np.ones(d))
    pi0 = diag.ar_marginal(0, rho, d)
    states = pi0.sample_many(rng, n_chains)
    log_w = pi.log_density_many(states) - pi0.log_density_many(states)
    weights = np.exp(log_w - log_w.max())  # common factor drops in both readouts
    ensemble = diag.WeightedEnsemble.initial(states, weights, m)

    def coupler(group_states, grng):
        kernels = [GaussianDiag(rho * x, (1.0 - rho * rho) * np.ones(d)) for x in group_states]
        return np.stack(shared_match(kernels, grng).values)

    rows = []
    for t in range(horizon + 1):
        closed = diag.hellinger_sq_gaussian(diag.ar_marginal(t, rho, d), pi)
        rows.append(
            {
                "t": t,
                "weight_hellinger_sq": diag.weights_to_uniform_hellinger_sq(ensemble.weights),
                "closed_form_hsq": closed,
                "total_weight": float(ensemble.weights.sum()),
            }
        )
        if t < horizon:
            ensemble = diag.harmonize_step(ensemble, coupler, rng)
    return rows, ["t", "weight_hellinger_sq", "closed_form_hsq", "total_weight"]
