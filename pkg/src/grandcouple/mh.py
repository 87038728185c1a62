"""Metropolis-Hastings kernels, proposal families, and lifted densities.

The lifted law of one MH transition is the joint density of the proposal and
its accept bit, ``k(y|x) * Ber(alpha(x,y))(u)``; pushing it through the exact
select ``u ? y : x`` recovers the MH kernel without ever writing down the
rejection atom.  The select is implemented as a copy, never as arithmetic
blending, so coupled chains that receive the same update stay bitwise equal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measures import Banana, Measure

__all__ = [
    "InvalidStateError",
    "ProposalKernel",
    "RWGaussian",
    "RWStudentT",
    "RMALA",
    "LiftedState",
    "accept_prob",
    "log_accept",
    "mh_step",
    "lifted_log_density",
    "apply_update",
    "rmala_metric",
    "default_rw_scale",
]

_LOG_2PI = math.log(2.0 * math.pi)


class InvalidStateError(ValueError):
    """The chain occupies a state where the target density vanishes."""


def default_rw_scale(d: int) -> float:
    """Classical random-walk scaling heuristic ``2.4 / sqrt(d)``."""
    return 2.4 / math.sqrt(d)


class ProposalKernel:
    symmetric: bool = False

    def propose(self, x: np.ndarray, rng) -> np.ndarray:
        raise NotImplementedError

    def propose_many(self, x: np.ndarray, rng, n: int) -> np.ndarray:
        return np.stack([self.propose(x, rng) for _ in range(n)])

    def log_density(self, x: np.ndarray, y: np.ndarray) -> float:
        """log k(y | x)."""
        raise NotImplementedError

    def log_density_from(self, x: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """log k(y_j | x) for many candidate points."""
        return np.array([self.log_density(x, y) for y in ys])

    def log_density_matrix(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Matrix ``log k(y_j | x_i)`` with rows over conditioning states."""
        return np.stack([self.log_density_from(x, ys) for x in xs])

    def propose_from_states(self, xs: np.ndarray, rng) -> np.ndarray:
        """One proposal per row of ``xs``."""
        return np.stack([self.propose(x, rng) for x in xs])

    def log_density_pairs(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """Aligned rows: ``log k(y_i | x_i)``."""
        return np.array([self.log_density(x, y) for x, y in zip(xs, ys)])


class RWGaussian(ProposalKernel):
    """Symmetric Gaussian random walk ``y = x + scale * N(0, I)``."""

    symmetric = True

    def __init__(self, scale: float):
        if scale <= 0:
            raise ValueError("scale must be > 0")
        self.scale = float(scale)

    def propose(self, x, rng):
        return x + self.scale * rng.standard_normal(x.size)

    def propose_many(self, x, rng, n):
        return x + self.scale * rng.standard_normal((n, x.size))

    def log_density(self, x, y):
        d = x.size
        z = (y - x) / self.scale
        return -0.5 * float(z @ z) - d * (0.5 * _LOG_2PI + math.log(self.scale))

    def log_density_from(self, x, ys):
        d = x.size
        z = (ys - x) / self.scale
        return -0.5 * np.sum(z * z, axis=-1) - d * (0.5 * _LOG_2PI + math.log(self.scale))

    def log_density_matrix(self, xs, ys):
        d = xs.shape[-1]
        sq = (
            np.sum(ys * ys, axis=-1)[None, :]
            - 2.0 * xs @ ys.T
            + np.sum(xs * xs, axis=-1)[:, None]
        )
        return -0.5 * sq / self.scale**2 - d * (0.5 * _LOG_2PI + math.log(self.scale))

    def propose_from_states(self, xs, rng):
        return xs + self.scale * rng.standard_normal(xs.shape)

    def log_density_pairs(self, xs, ys):
        d = xs.shape[-1]
        z = (ys - xs) / self.scale
        return -0.5 * np.sum(z * z, axis=-1) - d * (0.5 * _LOG_2PI + math.log(self.scale))


class RWStudentT(ProposalKernel):
    """Symmetric multivariate Student-t random walk.

    The increment is an elliptical (spherical-shape) t variate: one chi-square
    mixing variable shared across coordinates, so large jumps move all
    coordinates together.  In one dimension this is the usual scaled t walk.
    """

    symmetric = True

    def __init__(self, scale: float, df: float = 2.0):
        if scale <= 0 or df <= 0:
            raise ValueError("scale and df must be > 0")
        self.scale = float(scale)
        self.df = float(df)

    def _log_norm(self, d: int) -> float:
        from scipy.special import gammaln

        return float(
            gammaln((self.df + d) / 2)
            - gammaln(self.df / 2)
            - 0.5 * d * math.log(self.df * math.pi)
            - d * math.log(self.scale)
        )

    def propose(self, x, rng):
        return self.propose_from_states(x[None, :], rng)[0]

    def propose_many(self, x, rng, n):
        z = rng.standard_normal((n, x.size))
        g = rng.chisquare(self.df, size=n)
        return x + self.scale * z * np.sqrt(self.df / g)[:, None]

    def propose_from_states(self, xs, rng):
        z = rng.standard_normal(xs.shape)
        g = rng.chisquare(self.df, size=xs.shape[0])
        return xs + self.scale * z * np.sqrt(self.df / g)[:, None]

    def _log_pdf_sq(self, sq, d: int):
        return self._log_norm(d) - 0.5 * (self.df + d) * np.log1p(
            sq / (self.scale**2 * self.df)
        )

    def log_density(self, x, y):
        z = y - x
        return float(self._log_pdf_sq(z @ z, x.size))

    def log_density_from(self, x, ys):
        z = ys - x
        return self._log_pdf_sq(np.sum(z * z, axis=-1), x.size)

    def log_density_matrix(self, xs, ys):
        d = xs.shape[-1]
        sq = (
            np.sum(ys * ys, axis=-1)[None, :]
            - 2.0 * xs @ ys.T
            + np.sum(xs * xs, axis=-1)[:, None]
        )
        return self._log_pdf_sq(np.maximum(sq, 0.0), d)

    def log_density_pairs(self, xs, ys):
        z = ys - xs
        return self._log_pdf_sq(np.sum(z * z, axis=-1), xs.shape[-1])


def _softabs_metric(hess: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalue floor |lambda| >= floor applied to ``G = -hess`` (batched).

    Returns ``(g_inv, log_det_g)`` for stacked symmetric matrices.  The
    target's Hessian can be indefinite away from the mode; flooring the
    absolute eigenvalues keeps the proposal covariance positive definite
    while preserving the local geometry.
    """
    g = -hess
    w, v = np.linalg.eigh(g)
    w_reg = np.maximum(np.abs(w), floor)
    g_inv = np.einsum("...ij,...j,...kj->...ik", v, 1.0 / w_reg, v)
    return g_inv, np.sum(np.log(w_reg), axis=-1)


class RMALA(ProposalKernel):
    """Langevin proposal preconditioned by the local curvature of the target:
    ``y ~ N(x + (scale^2/2) G(x)^-1 grad, scale^2 G(x)^-1)`` with
    ``G = -hessian(log pi)`` floored to stay positive definite."""

    symmetric = False

    def __init__(self, scale: float, target: Measure, eig_floor: float = 1e-3):
        if scale <= 0:
            raise ValueError("scale must be > 0")
        if not hasattr(target, "grad_log_density"):
            raise TypeError("RMALA needs a target with analytic gradient and Hessian")
        self.scale = float(scale)
        self.target = target
        self.eig_floor = float(eig_floor)

    def _prep(self, xs: np.ndarray):
        """Batched drift means, precisions, and log-det of the proposal
        covariance at conditioning states ``xs`` of shape (k, d)."""
        if hasattr(self.target, "grad_log_density_many"):
            grads = self.target.grad_log_density_many(xs)
            hess = self.target.hessian_log_density_many(xs)
        else:
            grads = np.stack([self.target.grad_log_density(x) for x in xs])
            hess = np.stack([self.target.hessian_log_density(x) for x in xs])
        if not np.all(np.isfinite(hess)):
            raise InvalidStateError("non-finite Hessian entries")
        g_inv, log_det_g = _softabs_metric(hess, self.eig_floor)
        d = xs.shape[-1]
        means = xs + 0.5 * self.scale**2 * np.einsum("...ij,...j->...i", g_inv, grads)
        # covariance = scale^2 * g_inv; precision = g / scale^2
        log_det_cov = d * 2.0 * math.log(self.scale) - log_det_g
        prec = np.linalg.inv(g_inv) / self.scale**2
        return means, prec, log_det_cov, g_inv

    def propose(self, x, rng):
        return self.propose_from_states(x[None, :], rng)[0]

    def log_density(self, x, y):
        return float(self.log_density_matrix(x[None, :], y[None, :])[0, 0])

    def log_density_from(self, x, ys):
        return self.log_density_matrix(x[None, :], ys)[0]

    def log_density_matrix(self, xs, ys):
        means, prec, log_det_cov, _ = self._prep(xs)
        d = xs.shape[-1]
        out = np.empty((xs.shape[0], ys.shape[0]))
        for i in range(xs.shape[0]):
            diff = ys - means[i]
            quad = np.einsum("nj,jk,nk->n", diff, prec[i], diff)
            out[i] = -0.5 * (quad + log_det_cov[i] + d * _LOG_2PI)
        return out

    def propose_from_states(self, xs, rng):
        means, _, _, g_inv = self._prep(xs)
        w, v = np.linalg.eigh(g_inv)
        z = rng.standard_normal(xs.shape)
        scaled = np.sqrt(np.maximum(w, 0.0)) * z
        return means + self.scale * np.einsum("...ij,...j->...i", v, scaled)

    def log_density_pairs(self, xs, ys):
        means, prec, log_det_cov, _ = self._prep(xs)
        d = xs.shape[-1]
        diff = ys - means
        quad = np.einsum("ni,nij,nj->n", diff, prec, diff)
        return -0.5 * (quad + log_det_cov + d * _LOG_2PI)


def rmala_metric(target: Measure, x: np.ndarray, scale: float = 0.4, eig_floor: float = 1e-3):
    """Drift mean and a factor ``F`` with ``F F^T = scale^2 G(x)^-1`` for the
    curvature-preconditioned proposal at ``x``."""
    x = np.asarray(x, dtype=float)
    grad = target.grad_log_density(x)
    hess = target.hessian_log_density(x)
    if not np.all(np.isfinite(hess)):
        raise InvalidStateError("non-finite Hessian entries")
    g_inv, _ = _softabs_metric(hess[None, :, :], eig_floor)
    g_inv = g_inv[0]
    mean = x + 0.5 * scale**2 * g_inv @ grad
    w, v = np.linalg.eigh(g_inv)
    factor = scale * v * np.sqrt(np.maximum(w, 0.0))
    return mean, factor


@dataclass
class LiftedState:
    """Current chain state together with its target and proposal kernel."""

    x: np.ndarray
    target: Measure
    proposal: ProposalKernel
    log_pi_x: float = field(default=None)  # cached log target at x

    def __post_init__(self):
        if self.log_pi_x is None:
            self.log_pi_x = self.target.log_density(self.x)
        if not math.isfinite(self.log_pi_x):
            raise InvalidStateError("target log-density must be finite at the state")


def log_accept(x, y, target: Measure, proposal: ProposalKernel, log_pi_x=None, log_pi_y=None) -> float:
    if log_pi_x is None:
        log_pi_x = target.log_density(x)
    if not math.isfinite(log_pi_x):
        raise InvalidStateError("chain occupies a null state of the target")
    if log_pi_y is None:
        log_pi_y = target.log_density(y)
    if log_pi_y == -math.inf:
        return -math.inf
    ratio = log_pi_y - log_pi_x
    if not proposal.symmetric:
        ratio += proposal.log_density(y, x) - proposal.log_density(x, y)
    return min(0.0, ratio)


def accept_prob(x, y, target: Measure, proposal: ProposalKernel) -> float:
    """MH acceptance probability, computed in log space and clamped to [0,1]."""
    return math.exp(log_accept(x, y, target, proposal))


def apply_update(x, y, u: int):
    """Exact select: the proposal if accepted, the bitwise-unchanged state
    otherwise.  Never blends arithmetically."""
    return np.array(y, copy=True) if u else np.array(x, copy=True)


def mh_step(state: LiftedState, rng) -> LiftedState:
    """One MH transition: propose, accept with probability alpha, else stay."""
    y = state.proposal.propose(state.x, rng)
    log_pi_y = state.target.log_density(y)
    la = log_accept(state.x, y, state.target, state.proposal, state.log_pi_x, log_pi_y)
    u = int(math.log(max(rng.random(), 1e-320)) <= la)
    new_x = apply_update(state.x, y, u)
    return LiftedState(
        x=new_x,
        target=state.target,
        proposal=state.proposal,
        log_pi_x=log_pi_y if u else state.log_pi_x,
    )


def lifted_log_density(state: LiftedState, y, u: int) -> float:
    """Log density of the proposal/accept-bit pair ``(y, u)`` at the state."""
    log_k = state.proposal.log_density(state.x, y)
    la = log_accept(state.x, y, state.target, state.proposal, state.log_pi_x)
    if u:
        return log_k + la
    if la == 0.0:
        return -math.inf
    return log_k + math.log(-math.expm1(la))
