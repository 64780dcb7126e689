"""Metropolis sampling of the random effects given the data.

Each component of the stacked random-effect vector is updated in turn with a
proposal drawn from its prior (conditional on the subject's other
components).  Because the proposal is the prior, the prior densities cancel
and the acceptance ratio is the conditional likelihood ratio of y given u.
Only the owning subject's factor changes when one component moves, so the
ratio is evaluated from that single factor.

Components that belong to different subjects do not interact, so the
updates of component ``c`` for all subjects are performed together; this
gives the same transition kernel as visiting them one at a time.  Several
independent chains can be advanced in the same vectorised sweep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .families import Family, LinkSpec, _inverse_link, _log_density, MU_EPS, FamilyKind

SIGMA_FLOOR = 1e-10


@dataclass
class RandomEffectsModel:
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = floor_covariance(np.atleast_2d(np.asarray(self.covariance, dtype=float)))

    @property
    def dimension(self) -> int:
        return self.covariance.shape[0]


@dataclass(frozen=True)
class SamplerConfig:
    """``n_draws`` retained draws split over ``n_chains`` parallel chains.

    ``burn_in`` and ``thinning`` count sweeps of each chain.
    """

    n_draws: int = 500
    burn_in: int = 200
    thinning: int = 1
    n_chains: int = 10
    seed: Optional[int] = None

    def __post_init__(self):
        if self.n_draws < 1 or self.burn_in < 0 or self.thinning < 1 or self.n_chains < 1:
            raise ValueError("need n_draws >= 1, burn_in >= 0, thinning >= 1, n_chains >= 1")

    def layout(self) -> tuple[int, int]:
        """(chains, retained draws per chain)."""
        chains = min(self.n_chains, self.n_draws)
        return chains, -(-self.n_draws // chains)


@dataclass
class DrawBank:
    """Retained draws, shape ``(N, n, q)``."""

    draws: np.ndarray
    burn_in: int = 0
    thinning: int = 1
    seed: Optional[int] = None
    acceptance: Optional[np.ndarray] = None  # per subject
    rejected_nonfinite: int = 0

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def last(self) -> np.ndarray:
        return self.draws[-1]


def floor_covariance(S: np.ndarray, floor: float = SIGMA_FLOOR) -> np.ndarray:
    S = 0.5 * (S + S.T)
    if S.size == 0:
        return S
    w, V = np.linalg.eigh(S)
    if w.min() >= floor:
        return S
    return (V * np.maximum(w, floor)) @ V.T


def conditional_prior(covariance: np.ndarray, c: int) -> tuple[np.ndarray, float]:
    """Regression weights and variance of component c given the others."""
    q = covariance.shape[0]
    rest = [k for k in range(q) if k != c]
    if not rest:
        return np.zeros(0), float(covariance[c, c])
    S_rr = covariance[np.ix_(rest, rest)]
    S_cr = covariance[c, rest]
    coef = np.linalg.solve(S_rr, S_cr)
    return coef, float(covariance[c, c] - S_cr @ coef)


def accept(log_ratio: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Metropolis decisions ``log U < log_ratio``; non-finite ratios are rejected."""
    log_u = np.log(rng.uniform(size=np.shape(log_ratio)))
    finite = np.isfinite(log_ratio)
    ok = finite & (log_u < np.where(finite, log_ratio, -np.inf))
    return ok, int(np.count_nonzero(~finite))


def metropolis_sweep(U: np.ndarray, loglik: Callable[[np.ndarray], np.ndarray],
                     propose: Callable[[np.ndarray, int, np.random.Generator], np.ndarray],
                     rng: np.random.Generator, ll_current: Optional[np.ndarray] = None):
    """One sweep over the q components of every subject.

    ``U`` is ``(..., n, q)`` (leading axes index independent chains);
    ``loglik(U)`` returns per-subject conditional log-likelihoods ``(..., n)``;
    ``propose(U, c, rng)`` returns proposed values for component ``c``.
    Returns ``(U_new, ll_new, accepted (..., n, q), n_nonfinite)``.
    """
    U = U.copy()
    ll = loglik(U) if ll_current is None else ll_current
    q = U.shape[-1]
    acc = np.zeros(U.shape, dtype=bool)
    bad = 0
    for c in range(q):
        prop = U.copy()
        prop[..., c] = propose(U, c, rng)
        ll_prop = loglik(prop)
        ok, nb = accept(ll_prop - ll, rng)
        bad += nb
        U[..., c] = np.where(ok, prop[..., c], U[..., c])
        ll = np.where(ok, ll_prop, ll)
        acc[..., c] = ok
    return U, ll, acc, bad


class _Likelihood:
    """Per-subject log p(y_i | u_i, theta) with the fixed part of eta frozen.

    Called on states of shape ``(..., n, q)``; returns ``(..., n)``.
    """

    def __init__(self, dataset, offset, family: Family, link: LinkSpec):
        self.y = dataset.y
        self.Z = dataset.Z
        self.subject = dataset.subject
        self.n = dataset.n_subjects
        self.offset = np.asarray(offset, dtype=float)
        self.family = family
        self.link = link
        self._z1 = self.Z[:, 0] if self.Z.shape[1] == 1 else None

    def per_obs(self, U: np.ndarray) -> np.ndarray:
        if self._z1 is not None:
            eta = self.offset + self._z1 * U[..., self.subject, 0]
        else:
            eta = self.offset + np.einsum("oj,...oj->...o", self.Z, U[..., self.subject, :])
        mu = _inverse_link(self.link, eta)
        if self.family.kind is FamilyKind.BERNOULLI:
            mu = np.clip(mu, MU_EPS, 1 - MU_EPS)
        return _log_density(self.family, self.y, mu)

    def __call__(self, U: np.ndarray) -> np.ndarray:
        lp = self.per_obs(U)
        lead = lp.shape[:-1]
        lp = lp.reshape(-1, lp.shape[-1])
        C = lp.shape[0]
        idx = (np.arange(C)[:, None] * self.n + self.subject[None, :]).ravel()
        out = np.bincount(idx, weights=lp.ravel(), minlength=C * self.n)
        return out.reshape(*lead, self.n)


def log_acceptance_ratio(lik: _Likelihood, U: np.ndarray, U_star: np.ndarray,
                         full_product: bool = False) -> np.ndarray:
    """Log acceptance ratio for single-subject moves, per subject.

    ``U`` and ``U_star`` are ``(n, q)``.  With ``full_product=True`` the ratio
    is formed from the product over all subjects of a state in which only
    subject i moved, for each i in turn.
    """
    if not full_product:
        return lik(U_star) - lik(U)
    base = lik(U).sum()
    out = np.empty(U.shape[0])
    for i in range(U.shape[0]):
        V = U.copy()
        V[i] = U_star[i]
        out[i] = lik(V).sum() - base
    return out


def _prior_proposer(covariance: np.ndarray):
    q = covariance.shape[0]
    parts = [conditional_prior(covariance, c) for c in range(q)]

    def propose(U, c, rng):
        coef, var = parts[c]
        rest = [k for k in range(q) if k != c]
        mean = U[..., rest] @ coef if rest else 0.0
        return mean + np.sqrt(max(var, 0.0)) * rng.standard_normal(U.shape[:-1])

    return propose


def run_chain(model: RandomEffectsModel, dataset, offset, family: Family, link: LinkSpec,
              config: SamplerConfig, rng: Optional[np.random.Generator] = None,
              start: Optional[np.ndarray] = None) -> DrawBank:
    """Metropolis chains for all subjects.

    ``offset`` is the fixed part of the linear predictor per observation
    (``D theta``).  Each chain starts at ``start`` (``(n, q)``, zeros by
    default), runs ``burn_in`` sweeps, then keeps every ``thinning``-th sweep
    until its share of ``n_draws`` is stored.  Without an explicit ``rng``
    the generator is seeded from ``config.seed``.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    n, q = dataset.n_subjects, dataset.q
    if q == 0:
        return DrawBank(np.zeros((1, n, 0)), 0, 1, config.seed, np.ones(n))
    lik = _Likelihood(dataset, offset, family, link)
    propose = _prior_proposer(model.covariance)
    C, per_chain = config.layout()
    U0 = np.zeros((n, q)) if start is None else np.asarray(start, dtype=float).reshape(n, q)
    U = np.broadcast_to(U0, (C, n, q)).copy()
    ll = lik(U)
    draws = np.empty((per_chain, C, n, q))
    acc = np.zeros(n)
    bad = 0
    total = config.burn_in + per_chain * config.thinning
    kept = 0
    for sweep in range(total):
        U, ll, a, nb = metropolis_sweep(U, lik, propose, rng, ll)
        acc += a.mean(axis=(0, 2))
        bad += nb
        j = sweep - config.burn_in
        if j >= 0 and (j + 1) % config.thinning == 0:
            draws[kept] = U
            kept += 1
    return DrawBank(draws.reshape(per_chain * C, n, q), config.burn_in, config.thinning,
                    config.seed, acc / total, bad)


def posterior_expectation(bank: DrawBank, g: Callable[[np.ndarray], object]):
    """Average of ``g(draw)`` over the retained draws (each draw is ``(n, q)``)."""
    if bank.n_draws < 1:
        raise ValueError("empty draw bank")
    total = None
    for U in bank.draws:
        v = np.asarray(g(U), dtype=float)
        total = v.copy() if total is None else total + v
    out = total / bank.n_draws
    return float(out) if out.ndim == 0 else out


def update_sigma(bank: DrawBank) -> np.ndarray:
    """Zero-mean Gaussian ML step: average of u_i u_i^T over draws and subjects."""
    U = bank.draws
    q = U.shape[2]
    if q == 0:
        return np.zeros((0, 0))
    flat = U.reshape(-1, q)
    return floor_covariance(flat.T @ flat / flat.shape[0])


def integrated_loglik(dataset, offset, family: Family, link: LinkSpec,
                      covariance: np.ndarray, n_draws: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of the marginal log-likelihood.

    Uses ``n_draws`` draws of u from its prior and log-mean-exp of the
    conditional likelihood, subject by subject.
    """
    lik = _Likelihood(dataset, offset, family, link)
    n, q = dataset.n_subjects, dataset.q
    if q == 0:
        return float(lik(np.zeros((n, 0))).sum())
    L = np.linalg.cholesky(floor_covariance(covariance))
    vals = np.concatenate([lik(rng.standard_normal((min(100, n_draws - k), n, q)) @ L.T)
                           for k in range(0, n_draws, 100)])
    return float(np.sum(logsumexp(vals, axis=0) - np.log(n_draws)))
