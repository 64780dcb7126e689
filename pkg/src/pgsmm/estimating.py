"""Penalized estimating equations and the Monte Carlo Newton-Raphson fit.

Conventions
-----------
* ``theta = (beta, alpha)``: ``p`` penalized fixed effects followed by the
  ``h`` unpenalized spline coefficients.
* The score and curvature are unnormalized sums over the ``n`` subjects;
  the penalty therefore enters as ``n * E``.
* Every Monte Carlo quantity is an average over the draws of a
  :class:`~pgsmm.sampler.DrawBank`.
* For a general link the score weight per observation is
  ``(dmu/deta) / sqrt(var)``; with a canonical link and unit dispersion this
  is ``A^{1/2}`` and the score reduces to
  ``sum_i D_i' A_i^{1/2} R^{-1} A_i^{-1/2} (y_i - mu_i)``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .correlation import CorrelationKind, CorrelationSpec, build_correlation, estimate_rho
from .data import LongitudinalDataset
from .families import Family, FamilyKind, LinkSpec, MU_EPS, _inverse_link, _mu_eta, _variance
from .model import ModelSpec, SolverConfig
from .penalty import ScadPenalty, lqa_weights
from .sampler import (DrawBank, RandomEffectsModel, SamplerConfig, floor_covariance,
                      integrated_loglik, run_chain, update_sigma)
from .splines import SplineConfig, basis_matrix, make_knots

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
INIT_SIGMA = 0.1


class SingularSystemError(np.linalg.LinAlgError):
    pass


class Problem:
    """Design and grouping for one dataset under one model spec."""

    def __init__(self, dataset: LongitudinalDataset, spec: ModelSpec,
                 spline: Optional[SplineConfig] = None, knots: Optional[np.ndarray] = None):
        self.dataset = dataset
        self.spec = spec
        self.family = spec.family
        self.link = spec.link
        self.corr_kind = spec.correlation
        if spline is None:
            spline = spec.spline.resolved(dataset.n_subjects, dataset.time)
        if knots is None:
            knots = make_knots(spline, dataset.time)
        self.spline = spline
        self.knots = np.asarray(knots, dtype=float)
        self.B = basis_matrix(spline.degree, self.knots, dataset.time)
        self.D = np.hstack([dataset.X, self.B])
        self.n = dataset.n_subjects
        self.p = dataset.p
        self.h = self.B.shape[1]
        self.P = self.p + self.h
        sizes = dataset.cluster_sizes
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.starts = starts
        self.blocks = []
        for s in np.unique(sizes):
            subs = np.flatnonzero(sizes == s)
            idx = starts[subs][:, None] + np.arange(s)[None, :]
            self.blocks.append((int(s), subs, idx))

    @property
    def names(self) -> list[str]:
        return list(self.dataset.fixed_names) + [f"alpha{k}" for k in range(self.h)]

    def f_basis(self, t) -> np.ndarray:
        return basis_matrix(self.spline.degree, self.knots, t)

    def correlation_inverses(self, rho: float) -> dict:
        spec = CorrelationSpec(self.corr_kind, rho)
        out = {}
        for s, _, _ in self.blocks:
            R = build_correlation(spec, s)
            cond = np.linalg.cond(R)
            if not np.isfinite(cond) or cond > 1e12:
                raise SingularSystemError(f"working correlation is singular (condition number {cond:.3g})")
            out[s] = np.linalg.inv(R)
        return out

    def eta(self, theta: np.ndarray, draws: np.ndarray) -> np.ndarray:
        """Linear predictor per draw, shape ``(N, n_obs)``."""
        ds = self.dataset
        offset = self.D @ theta
        if ds.q == 0:
            return np.broadcast_to(offset, (draws.shape[0], offset.size)).copy()
        return offset[None, :] + np.einsum("oj,koj->ko", ds.Z, draws[:, ds.subject, :])


@dataclass
class DrawQuantities:
    """Per-draw, per-observation pieces evaluated at one theta."""

    mu: np.ndarray
    a: np.ndarray  # sqrt of conditional variance
    w: np.ndarray  # (dmu/deta) / a
    r: np.ndarray  # y - mu


def draw_quantities(problem: Problem, theta, draws, family: Optional[Family] = None) -> DrawQuantities:
    family = family or problem.family
    eta = problem.eta(np.asarray(theta, dtype=float), draws)
    mu = _inverse_link(problem.link, eta)
    if family.kind is FamilyKind.BERNOULLI:
        mu = np.clip(mu, MU_EPS, 1 - MU_EPS)
    nu = np.maximum(_variance(family, mu), VAR_FLOOR)
    a = np.sqrt(nu)
    w = _mu_eta(problem.link, eta, mu) / a
    return DrawQuantities(mu, a, w, problem.dataset.y[None, :] - mu)


def _score_weights(problem: Problem, dq: DrawQuantities, Rinv: dict) -> np.ndarray:
    """Per-draw score contributions g with score = D' g, shape ``(N, n_obs)``."""
    e = dq.r / dq.a
    if problem.corr_kind is CorrelationKind.INDEPENDENCE:
        return dq.w * e
    g = np.empty_like(e)
    for s, _, idx in problem.blocks:
        blk = e[:, idx]
        g[:, idx] = dq.w[:, idx] * (blk.reshape(-1, s) @ Rinv[s]).reshape(blk.shape)
    return g


def assemble_score(problem: Problem, theta, bank: DrawBank, rho: float,
                   family: Optional[Family] = None) -> np.ndarray:
    dq = draw_quantities(problem, theta, bank.draws, family)
    return _score_from(problem, dq, problem.correlation_inverses(rho))


def _score_from(problem, dq, Rinv):
    return problem.D.T @ _score_weights(problem, dq, Rinv).mean(axis=0)


def assemble_H(problem: Problem, theta, bank: DrawBank, rho: float,
               family: Optional[Family] = None) -> np.ndarray:
    dq = draw_quantities(problem, theta, bank.draws, family)
    return _H_from(problem, dq, problem.correlation_inverses(rho))


def _H_from(problem, dq, Rinv):
    D = problem.D
    if problem.corr_kind is CorrelationKind.INDEPENDENCE:
        w2 = np.mean(dq.w * dq.w, axis=0)
        H = D.T @ (w2[:, None] * D)
    else:
        H = np.zeros((problem.P, problem.P))
        N = dq.w.shape[0]
        for s, _, idx in problem.blocks:
            W = dq.w[:, idx]
            C = np.einsum("kia,kib->iab", W, W) / N
            Dblk = D[idx]
            T = np.einsum("iab,ibq->iaq", C * Rinv[s], Dblk)
            H += Dblk.reshape(-1, problem.P).T @ T.reshape(-1, problem.P)
    return 0.5 * (H + H.T)


def subject_scores(problem: Problem, theta, bank: DrawBank, rho: float,
                   family: Optional[Family] = None, per_draw: bool = False) -> np.ndarray:
    """Per-subject score vectors.

    Returns ``(n, P)`` draw-averaged contributions, or ``(N, n, P)`` when
    ``per_draw`` is set.
    """
    dq = draw_quantities(problem, theta, bank.draws, family)
    g = _score_weights(problem, dq, problem.correlation_inverses(rho))
    if per_draw:
        return np.add.reduceat(g[:, :, None] * problem.D[None], problem.starts, axis=1)
    return np.add.reduceat(problem.D * g.mean(axis=0)[:, None], problem.starts, axis=0)


def block_moment(problem: Problem, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``sum_i D_i' K_i D_i`` with ``K_i = mean_k a_i^k (b_i^k)'``.

    ``a`` and ``b`` are per-draw observation-level arrays ``(N, n_obs)``.
    """
    D, P = problem.D, problem.P
    out = np.zeros((P, P))
    N = a.shape[0]
    for s, _, idx in problem.blocks:
        K = np.einsum("kia,kib->iab", a[:, idx], b[:, idx]) / N
        Dblk = D[idx]
        T = np.einsum("iab,ibq->iaq", K, Dblk)
        out += Dblk.reshape(-1, P).T @ T.reshape(-1, P)
    return out


def penalized_u(theta, score, p: int, n: int, penalty: ScadPenalty, weights_at=None) -> np.ndarray:
    """U = S - n * E * theta on the beta block; the alpha block is S.

    ``weights_at`` is the point where the LQA weights are evaluated
    (``theta`` itself by default).
    """
    theta = np.asarray(theta, dtype=float)
    at = theta if weights_at is None else np.asarray(weights_at, dtype=float)
    U = np.array(score, dtype=float)
    U[:p] -= n * lqa_weights(at[:p], penalty) * theta[:p]
    return U


@dataclass
class StepResult:
    theta: np.ndarray
    u_norm: float
    halvings: int
    jittered: bool = False


def solve_penalized(H: np.ndarray, nE_diag: np.ndarray, rhs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``(H + diag(nE)) x = rhs``; one automatic ridge jitter of 1e-8."""
    A = H + np.diag(nE_diag)
    try:
        x = np.linalg.solve(A, rhs)
        if np.all(np.isfinite(x)):
            return x, False
    except np.linalg.LinAlgError:
        pass
    try:
        x = np.linalg.solve(A + 1e-8 * np.eye(A.shape[0]), rhs)
    except np.linalg.LinAlgError:
        x = np.full_like(rhs, np.nan)
    if not np.all(np.isfinite(x)):
        raise SingularSystemError("H + nE is singular; increase lambda or add a ridge")
    return x, True


def newton_step(theta, score, H, E_diag, n: int) -> tuple[np.ndarray, bool]:
    """theta + (H + nE)^{-1} (S - nE theta).

    The increment shrinks penalized coefficients toward zero, as the local
    quadratic approximation of the penalty requires.
    """
    theta = np.asarray(theta, dtype=float)
    nE = n * np.asarray(E_diag, dtype=float)
    delta, jit = solve_penalized(H, nE, score - nE * theta)
    return theta + delta, jit


@dataclass
class FitResult:
    problem: Problem
    theta: np.ndarray
    sigma: np.ndarray
    rho: float
    family: Family
    bank: DrawBank
    penalty: ScadPenalty
    converged: bool
    n_outer: int
    seed: int
    score: np.ndarray = None
    H: np.ndarray = None
    u_norm: float = float("nan")
    ell_max: float = float("nan")
    delta_history: list = field(default_factory=list)
    u_history: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    chain_start: Optional[np.ndarray] = None

    @property
    def beta(self) -> np.ndarray:
        return self.theta[: self.problem.p]

    @property
    def alpha(self) -> np.ndarray:
        return self.theta[self.problem.p:]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.beta != 0)

    @property
    def phi(self) -> float:
        return self.family.dispersion

    @property
    def E_diag(self) -> np.ndarray:
        d = np.zeros(self.problem.P)
        d[: self.problem.p] = lqa_weights(self.beta, self.penalty)
        return d

    def f_hat(self, t) -> np.ndarray:
        return self.problem.f_basis(t) @ self.alpha

    def acceptance_rate(self) -> float:
        acc = self.bank.acceptance
        return float(np.mean(acc)) if acc is not None else float("nan")


@dataclass
class WarmStart:
    theta: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None
    rho: Optional[float] = None
    phi: Optional[float] = None
    chain_start: Optional[np.ndarray] = None


def glm_start(problem: Problem, ridge: Optional[float] = None, max_iter: int = 50) -> np.ndarray:
    """Unpenalized GLM on D with random effects fixed at zero (IRLS).

    A ridge on beta is added for stability; by default it is negligible
    unless the design is wide relative to the number of observations.
    """
    D, y = problem.D, problem.dataset.y
    fam, link = problem.family, problem.link
    N, P, p = D.shape[0], problem.P, problem.p
    if ridge is None:
        ridge = 1e-8 if P < 0.5 * N else 1.0
    pen = np.zeros(P)
    pen[:p] = ridge
    pen[p:] = 1e-10
    theta = np.zeros(P)
    # start the intercept-like spline column at the link of the mean response
    ybar = float(np.clip(y.mean(), 1e-3, None))
    if link.kind.value == "log":
        theta[p] = np.log(ybar)
    elif link.kind.value == "logit":
        yb = np.clip(y.mean(), 0.01, 0.99)
        theta[p] = np.log(yb / (1 - yb))
    else:
        theta[p] = y.mean()
    for _ in range(max_iter):
        eta = D @ theta
        mu = _inverse_link(link, eta)
        if fam.kind is FamilyKind.BERNOULLI:
            mu = np.clip(mu, MU_EPS, 1 - MU_EPS)
        nu = np.maximum(_variance(fam, mu), VAR_FLOOR)
        dmu = _mu_eta(link, eta, mu)
        wts = dmu * dmu / nu
        grad = D.T @ (dmu / nu * (y - mu)) - pen * theta
        Hm = D.T @ (wts[:, None] * D) + np.diag(pen)
        step = np.linalg.lstsq(Hm, grad, rcond=None)[0]
        step_max = np.max(np.abs(step))
        if step_max > 5:
            step *= 5 / step_max
        theta = theta + step
        if step_max < 1e-10:
            break
    return theta


def _model_se(H: np.ndarray, nE_diag: np.ndarray) -> np.ndarray:
    try:
        cov = np.linalg.inv(H + np.diag(nE_diag))
    except np.linalg.LinAlgError:
        return np.zeros(H.shape[0])
    return np.sqrt(np.clip(np.diag(cov), 0, None))


def _dispersion(problem: Problem, dq: DrawQuantities) -> float:
    dof = max(problem.dataset.n_obs - problem.P, 1)
    return float(max(np.mean(np.sum(dq.r * dq.r, axis=1)) / dof, 1e-8))


def _estimate_rho(problem: Problem, dq: DrawQuantities) -> float:
    if problem.corr_kind is CorrelationKind.INDEPENDENCE:
        return 0.0
    e = dq.r / dq.a
    res = []
    for _, _, idx in problem.blocks:
        blk = e[:, idx]  # (N, n_s, s)
        res.extend(blk[:, i, :] for i in range(blk.shape[1]))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return estimate_rho(problem.corr_kind, res)


def _inner_newton(problem, theta, draws, family, Rinv, penalty: ScadPenalty,
                  solver: SolverConfig, flags):
    """Newton steps on the penalized equation with the draws held fixed.

    Each step re-evaluates the LQA weights at the current iterate and
    solves ``(H + nE) delta = S - nE theta``.  The increment is halved
    until ``||S - nE theta||_inf`` (E held at the step's starting point)
    does not increase.  Returns the new theta, the draw quantities and
    score there, and per-step ``(before, after)`` norms.
    """
    n, p, P = problem.n, problem.p, problem.P

    def weights(th):
        nE = np.zeros(P)
        nE[:p] = n * lqa_weights(th[:p], penalty)
        return nE

    dq = draw_quantities(problem, theta, draws, family)
    S = _score_from(problem, dq, Rinv)
    history = []
    for _ in range(solver.max_newton_steps):
        nE = weights(theta)
        G = S - nE * theta
        g_norm = float(np.max(np.abs(G)))
        H = _H_from(problem, dq, Rinv)
        delta, jit = solve_penalized(H, nE, G)
        if jit and "ridge_jitter" not in flags:
            flags.append("ridge_jitter")
        accepted = False
        for _ in range(solver.step_halving_limit + 1):
            cand = theta + delta
            dq_c = draw_quantities(problem, cand, draws, family)
            S_c = _score_from(problem, dq_c, Rinv)
            c_norm = float(np.max(np.abs(S_c - nE * cand)))
            if np.isfinite(c_norm) and c_norm <= g_norm:
                accepted = True
                break
            delta = delta / 2
        if not accepted:
            break
        step = float(np.max(np.abs(cand - theta)))
        theta, dq, S = cand, dq_c, S_c
        history.append((g_norm, c_norm))
        if step < 0.1 * solver.tol:
            break
    return theta, dq, S, history


def _zero_stationary(problem, theta, draws, family, Rinv, penalty: ScadPenalty) -> None:
    """Set small beta entries to zero where zero satisfies the SCAD condition.

    The quadratic approximation only approaches zero geometrically, slowly
    when the partial score at zero is close to ``n * lambda``.  Entries with
    ``0 < |beta_k| < lambda`` are zeroed together; any whose score at the
    zeroed point exceeds ``n * lambda`` in absolute value is restored.
    """
    p = problem.p
    beta = theta[:p]
    cand = (beta != 0) & (np.abs(beta) < penalty.lam)
    if not cand.any():
        return
    trial = theta.copy()
    trial[:p][cand] = 0.0
    S0 = _score_from(problem, draw_quantities(problem, trial, draws, family), Rinv)
    beta[cand & (np.abs(S0[:p]) <= problem.n * penalty.lam)] = 0.0


def fit(dataset: LongitudinalDataset, spec: ModelSpec, lam: Optional[float] = None,
        seed: Optional[int] = None, warm: Optional[WarmStart] = None,
        problem: Optional[Problem] = None, theta_start: Optional[np.ndarray] = None,
        compute_ell: bool = True) -> FitResult:
    """Fit the penalized semiparametric mixed model at a fixed lambda.

    Each outer iteration draws a Metropolis bank at the current theta and
    Sigma, re-estimates rho (and the Gaussian dispersion), updates Sigma, then
    takes Newton steps on the penalized equation with that bank.  Every outer
    chain reuses the same random stream and starting state, so successive
    banks differ only through theta and Sigma and the iteration can settle
    to a fixed point.  See :class:`~pgsmm.model.SolverConfig` for the
    stopping rules.
    """
    solver = spec.solver
    penalty = spec.penalty(lam)
    problem = problem or Problem(dataset, spec)
    warm = warm or WarmStart()
    seed = int(seed if seed is not None else (spec.sampler.seed if spec.sampler.seed is not None else 0))
    chain_seq, ell_seq = np.random.SeedSequence(seed).spawn(2)
    flags: list[str] = []
    if problem.P > dataset.n_obs:
        flags.append("wide_design")

    if theta_start is not None:
        theta = np.array(theta_start, dtype=float)
    elif warm.theta is not None:
        theta = np.array(warm.theta, dtype=float)
    else:
        theta = glm_start(problem, solver.init_ridge)
    q = dataset.q
    sigma = np.array(warm.sigma, dtype=float) if warm.sigma is not None else INIT_SIGMA * np.eye(q)
    rho = float(warm.rho) if warm.rho is not None else 0.0
    family = problem.family
    if warm.phi is not None:
        family = family.with_dispersion(warm.phi)
    elif family.kind is FamilyKind.GAUSSIAN:
        dq0 = draw_quantities(problem, theta, np.zeros((1, problem.n, q)), family)
        family = family.with_dispersion(_dispersion(problem, dq0))
    chain_start = warm.chain_start

    best = None
    converged = False
    quiet = 0
    deltas, u_hist = [], []
    it = 0
    for it in range(1, solver.max_outer_iterations + 1):
        model = RandomEffectsModel(sigma) if q else None
        bank = run_chain(model, dataset, problem.D @ theta, family, problem.link, spec.sampler,
                         rng=np.random.default_rng(chain_seq), start=chain_start) \
            if q else DrawBank(np.zeros((1, problem.n, 0)))
        dq = draw_quantities(problem, theta, bank.draws, family)
        rho = _estimate_rho(problem, dq)
        if family.kind is FamilyKind.GAUSSIAN:
            family = family.with_dispersion(_dispersion(problem, dq))
        if q:
            sigma = update_sigma(bank)
        Rinv = problem.correlation_inverses(rho)
        new_theta, dq, S, hist = _inner_newton(problem, theta, bank.draws, family, Rinv,
                                               penalty, solver, flags)
        u_hist.append(hist)
        if not np.all(np.isfinite(new_theta)):
            flags.append("nonfinite_theta")
            break
        step = np.abs(new_theta - theta)
        delta = float(np.max(step))
        deltas.append(delta)
        E_new = np.zeros(problem.P)
        E_new[: problem.p] = lqa_weights(new_theta[: problem.p], penalty)
        se = _model_se(_H_from(problem, dq, Rinv), problem.n * E_new)
        z = float(np.max(step / se)) if np.all(se > 0) else np.inf
        if best is None or delta < best[0]:
            best = (delta, new_theta, sigma.copy(), rho, family, bank)
        theta = new_theta
        quiet = quiet + 1 if z < solver.se_tol else 0
        if delta < solver.tol or quiet >= solver.se_patience:
            converged = True
            break
    if not converged:
        flags.append("not_converged")
        if best is not None:
            _, theta, sigma, rho, family, bank = best
    if bank.rejected_nonfinite:
        flags.append("sampler_nonfinite_ratio")

    Rinv = problem.correlation_inverses(rho)
    if penalty.lam > 0:
        beta = theta[: problem.p]
        beta[np.abs(beta) < max(solver.zero_threshold, penalty.epsilon * penalty.lam)] = 0.0
        if solver.kkt_zeroing:
            _zero_stationary(problem, theta, bank.draws, family, Rinv, penalty)

    dq = draw_quantities(problem, theta, bank.draws, family)
    S = _score_from(problem, dq, Rinv)
    H = _H_from(problem, dq, Rinv)
    U = penalized_u(theta, S, problem.p, problem.n, penalty)
    active = np.abs(theta) > 0
    active[problem.p:] = True
    res = FitResult(problem, theta, sigma, rho, family, bank, penalty, converged, it, seed,
                    score=S, H=H, u_norm=float(np.max(np.abs(U[active]))) if active.any() else 0.0,
                    delta_history=deltas, u_history=u_hist, flags=flags,
                    chain_start=bank.draws.mean(axis=0) if q else None)
    if compute_ell:
        res.ell_max = integrated_loglik(dataset, problem.D @ theta, family, problem.link, sigma,
                                        spec.ell_draws, np.random.default_rng(ell_seq))
    return res
