"""GCV choice of lambda, sandwich covariance and information criteria."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm

from .correlation import CorrelationKind, CorrelationSpec, build_correlation
from .data import LongitudinalDataset
from .estimating import (FitResult, Problem, SingularSystemError, WarmStart, _score_weights,
                         block_moment, draw_quantities, fit, glm_start)
from .model import ModelSpec
from .sampler import DrawBank, floor_covariance, integrated_loglik

log = logging.getLogger(__name__)

W_FLOOR = 1e-10


class SaturatedError(ValueError):
    pass


class TuningError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


# ---------------------------------------------------------------------------
# W_i and GCV


def W_blocks(fit_: FitResult, bank: Optional[DrawBank] = None) -> dict:
    """Per cluster size ``s``: array ``(n_s, s, s)`` of W_i in subject order of the block."""
    pr = fit_.problem
    bank = bank or fit_.bank
    dq = draw_quantities(pr, fit_.theta, bank.draws, fit_.family)
    spec = CorrelationSpec(pr.corr_kind, fit_.rho if pr.corr_kind is not CorrelationKind.INDEPENDENCE else 0.0)
    out = {}
    for s, _, idx in pr.blocks:
        a = dq.a[:, idx]                      # (N, n_s, s)
        mu = dq.mu[:, idx]
        R = build_correlation(spec, s)
        EV = np.einsum("kia,kib->iab", a, a) / a.shape[0] * R
        mbar = mu.mean(axis=0)
        var_mean = np.einsum("kia,kib->iab", mu, mu) / mu.shape[0] - np.einsum("ia,ib->iab", mbar, mbar)
        W = EV + var_mean
        W = 0.5 * (W + np.swapaxes(W, 1, 2))
        out[s] = np.stack([floor_covariance(Wi, W_FLOOR) for Wi in W])
    return out


def compute_W(fit_: FitResult, bank: Optional[DrawBank] = None) -> list[np.ndarray]:
    """Marginal covariance of y_i under the fit, one ``n_i x n_i`` matrix per subject.

    The mean over draws of the working covariance ``A^{1/2} R A^{1/2}`` plus
    the covariance over draws of the conditional mean.
    """
    pr = fit_.problem
    blocks = W_blocks(fit_, bank)
    out: list = [None] * pr.n
    for s, subs, _ in pr.blocks:
        for j, i in enumerate(subs):
            out[i] = blocks[s][j]
    return out


def effective_params(H: np.ndarray, nE_diag) -> float:
    """tr[(H + nE)^{-1} H]."""
    A = H + np.diag(np.asarray(nE_diag, dtype=float))
    return float(np.trace(np.linalg.solve(A, H)))


def gcv_score(fit_: FitResult, bank: Optional[DrawBank] = None,
              W: Optional[dict] = None) -> tuple[float, float, float]:
    """Return ``(rss, d, gcv)`` for a converged fit.

    ``rss`` averages ``r' W^{-1} r`` over draws and sums over subjects;
    the GCV numerator divides it by the total number of observations and the
    denominator is ``(1 - d/n)^2`` with ``n`` the number of subjects.
    ``W`` (as returned by :func:`W_blocks`) defaults to the fit's own.
    """
    pr = fit_.problem
    bank = bank or fit_.bank
    nE = pr.n * fit_.E_diag
    d = effective_params(fit_.H, nE)
    denom = (1.0 - d / pr.n) ** 2
    if d >= pr.n or not denom > 0:
        raise SaturatedError(f"saturated effective dimension: d={d:.3f} >= n={pr.n}")
    dq = draw_quantities(pr, fit_.theta, bank.draws, fit_.family)
    W = W if W is not None else W_blocks(fit_, bank)
    rss = 0.0
    for s, _, idx in pr.blocks:
        r = dq.r[:, idx]
        rss += float(np.einsum("kia,iab,kib->", r, np.linalg.inv(W[s]), r)) / r.shape[0]
    return rss, d, rss / pr.dataset.n_obs / denom


# ---------------------------------------------------------------------------
# lambda selection


@dataclass
class TuningReport:
    lambda_grid: np.ndarray
    gcv_values: np.ndarray
    rss_values: np.ndarray
    effective_params: np.ndarray
    lambda_opt: float
    converged: np.ndarray
    beta_path: Optional[np.ndarray] = None
    fit: Optional[FitResult] = field(default=None, repr=False)
    diagnostics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lambda_grid": self.lambda_grid.tolist(), "gcv_values": _json_floats(self.gcv_values),
                "rss_values": _json_floats(self.rss_values),
                "effective_params": _json_floats(self.effective_params),
                "lambda_opt": self.lambda_opt, "converged": [bool(c) for c in self.converged],
                "beta_path": None if self.beta_path is None else self.beta_path.tolist()}


def _json_floats(v):
    return [float(x) if np.isfinite(x) else None for x in np.asarray(v, dtype=float)]


def select_lambda(dataset: LongitudinalDataset, spec: ModelSpec, grid: Optional[Sequence[float]] = None,
                  seed: Optional[int] = None, compute_ell: bool = True) -> TuningReport:
    """Fit along the grid from the largest lambda down and keep the GCV minimizer.

    Each fit starts from the previous one's spline coefficients, Sigma, rho,
    dispersion and chain state.  Penalized coefficients restart from the
    unpenalized GLM fit every time: under the quadratic approximation an
    exact zero never leaves zero, so inheriting them would freeze the
    active set of the largest lambda.

    With ``spec.gcv_weights == "reference"`` every grid point is scored with
    the W_i of one reference fit (the smallest lambda whose fit converged
    with ``d < n``), so the weighted residual sums are on a common scale;
    ``"own"`` uses each fit's own W_i.  Saturated or non-converged points get
    an infinite GCV.  Ties go to the smallest lambda.
    """
    grid = np.asarray(spec.grid() if grid is None else grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0) or grid[0] < 0:
        raise ValueError("lambda grid must be nonempty, nonnegative and strictly increasing")
    problem = Problem(dataset, spec)
    theta0 = glm_start(problem, spec.solver.init_ridge)
    K = grid.size
    gcv = np.full(K, np.inf)
    rss = np.full(K, np.nan)
    dfs = np.full(K, np.nan)
    conv = np.zeros(K, dtype=bool)
    fits: list[Optional[FitResult]] = [None] * K
    path = np.full((K, problem.p), np.nan)
    diagnostics = []
    warm = WarmStart()
    for k in range(K - 1, -1, -1):
        start = theta0.copy()
        if warm.theta is not None:
            start[problem.p:] = warm.theta[problem.p:]
        try:
            res = fit(dataset, spec, lam=grid[k], seed=seed, warm=warm, problem=problem,
                      theta_start=start, compute_ell=False)
        except (SingularSystemError, np.linalg.LinAlgError, ValueError) as exc:
            diagnostics.append({"lambda": float(grid[k]), "error": str(exc)})
            continue
        fits[k] = res
        path[k] = res.beta
        conv[k] = res.converged
        if res.converged:
            dfs[k] = effective_params(res.H, problem.n * res.E_diag)
        else:
            diagnostics.append({"lambda": float(grid[k]), "error": "not converged", "flags": res.flags})
        warm = WarmStart(res.theta, res.sigma, res.rho, res.phi, res.chain_start)
    if not conv.any():
        raise TuningError("no fit on the lambda grid converged", diagnostics)

    usable = conv & (dfs < problem.n)
    ref_W = None
    if spec.gcv_weights == "reference" and usable.any():
        ref_W = W_blocks(fits[int(np.flatnonzero(usable)[0])])
    for k in np.flatnonzero(conv):
        try:
            rss[k], dfs[k], gcv[k] = gcv_score(fits[k], W=ref_W)
        except (SaturatedError, np.linalg.LinAlgError) as exc:
            diagnostics.append({"lambda": float(grid[k]), "error": str(exc)})
    if not np.isfinite(gcv).any():
        raise TuningError("GCV is undefined at every grid point", diagnostics)
    k_opt = int(np.flatnonzero(gcv == gcv.min())[0])
    best = fits[k_opt]
    if compute_ell:
        best.ell_max = fit_ell(best)
    return TuningReport(grid, gcv, rss, dfs, float(grid[k_opt]), conv, path, best, diagnostics)


def fit_ell(fit_: FitResult) -> float:
    pr = fit_.problem
    _, ell_seq = np.random.SeedSequence(fit_.seed).spawn(2)
    return integrated_loglik(pr.dataset, pr.D @ fit_.theta, fit_.family, pr.link, fit_.sigma,
                             pr.spec.ell_draws, np.random.default_rng(ell_seq))


# ---------------------------------------------------------------------------
# sandwich covariance


@dataclass
class InferenceReport:
    covariance: np.ndarray
    standard_errors: np.ndarray
    wald_intervals: np.ndarray  # (P, 2)
    level: float = 0.95
    bread: str = "observed"
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"covariance": self.covariance.tolist(), "standard_errors": self.standard_errors.tolist(),
                "wald_intervals": self.wald_intervals.tolist(), "level": self.level,
                "bread": self.bread, "flags": list(self.flags)}


def _per_draw_weights(fit_: FitResult, bank: Optional[DrawBank]):
    pr = fit_.problem
    bank = bank or fit_.bank
    dq = draw_quantities(pr, fit_.theta, bank.draws, fit_.family)
    g = _score_weights(pr, dq, pr.correlation_inverses(fit_.rho))
    return dq, g


def sandwich_meat(fit_: FitResult, bank: Optional[DrawBank] = None, per_draw: bool = False) -> np.ndarray:
    """Sum over subjects of outer products of the per-subject score.

    By default the score of each subject is averaged over the draws before
    the outer product.  ``per_draw=True`` averages the outer products
    instead (the unintegrated plug-in).
    """
    pr = fit_.problem
    _, g = _per_draw_weights(fit_, bank)
    if per_draw:
        M = block_moment(pr, g, g)
    else:
        gbar = g.mean(axis=0, keepdims=True)
        M = block_moment(pr, gbar, gbar)
    return 0.5 * (M + M.T)


def missing_information(fit_: FitResult, bank: Optional[DrawBank] = None) -> np.ndarray:
    """Posterior covariance between the estimating function and the
    conditional log-likelihood score, summed over subjects.

    ``H`` treats the draws as fixed; the estimating function also depends
    on theta through the posterior of u, and its derivative picks up minus
    this term.  For the canonical link with independence working
    correlation it is the posterior covariance of the per-subject score.
    """
    pr = fit_.problem
    dq, g = _per_draw_weights(fit_, bank)
    lik = dq.r * dq.w / dq.a / fit_.family.dispersion
    g = g - g.mean(axis=0)
    lik = lik - lik.mean(axis=0)
    return block_moment(pr, g, lik)


def sandwich_covariance(fit_: FitResult, bank: Optional[DrawBank] = None, level: float = 0.95,
                        per_draw: bool = False, bread: str = "observed") -> InferenceReport:
    """``B^{-1} M B^{-T}`` over the active coefficients.

    ``bread="complete"`` uses ``B = H + nE``.  ``bread="observed"`` (the
    default) subtracts :func:`missing_information`, giving the derivative of
    the Monte Carlo estimating function with respect to theta; without it
    the standard errors of the fixed effects come out too small whenever the
    random-effect posterior is informative.  If the observed bread is not
    positive definite the complete one is used and ``"bread_fallback"`` is
    flagged.

    Coefficients set to zero by the penalty get zero rows and columns, hence
    standard error 0.
    """
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if bread not in ("observed", "complete"):
        raise ValueError("bread must be 'observed' or 'complete'")
    pr = fit_.problem
    theta = fit_.theta
    keep = np.ones(pr.P, dtype=bool)
    keep[: pr.p] = theta[: pr.p] != 0
    ix = np.ix_(keep, keep)
    Bc = (fit_.H + np.diag(pr.n * fit_.E_diag))[ix]
    flags = []
    Bm = Bc
    if bread == "observed" and pr.dataset.q:
        Bo = Bc - missing_information(fit_, bank)[ix]
        if np.linalg.eigvalsh(0.5 * (Bo + Bo.T)).min() > 0:
            Bm = Bo
        else:
            flags.append("bread_fallback")
    M = sandwich_meat(fit_, bank, per_draw)
    try:
        Binv = np.linalg.inv(Bm)
    except np.linalg.LinAlgError:
        raise SingularSystemError("sandwich bread is singular") from None
    if not np.all(np.isfinite(Binv)):
        raise SingularSystemError("sandwich bread is singular")
    cov = np.zeros((pr.P, pr.P))
    cov[ix] = Binv @ M[ix] @ Binv.T
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z = norm.ppf(0.5 + level / 2)
    ci = np.column_stack([theta - z * se, theta + z * se])
    return InferenceReport(cov, se, ci, level, bread, flags)


# ---------------------------------------------------------------------------
# information criteria


def aic_bic(ell_max: float, m_free: int, n: int) -> tuple[float, float]:
    return 2 * m_free - 2 * ell_max, m_free * np.log(n) - 2 * ell_max


def free_parameters(fit_: FitResult) -> int:
    """Nonzero beta, all spline coefficients, the q(q+1)/2 entries of Sigma,
    rho unless the working correlation is independence, and the Gaussian
    dispersion."""
    pr = fit_.problem
    q = pr.dataset.q
    m = int(np.count_nonzero(fit_.beta)) + pr.h + q * (q + 1) // 2
    if pr.corr_kind is not CorrelationKind.INDEPENDENCE:
        m += 1
    if fit_.family.kind.value == "gaussian":
        m += 1
    return m
