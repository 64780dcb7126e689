"""Working correlation structures and moment estimation of their parameter."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

RHO_MARGIN = 1e-6


class CorrelationKind(str, Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    AR1 = "ar1"


@dataclass(frozen=True)
class CorrelationSpec:
    kind: CorrelationKind = CorrelationKind.INDEPENDENCE
    rho: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorrelationKind(self.kind))
        object.__setattr__(self, "rho", float(self.rho))


def validity_range(kind: CorrelationKind, m: int) -> tuple[float, float]:
    """Open interval of admissible rho for clusters of size m."""
    kind = CorrelationKind(kind)
    if kind is CorrelationKind.EXCHANGEABLE:
        return (-1.0 / (m - 1) if m > 1 else -np.inf, 1.0)
    if kind is CorrelationKind.AR1:
        return (-1.0, 1.0)
    return (-np.inf, np.inf)


def build_correlation(spec: CorrelationSpec, m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("cluster size must be positive")
    if spec.kind is CorrelationKind.INDEPENDENCE:
        return np.eye(m)
    lo, hi = validity_range(spec.kind, m)
    if not lo < spec.rho < hi:
        raise ValueError(f"rho={spec.rho} outside the valid range ({lo}, {hi}) for m={m}")
    if spec.kind is CorrelationKind.EXCHANGEABLE:
        R = np.full((m, m), spec.rho)
        np.fill_diagonal(R, 1.0)
        return R
    lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m)))
    return spec.rho ** lag


def build_V(spec: CorrelationSpec, A_diag, rho: float | None = None) -> np.ndarray:
    """Working covariance ``A^{1/2} R(rho) A^{1/2}``."""
    A_diag = np.asarray(A_diag, dtype=float)
    if np.any(A_diag <= 0):
        raise ValueError("variance entries must be positive")
    if rho is not None:
        spec = CorrelationSpec(spec.kind, rho)
    s = np.sqrt(A_diag)
    return s[:, None] * build_correlation(spec, A_diag.size) * s[None, :]


def _clamp(rho: float, kind: CorrelationKind, m_max: int) -> float:
    lo, hi = validity_range(kind, m_max)
    return float(np.clip(rho, lo + RHO_MARGIN, hi - RHO_MARGIN))


def estimate_rho(kind, residuals: Sequence[np.ndarray]) -> float:
    """Moment estimator of rho from per-subject standardized residuals.

    Exchangeable: mean of all within-subject products ``e_ij e_ik`` (j < k)
    divided by the mean of ``e_ij^2``.  AR1 uses the lag-one products only.
    No degrees-of-freedom correction is applied.  The result is clamped
    ``1e-6`` inside the range valid for the largest cluster.

    Each element of ``residuals`` may be a vector (one subject) or a 2-D
    array whose rows are independent replications (e.g. Monte Carlo draws)
    of that subject's residuals; replications are pooled.
    """
    kind = CorrelationKind(kind)
    if kind is CorrelationKind.INDEPENDENCE:
        return 0.0
    num = den = 0.0
    n_pairs = n_obs = 0
    m_max = 1
    for e in residuals:
        e = np.atleast_2d(np.asarray(e, dtype=float))
        reps, m = e.shape
        m_max = max(m_max, m)
        den += float(np.sum(e * e))
        n_obs += e.size
        if m < 2:
            continue
        if kind is CorrelationKind.EXCHANGEABLE:
            tot = e.sum(axis=1)
            num += float(np.sum(tot * tot - np.sum(e * e, axis=1)) / 2.0)
            n_pairs += reps * m * (m - 1) // 2
        else:
            num += float(np.sum(e[:, 1:] * e[:, :-1]))
            n_pairs += reps * (m - 1)
    if n_pairs == 0:
        warnings.warn("all subjects are singletons; rho set to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    second = den / n_obs
    if second <= 0:
        return _clamp(0.0, kind, m_max)
    return _clamp((num / n_pairs) / second, kind, m_max)
