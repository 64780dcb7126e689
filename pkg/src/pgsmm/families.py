"""Exponential-family responses: Poisson, Bernoulli and Gaussian.

Everything is vectorised over numpy arrays.  The ``_``-prefixed helpers skip
domain validation and are what the fitting loops call.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit, gammaln, xlogy

ETA_BOUND = 350.0  # |eta| clamp for the log link; exp(350) is still finite
MU_EPS = 1e-10  # Bernoulli means are kept in [MU_EPS, 1 - MU_EPS]


class FamilyKind(str, Enum):
    POISSON = "poisson"
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


class LinkKind(str, Enum):
    LOG = "log"
    LOGIT = "logit"
    IDENTITY = "identity"


CANONICAL_LINK = {
    FamilyKind.POISSON: LinkKind.LOG,
    FamilyKind.BERNOULLI: LinkKind.LOGIT,
    FamilyKind.GAUSSIAN: LinkKind.IDENTITY,
}


@dataclass(frozen=True)
class Family:
    kind: FamilyKind
    dispersion: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind(self.kind))
        if self.kind is not FamilyKind.GAUSSIAN and self.dispersion != 1.0:
            raise ValueError(f"dispersion is fixed at 1 for the {self.kind.value} family")
        if not self.dispersion > 0:
            raise ValueError("dispersion must be positive")

    def with_dispersion(self, phi: float) -> "Family":
        if self.kind is not FamilyKind.GAUSSIAN:
            return self
        return Family(self.kind, float(phi))


@dataclass(frozen=True)
class LinkSpec:
    kind: LinkKind

    def __post_init__(self):
        object.__setattr__(self, "kind", LinkKind(self.kind))


def check_pair(family: Family, link: LinkSpec) -> None:
    if link.kind is LinkKind.LOGIT and family.kind is not FamilyKind.BERNOULLI:
        raise ValueError("the logit link is only available for the Bernoulli family")


def is_canonical(family: Family, link: LinkSpec) -> bool:
    return CANONICAL_LINK[family.kind] is link.kind


def _inverse_link(link: LinkSpec, eta):
    if link.kind is LinkKind.LOG:
        return np.exp(np.clip(eta, -ETA_BOUND, ETA_BOUND))
    if link.kind is LinkKind.LOGIT:
        return expit(eta)
    return np.asarray(eta, dtype=float)


def mean_from_linear_predictor(family: Family, link: LinkSpec, eta, return_flag: bool = False):
    """Inverse link ``g^{-1}(eta)``.

    For the log link eta is clamped to ``[-350, 350]``; with
    ``return_flag=True`` a boolean telling whether clamping occurred is
    returned as well.
    """
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("linear predictor must be finite")
    mu = _inverse_link(link, eta)
    if family.kind is FamilyKind.BERNOULLI:
        mu = np.clip(mu, MU_EPS, 1 - MU_EPS)
    if np.ndim(mu) == 0:
        mu = float(mu)
    if return_flag:
        clamped = link.kind is LinkKind.LOG and bool(np.any(np.abs(eta) > ETA_BOUND))
        return mu, clamped
    return mu


def _mu_eta(link: LinkSpec, eta, mu):
    """Derivative d mu / d eta."""
    if link.kind is LinkKind.LOG:
        return mu
    if link.kind is LinkKind.LOGIT:
        return mu * (1 - mu)
    return np.ones_like(mu)


def mu_eta(family: Family, link: LinkSpec, eta):
    mu = mean_from_linear_predictor(family, link, eta)
    return _mu_eta(link, eta, mu)


def _variance(family: Family, mu):
    if family.kind is FamilyKind.POISSON:
        return mu
    if family.kind is FamilyKind.BERNOULLI:
        return mu * (1 - mu)
    return np.full_like(mu, family.dispersion)


def conditional_variance(family: Family, mu):
    """var(y | u) = phi * b''(theta) written as a function of the mean."""
    mu = np.asarray(mu, dtype=float)
    if family.kind is FamilyKind.POISSON and np.any(mu < 0):
        raise ValueError("Poisson mean must be nonnegative")
    if family.kind is FamilyKind.BERNOULLI and np.any((mu < 0) | (mu > 1)):
        raise ValueError("Bernoulli mean must lie in [0, 1]")
    out = _variance(family, mu)
    return float(out) if out.ndim == 0 else out


def _log_density(family: Family, y, mu):
    if family.kind is FamilyKind.POISSON:
        return xlogy(y, mu) - mu - gammaln(y + 1.0)
    if family.kind is FamilyKind.BERNOULLI:
        return xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)
    phi = family.dispersion
    return -0.5 * np.log(2 * np.pi * phi) - (y - mu) ** 2 / (2 * phi)


def check_support(family: Family, y) -> None:
    y = np.asarray(y, dtype=float)
    if family.kind is FamilyKind.POISSON:
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("Poisson responses must be nonnegative integers")
    elif family.kind is FamilyKind.BERNOULLI:
        if np.any((y != 0) & (y != 1)):
            raise ValueError("Bernoulli responses must be 0 or 1")
    elif not np.all(np.isfinite(y)):
        raise ValueError("Gaussian responses must be finite")


def log_density(family: Family, y, mu):
    """Exact log-density of y given the conditional mean, including c(y, phi)."""
    check_support(family, y)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if family.kind is FamilyKind.POISSON and np.any(mu < 0):
        raise ValueError("Poisson mean must be nonnegative")
    out = _log_density(family, y, mu)
    return float(out) if out.ndim == 0 else out
