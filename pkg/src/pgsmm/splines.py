"""Truncated power spline basis for the smooth time effect f(t)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np


class KnotPlacement(str, Enum):
    EQUALLY_SPACED = "equally_spaced"
    QUANTILE = "quantile"


@dataclass(frozen=True)
class SplineConfig:
    """Settings for the truncated power basis.

    ``interior_knot_count=None`` means "use :func:`default_knot_count` with the
    number of subjects"; ``time_domain=None`` means "use the observed range".
    """

    degree: int = 3
    interior_knot_count: Optional[int] = None
    knot_placement: KnotPlacement = KnotPlacement.EQUALLY_SPACED
    smoothness_order: int = 2
    time_domain: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.interior_knot_count is not None and self.interior_knot_count < 0:
            raise ValueError("interior_knot_count must be nonnegative")
        if self.smoothness_order < 1:
            raise ValueError("smoothness_order must be positive")
        object.__setattr__(self, "knot_placement", KnotPlacement(self.knot_placement))
        if self.time_domain is not None:
            lo, hi = (float(v) for v in self.time_domain)
            if hi < lo:
                raise ValueError("time_domain must be an interval [t_min, t_max]")
            object.__setattr__(self, "time_domain", (lo, hi))

    def basis_dim(self, n_knots: int) -> int:
        return self.degree + 1 + n_knots

    def resolved(self, n_subjects: int, times: np.ndarray) -> "SplineConfig":
        """Fill in the knot count and time domain from the data."""
        times = np.asarray(times, dtype=float)
        L = self.interior_knot_count
        if L is None:
            L = default_knot_count(n_subjects, self.smoothness_order)
        dom = self.time_domain
        if dom is None:
            dom = (float(times.min()), float(times.max()))
        return SplineConfig(self.degree, L, self.knot_placement, self.smoothness_order, dom)


def default_knot_count(n: int, r: int) -> int:
    """Number of interior knots ``round(n ** (1 / (2r + 1)))``.

    Rounding is half-up (``floor(x + 0.5)``), so 2.5 maps to 3.
    """
    if n < 1 or r < 1:
        raise ValueError("n and r must be positive integers")
    return int(math.floor(n ** (1.0 / (2 * r + 1)) + 0.5))


def make_knots(config: SplineConfig, times: Sequence[float]) -> np.ndarray:
    """Interior knots for ``config``.

    Quantile placement uses the linear-interpolation empirical quantile
    (``numpy.quantile`` default) at probabilities k / (L + 1).
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("times must be nonempty")
    L = config.interior_knot_count
    if L is None:
        raise ValueError("interior_knot_count must be resolved before placing knots")
    lo, hi = config.time_domain if config.time_domain is not None else (times.min(), times.max())
    if times.min() < lo or times.max() > hi:
        raise ValueError("time_domain does not cover the observed times")
    if L == 0:
        return np.empty(0)
    if hi <= lo:
        raise ValueError("degenerate time domain")
    probs = np.arange(1, L + 1) / (L + 1)
    if config.knot_placement is KnotPlacement.EQUALLY_SPACED:
        knots = lo + probs * (hi - lo)
    else:
        knots = np.quantile(times, probs)
    if np.any(np.diff(knots) <= 0) or knots[0] <= lo or knots[-1] >= hi:
        raise ValueError("knots must be strictly increasing and inside the time domain")
    return knots


def basis_matrix(degree: int, knots: np.ndarray, t) -> np.ndarray:
    """Rows ``(1, t, ..., t^d, (t - k_1)_+^d, ..., (t - k_L)_+^d)`` for each t.

    Times outside the fitting domain are evaluated by the same formula.
    For ``degree == 0`` the hinge terms are step functions ``1{t > k}``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    knots = np.asarray(knots, dtype=float)
    poly = t[:, None] ** np.arange(degree + 1)
    diff = t[:, None] - knots[None, :]
    if degree == 0:
        hinge = (diff > 0).astype(float)
    else:
        hinge = np.maximum(diff, 0.0) ** degree
    return np.hstack([poly, hinge])


def evaluate_basis(config: SplineConfig, knots: np.ndarray, t: float) -> np.ndarray:
    knots = np.asarray(knots, dtype=float)
    if config.interior_knot_count is not None and knots.size != config.interior_knot_count:
        raise ValueError("knot vector length does not match interior_knot_count")
    return basis_matrix(config.degree, knots, t)[0]


def evaluate_f(basis, alpha) -> float:
    basis = np.asarray(basis, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if basis.shape[-1] != alpha.shape[-1]:
        raise ValueError(f"basis has {basis.shape[-1]} entries but alpha has {alpha.shape[-1]}")
    return basis @ alpha


def outside_domain(t, domain: tuple[float, float]) -> bool:
    t = np.asarray(t, dtype=float)
    return bool(np.any((t < domain[0]) | (t > domain[1])))
