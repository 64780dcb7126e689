"""Model and solver settings shared by the fitter, tuner and CLI."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .correlation import CorrelationKind
from .families import CANONICAL_LINK, Family, FamilyKind, LinkSpec, check_pair
from .penalty import ScadPenalty
from .sampler import SamplerConfig
from .splines import SplineConfig


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules for the Monte Carlo Newton-Raphson loop.

    The outer loop stops when the sup-norm change of theta between outer
    iterations is below ``tol``, or when on ``se_patience`` consecutive
    iterations every coordinate moved less than ``se_tol`` of its
    model-based standard error (the Monte Carlo noise floor usually sits
    above ``tol``).  ``zero_threshold`` is the hard threshold applied to beta
    after convergence (raised to ``epsilon * lambda`` if that is larger).
    ``kkt_zeroing`` additionally zeroes entries below lambda in magnitude
    whose partial score at zero is within ``n * lambda``.
    ``init_ridge=None`` picks a ridge for the starting GLM automatically.
    """

    max_outer_iterations: int = 50
    max_newton_steps: int = 10
    tol: float = 1e-4
    se_tol: float = 0.05
    se_patience: int = 2
    zero_threshold: float = 1e-3
    step_halving_limit: int = 8
    init_ridge: Optional[float] = None
    kkt_zeroing: bool = True

    def __post_init__(self):
        if self.max_outer_iterations < 1 or self.max_newton_steps < 1:
            raise ValueError("iteration limits must be positive")
        if not (self.tol > 0 and self.zero_threshold > 0 and self.se_tol >= 0):
            raise ValueError("tolerances must be positive")
        if self.step_halving_limit < 0:
            raise ValueError("step_halving_limit must be nonnegative")


def default_lambda_grid(n_points: int = 30, lo: float = 0.01, hi: float = 2.0) -> np.ndarray:
    """Ascending log-spaced grid on [lo, hi]."""
    return np.geomspace(lo, hi, n_points)


@dataclass(frozen=True)
class ModelSpec:
    family: Family = field(default_factory=lambda: Family(FamilyKind.POISSON))
    link: Optional[LinkSpec] = None
    correlation: CorrelationKind = CorrelationKind.EXCHANGEABLE
    spline: SplineConfig = field(default_factory=SplineConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    scad_a: float = 3.7
    scad_epsilon: float = 1e-6
    lam: Optional[float] = None
    lambda_grid: Optional[tuple] = None
    ell_draws: int = 2000
    gcv_weights: str = "reference"

    def __post_init__(self):
        if self.link is None:
            object.__setattr__(self, "link", LinkSpec(CANONICAL_LINK[self.family.kind]))
        object.__setattr__(self, "correlation", CorrelationKind(self.correlation))
        check_pair(self.family, self.link)
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if not grid or np.any(np.diff(grid) <= 0) or grid[0] < 0:
                raise ValueError("lambda_grid must be nonempty, nonnegative and strictly increasing")
            object.__setattr__(self, "lambda_grid", grid)
        if self.gcv_weights not in ("reference", "own"):
            raise ValueError("gcv_weights must be 'reference' or 'own'")
        # validates a and epsilon
        ScadPenalty(self.lam or 0.0, self.scad_a, self.scad_epsilon)

    def penalty(self, lam: Optional[float] = None) -> ScadPenalty:
        lam = self.lam if lam is None else lam
        return ScadPenalty(float(lam or 0.0), self.scad_a, self.scad_epsilon)

    def grid(self) -> np.ndarray:
        return np.asarray(self.lambda_grid) if self.lambda_grid is not None else default_lambda_grid()
