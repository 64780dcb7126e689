"""SCAD penalty derivative and its local quadratic approximation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScadPenalty:
    lam: float = 0.0
    a: float = 3.7
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not self.a > 2:
            raise ValueError("SCAD requires a > 2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def scad_derivative(beta_abs, penalty: ScadPenalty):
    """q_lambda(|b|): lambda on [0, lambda], linear decay to 0 at a*lambda."""
    b = np.asarray(beta_abs, dtype=float)
    if np.any(b < 0):
        raise ValueError("scad_derivative expects |beta|")
    lam, a = penalty.lam, penalty.a
    if lam == 0:
        out = np.zeros_like(b)
    else:
        out = np.where(b <= lam, lam, np.maximum(a * lam - b, 0.0) / (a - 1))
    return float(out) if out.ndim == 0 else out


def lqa_weights(beta, penalty: ScadPenalty) -> np.ndarray:
    """Diagonal of the beta block of E: q(|b|) / (epsilon + |b|)."""
    b = np.abs(np.asarray(beta, dtype=float))
    return np.atleast_1d(scad_derivative(b, penalty)) / (penalty.epsilon + b)


def assemble_E(theta, p: int, penalty: ScadPenalty) -> np.ndarray:
    """Penalty matrix over (beta, alpha); the alpha block is exactly zero."""
    theta = np.asarray(theta, dtype=float)
    diag = np.zeros(theta.size)
    diag[:p] = lqa_weights(theta[:p], penalty)
    return np.diag(diag)
