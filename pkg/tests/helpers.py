"""Small datasets and an independent, loop-based reference implementation."""

import numpy as np

from pgsmm.correlation import CorrelationKind, CorrelationSpec, build_correlation
from pgsmm.data import LongitudinalDataset
from pgsmm.estimating import Problem
from pgsmm.families import Family, FamilyKind
from pgsmm.model import ModelSpec, SolverConfig
from pgsmm.sampler import SamplerConfig
from pgsmm.splines import SplineConfig


def linear_dataset(n=20, m=4, p=3, seed=0, random_intercept=False):
    rng = np.random.default_rng(seed)
    subject = np.repeat(np.arange(n), m)
    time = rng.uniform(0, 1, n * m)
    X = rng.normal(size=(n * m, p))
    y = X @ np.linspace(1, -1, p) + np.sin(2 * np.pi * time) + rng.normal(0, 0.5, n * m)
    Z = None if random_intercept else np.zeros((n * m, 0))
    return LongitudinalDataset.from_arrays(subject, time, y, X, Z)


def poisson_dataset(n=30, m=5, beta=(-1.0, -1.0, 2.0, 0.0, 0.0), sigma2=0.25, seed=0):
    rng = np.random.default_rng(seed)
    beta = np.asarray(beta)
    subject = np.repeat(np.arange(n), m)
    X = rng.uniform(-1, 1, (n * m, beta.size))
    t = rng.uniform(0, 1, n * m)
    b = rng.normal(0, np.sqrt(sigma2), n)
    y = rng.poisson(np.exp(X @ beta + np.sin(2 * np.pi * t) + b[subject]))
    return LongitudinalDataset.from_arrays(subject, t, y, X)


def gaussian_ls_spec(**kw):
    return ModelSpec(family=Family(FamilyKind.GAUSSIAN), correlation=CorrelationKind.INDEPENDENCE,
                     spline=SplineConfig(degree=3, interior_knot_count=2), **kw)


def naive_pieces(problem: Problem, theta, draws, rho, family=None):
    """Per draw and subject: score vector and H contribution, by explicit loops.

    Uses the general chain rule  D' Delta A^{-1/2} R^{-1} A^{-1/2} (y - mu)
    with Delta = diag(dmu/deta); for canonical links Delta A^{-1/2} = A^{1/2}.
    """
    ds = problem.dataset
    family = family or problem.family
    link = problem.link.kind.value
    N = draws.shape[0]
    scores = np.zeros((N, ds.n_subjects, problem.P))
    Hs = np.zeros((N, ds.n_subjects, problem.P, problem.P))
    for k in range(N):
        for i in range(ds.n_subjects):
            rows = np.flatnonzero(ds.subject == i)
            D_i = problem.D[rows]
            eta = D_i @ theta + ds.Z[rows] @ draws[k, i]
            if link == "log":
                mu = np.exp(eta)
                dmu = mu
            elif link == "logit":
                mu = 1 / (1 + np.exp(-eta))
                dmu = mu * (1 - mu)
            else:
                mu = eta.copy()
                dmu = np.ones_like(eta)
            if family.kind is FamilyKind.POISSON:
                nu = mu
            elif family.kind is FamilyKind.BERNOULLI:
                nu = mu * (1 - mu)
            else:
                nu = np.full_like(mu, family.dispersion)
            kind = problem.corr_kind
            R = build_correlation(CorrelationSpec(kind, rho if kind is not CorrelationKind.INDEPENDENCE else 0.0),
                                  rows.size)
            Rinv = np.linalg.inv(R)
            A_mh = np.diag(1 / np.sqrt(nu))
            Delta = np.diag(dmu)
            scores[k, i] = D_i.T @ Delta @ A_mh @ Rinv @ A_mh @ (ds.y[rows] - mu)
            Hs[k, i] = D_i.T @ Delta @ A_mh @ Rinv @ A_mh @ Delta @ D_i
    return scores, Hs


def tiny_spec(correlation=CorrelationKind.EXCHANGEABLE, family=None):
    return ModelSpec(family=family or Family(FamilyKind.POISSON), correlation=correlation,
                     spline=SplineConfig(degree=1, interior_knot_count=0),
                     sampler=SamplerConfig(n_draws=5, burn_in=0, n_chains=1),
                     solver=SolverConfig())
