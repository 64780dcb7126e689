import numpy as np
import pytest

from helpers import gaussian_ls_spec, linear_dataset, naive_pieces, poisson_dataset, tiny_spec

from pgsmm.correlation import CorrelationKind
from pgsmm.data import LongitudinalDataset
from pgsmm.estimating import FitResult, Problem, assemble_H, fit
from pgsmm.families import Family, FamilyKind
from pgsmm.model import ModelSpec, SolverConfig
from pgsmm.penalty import ScadPenalty, lqa_weights
from pgsmm.sampler import DrawBank, SamplerConfig, run_chain, RandomEffectsModel
from pgsmm.splines import SplineConfig
from pgsmm.tuning import (SaturatedError, TuningError, aic_bic, compute_W, effective_params, free_parameters,
                          gcv_score, sandwich_covariance, sandwich_meat, select_lambda)

FAST = SamplerConfig(n_draws=200, burn_in=30)


def manual_fit(problem, theta, bank, rho=0.3, lam=0.0, family=None):
    family = family or problem.family
    H = assemble_H(problem, theta, bank, rho, family)
    return FitResult(problem, np.asarray(theta, float), np.eye(problem.dataset.q) * 0.3, rho, family, bank,
                     ScadPenalty(lam), True, 1, 0, H=H)


def tiny_fit(corr=CorrelationKind.EXCHANGEABLE, seed=0):
    rng = np.random.default_rng(seed)
    subject = np.repeat(np.arange(3), 2)
    ds = LongitudinalDataset.from_arrays(subject, rng.uniform(0, 1, 6), rng.poisson(2.0, 6),
                                         rng.normal(size=(6, 2)))
    pr = Problem(ds, tiny_spec(corr))
    return manual_fit(pr, rng.normal(0, 0.3, pr.P), DrawBank(rng.normal(0, 0.5, (5, 3, 1))))


@pytest.fixture(scope="module")
def poisson_fit():
    ds = poisson_dataset(n=40, seed=2)
    return fit(ds, ModelSpec(sampler=FAST), lam=0.0, seed=1)


# ---------------------------------------------------------------------------
# effective parameters


def test_d_at_zero_is_full_dimension(poisson_fit):
    pr = poisson_fit.problem
    assert effective_params(poisson_fit.H, np.zeros(pr.P)) == pytest.approx(pr.P, abs=1e-8)


def test_d_monotone_and_bounded(poisson_fit):
    pr = poisson_fit.problem
    beta = poisson_fit.beta
    prev = np.inf
    for lam in np.geomspace(0.001, 1e6, 40):
        nE = np.zeros(pr.P)
        nE[: pr.p] = pr.n * lqa_weights(beta, ScadPenalty(lam))
        d = effective_params(poisson_fit.H, nE)
        assert pr.h - 1e-6 <= d <= pr.P + 1e-8
        assert d <= prev + 1e-8
        prev = d
    assert prev == pytest.approx(pr.h, abs=1e-3)


# ---------------------------------------------------------------------------
# W and GCV


def test_W_without_random_effects_is_working_covariance():
    ds = poisson_dataset(n=10, m=3, seed=1)
    ds0 = LongitudinalDataset(ds.subject, ds.time, ds.y, ds.X, np.zeros((ds.n_obs, 0)))
    pr = Problem(ds0, ModelSpec(correlation=CorrelationKind.AR1))
    theta = np.random.default_rng(0).normal(0, 0.2, pr.P)
    f = manual_fit(pr, theta, DrawBank(np.zeros((1, pr.n, 0))), rho=0.4)
    mu = np.exp(pr.D @ theta)
    R = np.array([[1, 0.4, 0.16], [0.4, 1, 0.4], [0.16, 0.4, 1]])
    for i, W in enumerate(compute_W(f)):
        a = np.sqrt(mu[3 * i:3 * i + 3])
        np.testing.assert_allclose(W, a[:, None] * R * a[None, :], rtol=1e-12)


def test_W_single_draw_has_no_mean_variance_term():
    f = tiny_fit(CorrelationKind.INDEPENDENCE)
    f.bank = DrawBank(f.bank.draws[:1])
    pr = f.problem
    mu = np.exp(pr.D @ f.theta + f.bank.draws[0, pr.dataset.subject, 0])
    for i, W in enumerate(compute_W(f)):
        np.testing.assert_allclose(W, np.diag(mu[2 * i:2 * i + 2]), rtol=1e-12)


def test_W_gaussian_conjugate():
    rng = np.random.default_rng(0)
    n, m, sigma2, phi = 4, 3, 0.5, 1.0
    subject = np.repeat(np.arange(n), m)
    X = rng.normal(size=(n * m, 1))
    y = X[:, 0] + rng.normal(0, np.sqrt(sigma2), n)[subject] + rng.normal(0, 1, n * m)
    ds = LongitudinalDataset.from_arrays(subject, np.tile(np.arange(m, dtype=float), n), y, X)
    spec = ModelSpec(family=Family(FamilyKind.GAUSSIAN, phi), correlation=CorrelationKind.INDEPENDENCE,
                     spline=SplineConfig(degree=0, interior_knot_count=0))
    pr = Problem(ds, spec)
    theta = np.array([1.0, 0.0])
    bank = run_chain(RandomEffectsModel(np.array([[sigma2]])), ds, pr.D @ theta, spec.family, pr.link,
                     SamplerConfig(n_draws=20000, burn_in=100, seed=4))
    f = manual_fit(pr, theta, bank, rho=0.0)
    post_var = 1 / (1 / sigma2 + m / phi)
    for W in compute_W(f):
        np.testing.assert_allclose(W, phi * np.eye(m) + post_var * np.ones((m, m)), atol=0.02)


def test_perfect_fit_has_zero_gcv():
    ds = poisson_dataset(n=12, m=3, seed=3)
    ds0 = LongitudinalDataset(ds.subject, ds.time, ds.y, ds.X, np.zeros((ds.n_obs, 0)))
    pr = Problem(ds0, ModelSpec(correlation=CorrelationKind.INDEPENDENCE,
                                spline=SplineConfig(degree=1, interior_knot_count=0)))
    theta = np.full(pr.P, 0.1)
    mu = np.exp(pr.D @ theta)
    ds1 = LongitudinalDataset(ds0.subject, ds0.time, mu, ds0.X, ds0.Z)
    pr1 = Problem(ds1, pr.spec)
    f = manual_fit(pr1, theta, DrawBank(np.zeros((1, pr.n, 0))), rho=0.0)
    rss, d, gcv = gcv_score(f)
    assert rss == pytest.approx(0, abs=1e-20) and gcv == pytest.approx(0, abs=1e-20)
    assert d == pytest.approx(pr.P)


def test_saturated_gcv_raises():
    f = tiny_fit()
    with pytest.raises(SaturatedError, match="saturated effective dimension"):
        gcv_score(f)


# ---------------------------------------------------------------------------
# lambda selection


def test_single_point_grid():
    ds = poisson_dataset(n=25, seed=5)
    rep = select_lambda(ds, ModelSpec(sampler=FAST), grid=[0.3], seed=0)
    assert rep.lambda_opt == 0.3 and rep.fit.penalty.lam == 0.3
    assert np.isfinite(rep.fit.ell_max)


def test_grid_validation():
    ds = poisson_dataset(n=10, seed=5)
    with pytest.raises(ValueError):
        select_lambda(ds, ModelSpec(sampler=FAST), grid=[0.5, 0.1])


def test_lambda_opt_is_argmin_with_ties_to_smallest():
    ds = poisson_dataset(n=30, seed=6)
    rep = select_lambda(ds, ModelSpec(sampler=FAST), grid=np.geomspace(0.01, 2.0, 8), seed=2,
                        compute_ell=False)
    g = rep.gcv_values
    assert rep.lambda_opt == rep.lambda_grid[np.flatnonzero(g == np.min(g))[0]]
    assert 0.05 <= rep.lambda_opt <= 2.0
    assert rep.beta_path.shape == (8, 5)


def test_no_converged_fit_raises_with_diagnostics():
    ds = poisson_dataset(n=15, seed=1)
    spec = ModelSpec(sampler=SamplerConfig(n_draws=20, burn_in=2),
                     solver=SolverConfig(max_outer_iterations=1, tol=1e-14, se_tol=0.0))
    with pytest.raises(TuningError) as err:
        select_lambda(ds, spec, grid=[0.1, 0.5], seed=0)
    assert len(err.value.diagnostics) == 2


def test_pure_noise_design_selects_empty_model():
    empty = 0
    grid = np.geomspace(0.01, 2.0, 8)
    spec = ModelSpec(sampler=SamplerConfig(n_draws=200, burn_in=30))
    for k in range(20):
        ds = poisson_dataset(n=30, beta=(0.0,) * 5, seed=100 + k)
        rep = select_lambda(ds, spec, grid=grid, seed=k, compute_ell=False)
        empty += int(np.all(rep.fit.beta == 0))
    assert empty > 10


# ---------------------------------------------------------------------------
# sandwich


def test_meat_matches_naive_loops():
    f = tiny_fit()
    scores, _ = naive_pieces(f.problem, f.theta, f.bank.draws, f.rho)
    sbar = scores.mean(axis=0)
    np.testing.assert_allclose(sandwich_meat(f), sbar.T @ sbar, rtol=0, atol=1e-10)
    per = np.einsum("kia,kib->ab", scores, scores) / scores.shape[0]
    np.testing.assert_allclose(sandwich_meat(f, per_draw=True), per, rtol=0, atol=1e-10)


@pytest.mark.parametrize("m", [1, 4])
def test_sandwich_reduces_to_robust_least_squares(m):
    ds = linear_dataset(n=60 if m == 1 else 25, m=m, seed=9)
    spec = ModelSpec(family=Family(FamilyKind.GAUSSIAN), correlation=CorrelationKind.INDEPENDENCE,
                     spline=SplineConfig(degree=1, interior_knot_count=1))
    res = fit(ds, spec, lam=0.0, seed=0)
    inf = sandwich_covariance(res)
    D = res.problem.D
    e = ds.y - D @ res.theta
    bread = np.linalg.inv(D.T @ D)
    meat = np.zeros_like(bread)
    for i in range(ds.n_subjects):
        rows = ds.subject == i
        s = D[rows].T @ e[rows]
        meat += np.outer(s, s)
    np.testing.assert_allclose(inf.covariance, bread @ meat @ bread, rtol=0, atol=1e-8)


def test_zeroed_coefficients_get_zero_se():
    ds = poisson_dataset(n=30, seed=4)
    res = fit(ds, ModelSpec(sampler=FAST), lam=50.0, seed=0, compute_ell=False)
    inf = sandwich_covariance(res)
    assert np.all(inf.standard_errors[: res.problem.p] == 0)
    assert np.all(inf.standard_errors[res.problem.p:] > 0)


def test_sandwich_symmetric_psd(poisson_fit):
    for bread in ("observed", "complete"):
        inf = sandwich_covariance(poisson_fit, bread=bread, level=0.9)
        C = inf.covariance
        assert np.abs(C - C.T).max() < 1e-10
        assert np.linalg.eigvalsh(C).min() > -1e-10
        lo, hi = inf.wald_intervals.T
        np.testing.assert_allclose(hi - lo, 2 * 1.6448536269514722 * inf.standard_errors)
    with pytest.raises(ValueError):
        sandwich_covariance(poisson_fit, bread="other")


def test_sandwich_se_tracks_empirical_sd():
    # small Poisson instance at a fixed lambda of 0: SD1 within 35% of the spread over replicates
    est, se = [], []
    spec = ModelSpec(sampler=SamplerConfig(n_draws=200, burn_in=30),
                     spline=SplineConfig(degree=3, interior_knot_count=1))
    for k in range(100):
        ds = poisson_dataset(n=40, m=5, beta=(-1.0, 1.0), seed=1000 + k)
        res = fit(ds, spec, lam=0.0, seed=k, compute_ell=False)
        est.append(res.beta.copy())
        se.append(sandwich_covariance(res).standard_errors[:2])
    ratio = np.mean(se, axis=0) / np.std(est, axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.35), ratio


# ---------------------------------------------------------------------------
# information criteria


def test_aic_bic_examples():
    assert aic_bic(0.0, 1, 1) == (2.0, 0.0)
    aic, bic = aic_bic(-10.0, 3, 100)
    assert aic == 26.0 and bic == pytest.approx(3 * np.log(100) + 20)
    assert aic_bic(5.0, 0, 7) == (-10.0, -10.0)


def test_free_parameter_count(poisson_fit):
    pr = poisson_fit.problem
    nonzero = int(np.count_nonzero(poisson_fit.beta))
    # exchangeable: + rho; Poisson: no dispersion; q = 1: one variance
    assert free_parameters(poisson_fit) == nonzero + pr.h + 1 + 1
