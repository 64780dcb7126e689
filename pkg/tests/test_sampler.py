import numpy as np
import pytest

from pgsmm.data import LongitudinalDataset
from pgsmm.families import Family, FamilyKind, LinkKind, LinkSpec
from pgsmm.sampler import (DrawBank, RandomEffectsModel, SamplerConfig, _Likelihood, log_acceptance_ratio,
                           metropolis_sweep, posterior_expectation, run_chain, update_sigma)

GAUSS, IDENT = Family(FamilyKind.GAUSSIAN, 1.0), LinkSpec(LinkKind.IDENTITY)
POIS, LOG = Family(FamilyKind.POISSON), LinkSpec(LinkKind.LOG)


def conjugate_setup(sigma2=0.5, phi=1.0, m=4, n=3, seed=0):
    rng = np.random.default_rng(seed)
    subject = np.repeat(np.arange(n), m)
    time = np.tile(np.arange(m, dtype=float), n)
    offset = rng.normal(size=n * m)
    y = offset + rng.normal(0, np.sqrt(sigma2), n)[subject] + rng.normal(0, np.sqrt(phi), n * m)
    ds = LongitudinalDataset.from_arrays(subject, time, y, np.zeros((n * m, 0)))
    post_var = 1.0 / (1.0 / sigma2 + m / phi)
    resid = (y - offset).reshape(n, m).sum(axis=1)
    return ds, offset, post_var * resid / phi, post_var


def test_conjugate_normal_posterior():
    sigma2, phi = 0.5, 1.0
    ds, offset, mean, var = conjugate_setup(sigma2, phi)
    cfg = SamplerConfig(n_draws=40000, burn_in=200, n_chains=10, seed=11)
    bank = run_chain(RandomEffectsModel(np.array([[sigma2]])), ds, offset, Family(FamilyKind.GAUSSIAN, phi),
                     IDENT, cfg)
    u = bank.draws[:, :, 0].reshape(-1, 10, ds.n_subjects)  # (draws per chain, chain, subject)
    chain_mean = u.mean(axis=0)
    chain_var = u.var(axis=0)
    se_mean = chain_mean.std(axis=0, ddof=1) / np.sqrt(10)
    se_var = chain_var.std(axis=0, ddof=1) / np.sqrt(10)
    assert np.all(np.abs(chain_mean.mean(axis=0) - mean) < 3 * se_mean)
    assert np.all(np.abs(chain_var.mean(axis=0) - var) < 3 * se_var)
    # second moment through posterior_expectation
    m2 = posterior_expectation(bank, lambda U: U[:, 0] ** 2)
    np.testing.assert_allclose(m2, var + mean ** 2, rtol=0.05)


def test_two_point_detailed_balance():
    # each subject is an independent chain on {-1, 1}; the uniform proposal cancels
    rng = np.random.default_rng(3)
    loglik_table = np.log(np.array([0.2, 0.8]))
    n = 2000
    loglik = lambda U: loglik_table[(U[..., 0] > 0).astype(int)]
    propose = lambda U, c, r: r.choice([-1.0, 1.0], size=U.shape[:-1])
    U = np.full((n, 1), -1.0)
    ll = None
    hits = 0
    sweeps = 50
    for s in range(sweeps + 10):
        U, ll, _, _ = metropolis_sweep(U, loglik, propose, rng, ll)
        if s >= 10:
            hits += int(np.sum(U[:, 0] > 0))
    p_hat = hits / (n * sweeps)
    assert abs(p_hat - 0.8) < 0.01  # total variation on two points


def _poisson_instance(n=20, m=4, seed=0):
    rng = np.random.default_rng(seed)
    subject = np.repeat(np.arange(n), m)
    time = np.tile(np.linspace(0, 1, m), n)
    X = rng.uniform(-1, 1, (n * m, 2))
    b = rng.normal(0, 0.5, n)
    y = rng.poisson(np.exp(X @ [0.5, -0.5] + b[subject]))
    return LongitudinalDataset.from_arrays(subject, time, y, X), X @ [0.5, -0.5]


def test_factorised_ratio_equals_full_product():
    ds, off = _poisson_instance()
    lik = _Likelihood(ds, off, POIS, LOG)
    rng = np.random.default_rng(5)
    for _ in range(5):
        U, Us = rng.normal(size=(ds.n_subjects, 1)), rng.normal(size=(ds.n_subjects, 1))
        np.testing.assert_allclose(log_acceptance_ratio(lik, U, Us),
                                   log_acceptance_ratio(lik, U, Us, full_product=True), atol=1e-12)


def test_identity_proposal_always_accepted():
    ds, off = _poisson_instance()
    lik = _Likelihood(ds, off, POIS, LOG)
    U = np.random.default_rng(1).normal(size=(ds.n_subjects, 1))
    assert np.all(log_acceptance_ratio(lik, U, U) == 0)


def test_no_random_effect_signal_accepts_everything():
    ds, off = _poisson_instance()
    flat = LongitudinalDataset(ds.subject, ds.time, ds.y, ds.X, np.zeros_like(ds.Z))
    bank = run_chain(RandomEffectsModel(np.eye(1)), flat, off, POIS, LOG,
                     SamplerConfig(n_draws=50, burn_in=5, n_chains=5, seed=2))
    np.testing.assert_array_equal(bank.acceptance, 1.0)


def test_bookkeeping_and_determinism():
    ds, off = _poisson_instance()
    model = RandomEffectsModel(0.25 * np.eye(1))
    cfg = SamplerConfig(n_draws=1, burn_in=0, n_chains=1, seed=9)
    assert run_chain(model, ds, off, POIS, LOG, cfg).n_draws == 1
    cfg = SamplerConfig(n_draws=200, burn_in=20, thinning=2, seed=9)
    a, b = run_chain(model, ds, off, POIS, LOG, cfg), run_chain(model, ds, off, POIS, LOG, cfg)
    assert a.n_draws == 200
    np.testing.assert_array_equal(a.draws, b.draws)
    assert np.all((a.acceptance > 0) & (a.acceptance < 1))


def test_extreme_eta_does_not_overflow():
    ds, off = _poisson_instance()
    bank = run_chain(RandomEffectsModel(np.eye(1)), ds, off + 300.0, POIS, LOG,
                     SamplerConfig(n_draws=20, burn_in=2, seed=1))
    assert np.all(np.isfinite(bank.draws))


def test_posterior_expectation_examples():
    bank = DrawBank(np.array([[[1.0]], [[3.0]]]))
    assert posterior_expectation(bank, lambda U: 7.0) == 7.0
    assert posterior_expectation(bank, lambda U: U[0, 0]) == 2.0


def test_update_sigma():
    zero = DrawBank(np.zeros((5, 4, 2)))
    np.testing.assert_allclose(update_sigma(zero), 1e-10 * np.eye(2))
    draws = np.full((3, 4, 1), 0.5)
    assert update_sigma(DrawBank(draws))[0, 0] == pytest.approx(0.25)
    rng = np.random.default_rng(0)
    u = rng.normal(0, 0.5, (1, 40000, 1))
    est = update_sigma(DrawBank(u))[0, 0]
    se = np.sqrt(2) * 0.25 / np.sqrt(40000)
    assert abs(est - 0.25) < 3 * se


def test_covariance_floor():
    model = RandomEffectsModel(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.linalg.eigvalsh(model.covariance).min() >= 1e-10 * (1 - 1e-6)
