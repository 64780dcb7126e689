"""Poisson simulation study: data generator, replicate runner and summaries.

Replicate ``k`` of a design with master seed ``s`` draws its data from
``SeedSequence([s, k])`` and seeds its fit with ``SeedSequence([s, k, 1])``,
so any replicate can be regenerated on its own and the order in which
replicates run has no effect on the results.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .correlation import CorrelationKind
from .data import LongitudinalDataset
from .model import ModelSpec, default_lambda_grid
from .sampler import SamplerConfig

log = logging.getLogger(__name__)

F_GRID_SIZE = 100
Z95 = 1.959963984540054


def sin_curve(t):
    return np.sin(2 * np.pi * np.asarray(t, dtype=float))


@dataclass(frozen=True)
class SimDesign:
    n_subjects: int
    p: int
    obs_per_subject: int = 5
    true_beta: Optional[tuple] = None
    sigma2: float = 0.25
    replicates: int = 100
    seed: int = 0
    name: str = ""
    long_running: bool = False
    f_true: Callable = field(default=sin_curve, compare=False, repr=False)

    def __post_init__(self):
        if self.n_subjects < 1 or self.p < 1 or self.obs_per_subject < 1:
            raise ValueError("n_subjects, p and obs_per_subject must be positive")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be nonnegative")
        beta = self.true_beta
        if beta is None:
            beta = np.zeros(self.p)
            beta[: min(3, self.p)] = (-1.0, -1.0, 2.0)[: min(3, self.p)]
        beta = tuple(float(b) for b in beta)
        if len(beta) != self.p:
            raise ValueError(f"true_beta has length {len(beta)}, expected p={self.p}")
        object.__setattr__(self, "true_beta", beta)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.true_beta)

    @property
    def support(self) -> np.ndarray:
        return self.beta != 0

    def with_(self, **changes) -> "SimDesign":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        if "p" in changes and "true_beta" not in changes:
            d["true_beta"] = None
        return SimDesign(**d)


def _preset(n, p, long_running=False):
    return SimDesign(n, p, name=f"table1-{n}x{p}", long_running=long_running)


PRESETS = {d.name: d for d in (
    _preset(50, 11), _preset(100, 14), _preset(150, 16),
    _preset(30, 100, True), _preset(100, 500, True), _preset(200, 2000, True),
)}


def get_preset(name: str) -> SimDesign:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


def simulation_spec(grid_points: int = 15) -> ModelSpec:
    """Model settings used by the study presets.

    Lighter than the library defaults so that a 50-replicate study fits in
    minutes on one core: 15 grid points and 50 burn-in sweeps per chain.
    """
    return ModelSpec(correlation=CorrelationKind.EXCHANGEABLE,
                     sampler=SamplerConfig(n_draws=500, burn_in=50, n_chains=10),
                     lambda_grid=tuple(default_lambda_grid(grid_points)))


def replicate_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 1]).generate_state(1)[0])


def generate_replicate(design: SimDesign, index: int) -> LongitudinalDataset:
    rng = np.random.default_rng(np.random.SeedSequence([design.seed, index]))
    n, m, p = design.n_subjects, design.obs_per_subject, design.p
    subject = np.repeat(np.arange(n), m)
    X = rng.uniform(-1.0, 1.0, size=(n * m, p))
    t = rng.uniform(0.0, 1.0, size=n * m)
    b = rng.normal(0.0, np.sqrt(design.sigma2), size=n)
    eta = X @ design.beta + design.f_true(t) + b[subject]
    y = rng.poisson(np.exp(eta))
    return LongitudinalDataset.from_arrays(subject, t, y, X)


# ---------------------------------------------------------------------------
# one replicate


@dataclass
class ReplicateResult:
    index: int
    beta: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None
    f_hat: Optional[np.ndarray] = None
    f_se: Optional[np.ndarray] = None
    lambda_opt: float = float("nan")
    converged: bool = False
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def f_grid() -> np.ndarray:
    return np.linspace(0.0, 1.0, F_GRID_SIZE)


def gsmm_fitter(dataset: LongitudinalDataset, spec: ModelSpec, seed: int) -> ReplicateResult:
    """GCV-tuned fit with sandwich standard errors for beta and f."""
    from .tuning import sandwich_covariance, select_lambda

    rep = select_lambda(dataset, spec, seed=seed, compute_ell=False)
    res = rep.fit
    inf = sandwich_covariance(res)
    p = res.problem.p
    B = res.problem.f_basis(f_grid())
    cov_a = inf.covariance[p:, p:]
    f_se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", B, cov_a, B), 0.0, None))
    return ReplicateResult(-1, res.beta.copy(), inf.standard_errors[:p].copy(), B @ res.alpha, f_se,
                           rep.lambda_opt, bool(res.converged))


def _run_one(args) -> ReplicateResult:
    design, spec, fitter, index = args
    data = generate_replicate(design, index)
    try:
        out = fitter(data, spec, replicate_seed(design.seed, index))
    except Exception as exc:  # recorded, excluded from the summaries
        log.warning("replicate %d failed: %s", index, exc)
        return ReplicateResult(index, error=f"{type(exc).__name__}: {exc}")
    out.index = index
    return out


# ---------------------------------------------------------------------------
# summaries


@dataclass
class SimReport:
    design: dict
    replicates: int
    failures: int
    mse: float
    mean_squared_error: float
    C: float
    I: float
    under_fit: float
    correct_fit: float
    over_fit: float
    bias: list
    sd1: list
    sd2: list
    cp: list
    lambda_opt: list
    f_curve: dict
    mise_f: float
    replicate_beta: list = field(default_factory=list)
    replicate_C: list = field(default_factory=list)
    replicate_I: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(design: SimDesign, results: list[ReplicateResult]) -> SimReport:
    ok = [r for r in results if not r.failed]
    errors = [{"index": r.index, "error": r.error} for r in results if r.failed]
    beta0 = design.beta
    support = design.support
    p, s = design.p, int(support.sum())
    nan = float("nan")
    if not ok:
        return SimReport(_design_dict(design), len(results), len(errors), nan, nan, nan, nan, nan, nan, nan,
                         [nan] * p, [nan] * p, [nan] * p, [nan] * p, [], {}, nan, errors=errors)
    B = np.array([r.beta for r in ok])
    SE = np.array([r.se for r in ok])
    err = B - beta0
    zero = B == 0
    C_k = np.sum(zero & ~support, axis=1)
    I_k = np.sum(zero & support, axis=1)
    under = I_k > 0
    correct = ~under & (C_k == p - s)
    over = ~under & ~correct
    sd2 = err.std(axis=0, ddof=1) if len(ok) > 1 else np.full(p, nan)
    cover = np.abs(err) <= Z95 * SE

    t = f_grid()
    f0 = design.f_true(t)
    F = np.array([r.f_hat for r in ok])
    FS = np.array([r.f_se for r in ok])
    f_curve = {
        "t": t.tolist(),
        "true": f0.tolist(),
        "mean_fit": F.mean(axis=0).tolist(),
        "bias": (F.mean(axis=0) - f0).tolist(),
        "sd": (F.std(axis=0, ddof=1) if len(ok) > 1 else np.full(t.size, nan)).tolist(),
        "sd_sandwich": FS.mean(axis=0).tolist(),
        "coverage": np.mean(np.abs(F - f0) <= Z95 * FS, axis=0).tolist(),
    }
    sq = np.sum(err ** 2, axis=1)
    return SimReport(
        design=_design_dict(design), replicates=len(results), failures=len(errors),
        mse=float(np.sqrt(sq).mean()), mean_squared_error=float(sq.mean()),
        C=float(C_k.mean()), I=float(I_k.mean()),
        under_fit=float(under.mean()), correct_fit=float(correct.mean()), over_fit=float(over.mean()),
        bias=np.abs(err.mean(axis=0)).tolist(), sd1=SE.mean(axis=0).tolist(), sd2=list(map(float, sd2)),
        cp=cover.mean(axis=0).tolist(), lambda_opt=[float(r.lambda_opt) for r in ok],
        f_curve=f_curve, mise_f=float(np.mean((F - f0) ** 2)),
        replicate_beta=B.tolist(), replicate_C=C_k.tolist(), replicate_I=I_k.tolist(), errors=errors)


def _design_dict(design: SimDesign) -> dict:
    return {"name": design.name, "n_subjects": design.n_subjects, "p": design.p,
            "obs_per_subject": design.obs_per_subject, "true_beta": list(design.true_beta),
            "sigma2": design.sigma2, "replicates": design.replicates, "seed": design.seed}


def default_workers() -> int:
    raw = os.environ.get("PGSMM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"PGSMM_THREADS must be an integer, got {raw!r}") from None


def run_replicates(design: SimDesign, spec: Optional[ModelSpec] = None,
                   fitter: Optional[Callable] = None, replicates: Optional[int] = None,
                   workers: Optional[int] = None) -> list[ReplicateResult]:
    """Fit replicates ``0 .. R-1`` and return them in index order.

    ``fitter(dataset, spec, seed)`` returns a :class:`ReplicateResult`; the
    default is the GCV-tuned penalized fit.  Replicates run in ``workers``
    processes (``PGSMM_THREADS`` or 1 by default).
    """
    spec = spec or simulation_spec()
    fitter = fitter or gsmm_fitter
    R = design.replicates if replicates is None else replicates
    if R < 1:
        raise ValueError("replicates must be at least 1")
    workers = default_workers() if workers is None else max(1, int(workers))
    jobs = [(design, spec, fitter, k) for k in range(R)]
    if workers == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    return results


def run_study(design: SimDesign, spec: Optional[ModelSpec] = None,
              fitter: Optional[Callable] = None, replicates: Optional[int] = None,
              workers: Optional[int] = None) -> SimReport:
    """:func:`run_replicates` followed by :func:`summarize`."""
    return summarize(design, run_replicates(design, spec, fitter, replicates, workers))
