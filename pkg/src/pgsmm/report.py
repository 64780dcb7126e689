"""Fit reports and atomic file output."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from typing import Any, Optional

import numpy as np

SCHEMA_VERSION = 1
F_CURVE_POINTS = 101


def atomic_write(path, text: str) -> None:
    """Write ``text`` to a temp file next to ``path`` and rename it into place."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=folder, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def clean(obj: Any) -> Any:
    """Convert numpy values to JSON types; NaN and infinities become None."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj: Any) -> str:
    return json.dumps(clean(obj), indent=2, allow_nan=False) + "\n"


def csv_text(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                    for v in row])
    return buf.getvalue()


@dataclass
class Coefficient:
    name: str
    estimate: float
    se: Optional[float]
    lower: Optional[float]
    upper: Optional[float]
    active: bool


@dataclass
class FitReport:
    seed: int
    model: dict
    coefficients: list
    active_set: list
    lam: Optional[float]
    sigma: list
    rho: float
    phi: float
    ell_max: Optional[float]
    aic: Optional[float]
    bic: Optional[float]
    m_free: int
    diagnostics: dict
    f_curve: dict
    tuning: Optional[dict] = None
    inference: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    created: str = ""

    def to_dict(self) -> dict:
        d = clean(asdict(self))
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        d = dict(d)
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {d['schema_version']}")
        d["lam"] = d.pop("lambda", None)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_json(self) -> str:
        return dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        return cls.from_dict(json.loads(text))

    def coefficient_csv(self) -> str:
        rows = [[c["name"], c["estimate"], c["se"], c["lower"], c["upper"], int(c["active"])]
                for c in self.coefficients]
        return csv_text(["name", "estimate", "se", "lower", "upper", "active"], rows)

    @property
    def converged(self) -> bool:
        return bool(self.diagnostics.get("converged", False))


def build_report(fit_, inference, config_dict: dict, seed: int, tuning=None,
                 timestamp: Optional[str] = None) -> FitReport:
    """Assemble a :class:`FitReport` from a fit and its sandwich inference."""
    from .tuning import aic_bic, free_parameters

    pr = fit_.problem
    se = inference.standard_errors
    lo, hi = inference.wald_intervals[:, 0], inference.wald_intervals[:, 1]
    coefs = []
    for k, name in enumerate(pr.names):
        active = bool(k >= pr.p or fit_.theta[k] != 0)
        coefs.append(clean(asdict(Coefficient(name, fit_.theta[k], se[k], lo[k], hi[k], active))))
    m = free_parameters(fit_)
    ell = fit_.ell_max
    aic, bic = aic_bic(ell, m, pr.n) if np.isfinite(ell) else (None, None)
    dom = pr.spline.time_domain
    lo_t, hi_t = dom if dom is not None else (pr.dataset.time.min(), pr.dataset.time.max())
    t = np.linspace(lo_t, hi_t, F_CURVE_POINTS)
    B = pr.f_basis(t)
    cov_a = inference.covariance[pr.p:, pr.p:]
    f_se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", B, cov_a, B), 0.0, None))
    acc = fit_.bank.acceptance
    diagnostics = {
        "converged": bool(fit_.converged),
        "n_outer": int(fit_.n_outer),
        "delta_history": list(fit_.delta_history),
        "u_norm": fit_.u_norm,
        "flags": sorted(set(fit_.flags) | set(inference.flags)),
        "acceptance": None if acc is None else np.asarray(acc, dtype=float).ravel().tolist(),
        "mean_acceptance": fit_.acceptance_rate(),
    }
    rep = FitReport(
        seed=int(seed), model=config_dict, coefficients=coefs,
        active_set=[pr.names[k] for k in fit_.active],
        lam=float(fit_.penalty.lam), sigma=np.atleast_2d(fit_.sigma).tolist(), rho=float(fit_.rho),
        phi=float(fit_.phi), ell_max=ell, aic=aic, bic=bic, m_free=int(m),
        diagnostics=clean(diagnostics),
        f_curve=clean({"t": t, "f_hat": B @ fit_.alpha, "se": f_se}),
        tuning=None if tuning is None else clean(tuning.to_dict()),
        inference={"level": inference.level, "bread": inference.bread},
        created=timestamp if timestamp is not None else datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    # normalise to JSON types so that a parsed copy compares equal
    return FitReport.from_dict(rep.to_dict())
