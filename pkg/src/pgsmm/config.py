"""YAML run configuration: data schema, model settings and master seed."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Optional

import yaml

from .correlation import CorrelationKind
from .data import INTERCEPT
from .families import Family, FamilyKind, LinkKind, LinkSpec
from .model import ModelSpec, SolverConfig
from .sampler import SamplerConfig
from .splines import KnotPlacement, SplineConfig


class ConfigError(ValueError):
    pass


@dataclass
class InferenceConfig:
    level: float = 0.95
    bread: str = "observed"
    per_draw_meat: bool = False


@dataclass
class RunConfig:
    spec: ModelSpec = field(default_factory=ModelSpec)
    data: dict = field(default_factory=dict)
    seed: int = 0
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    grid: Optional[dict] = None  # {"points", "lo", "hi"} when no explicit values


DEFAULT_DATA = {"subject": "subject", "time": "time", "response": "y", "fixed": [],
                "random": [INTERCEPT], "interactions": [], "standardize": False}
DEFAULT_GRID = {"points": 30, "lo": 0.01, "hi": 2.0}


def _section(raw: dict, key: str) -> dict:
    val = raw.get(key) or {}
    if not isinstance(val, dict):
        raise ConfigError(f"section {key!r} must be a mapping")
    return val


def _pick(cls, values: dict, section: str, rename: Optional[dict] = None):
    rename = rename or {}
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, val in values.items():
        name = rename.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {key!r} in section {section!r}")
        kwargs[name] = val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


def config_from_dict(raw: dict) -> RunConfig:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {"seed", "data", "model", "spline", "penalty", "sampler", "solver", "inference"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(extra))}")

    data = dict(DEFAULT_DATA)
    data.update(_section(raw, "data"))

    model = _section(raw, "model")
    unknown = set(model) - {"family", "link", "dispersion", "correlation", "ell_draws"}
    if unknown:
        raise ConfigError(f"unknown key(s) in section 'model': {', '.join(sorted(unknown))}")
    try:
        family = Family(FamilyKind(model.get("family", "poisson")), float(model.get("dispersion", 1.0)))
        link = LinkSpec(LinkKind(model["link"])) if model.get("link") else None
        corr = CorrelationKind(model.get("correlation", "exchangeable"))
    except ValueError as exc:
        raise ConfigError(f"section 'model': {exc}") from None

    spline = _pick(SplineConfig, _section(raw, "spline"), "spline",
                   {"interior_knots": "interior_knot_count"})
    sampler = _pick(SamplerConfig, _section(raw, "sampler"), "sampler")
    solver = _pick(SolverConfig, _section(raw, "solver"), "solver")
    inference = _pick(InferenceConfig, _section(raw, "inference"), "inference")
    if inference.bread not in ("observed", "complete"):
        raise ConfigError("inference.bread must be 'observed' or 'complete'")

    pen = _section(raw, "penalty")
    unknown = set(pen) - {"lambda", "a", "epsilon", "grid", "values", "gcv_weights"}
    if unknown:
        raise ConfigError(f"unknown key(s) in section 'penalty': {', '.join(sorted(unknown))}")
    grid_spec = None
    values = pen.get("values")
    if values is None:
        grid_spec = dict(DEFAULT_GRID)
        grid_spec.update(pen.get("grid") or {})
        from .model import default_lambda_grid
        try:
            values = tuple(default_lambda_grid(int(grid_spec["points"]), float(grid_spec["lo"]),
                                               float(grid_spec["hi"])))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"penalty.grid: {exc}") from None
    try:
        spec = ModelSpec(family=family, link=link, correlation=corr, spline=spline, sampler=sampler,
                         solver=solver, scad_a=float(pen.get("a", 3.7)),
                         scad_epsilon=float(pen.get("epsilon", 1e-6)),
                         lam=None if pen.get("lambda") is None else float(pen["lambda"]),
                         lambda_grid=tuple(float(v) for v in values),
                         ell_draws=int(model.get("ell_draws", 2000)),
                         gcv_weights=pen.get("gcv_weights", "reference"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    return RunConfig(spec, data, seed, inference, grid_spec)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    return config_from_dict(raw)


def config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    spec = cfg.spec
    sp, sa, so = spec.spline, spec.sampler, spec.solver
    penalty: dict[str, Any] = {"lambda": spec.lam, "a": spec.scad_a, "epsilon": spec.scad_epsilon,
                               "gcv_weights": spec.gcv_weights}
    if cfg.grid is not None:
        penalty["grid"] = dict(cfg.grid)
    else:
        penalty["values"] = [float(v) for v in spec.grid()]
    return {
        "seed": cfg.seed,
        "data": dict(cfg.data),
        "model": {"family": spec.family.kind.value, "link": spec.link.kind.value,
                  "dispersion": spec.family.dispersion, "correlation": spec.correlation.value,
                  "ell_draws": spec.ell_draws},
        "spline": {"degree": sp.degree, "interior_knots": sp.interior_knot_count,
                   "knot_placement": KnotPlacement(sp.knot_placement).value,
                   "smoothness_order": sp.smoothness_order,
                   "time_domain": None if sp.time_domain is None else list(sp.time_domain)},
        "penalty": penalty,
        "sampler": {"n_draws": sa.n_draws, "burn_in": sa.burn_in, "thinning": sa.thinning,
                    "n_chains": sa.n_chains, "seed": sa.seed},
        "solver": {f.name: getattr(so, f.name) for f in fields(so)},
        "inference": {"level": cfg.inference.level, "bread": cfg.inference.bread,
                      "per_draw_meat": cfg.inference.per_draw_meat},
    }


def dump_config(cfg: Optional[RunConfig] = None) -> str:
    if cfg is None:
        cfg = config_from_dict({})
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
