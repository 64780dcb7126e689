"""Command line: ``pgsmm fit | tune | simulate | print-config``.

Exit codes: 0 success, 1 unexpected failure, 2 bad input (config, data,
arguments), 3 the fit did not converge (the report is still written when a
fit exists).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .config import ConfigError, RunConfig, config_from_dict, config_to_dict, dump_config, load_config
from .data import DataError, load_csv
from .report import FitReport, atomic_write, build_report, csv_text, dumps

EXIT_OK, EXIT_ERROR, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2, 3

log = logging.getLogger("pgsmm")


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# fit / tune


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise InputError("--seed must be nonnegative")
        cfg.seed = args.seed
    return cfg


def _inference(fit_, cfg: RunConfig):
    from .estimating import SingularSystemError
    from .tuning import InferenceReport, sandwich_covariance

    inf = cfg.inference
    try:
        return sandwich_covariance(fit_, level=inf.level, per_draw=inf.per_draw_meat, bread=inf.bread)
    except SingularSystemError:
        P = fit_.problem.P
        nan = np.full(P, np.nan)
        return InferenceReport(np.full((P, P), np.nan), nan, np.column_stack([nan, nan]),
                               inf.level, inf.bread, ["sandwich_singular"])


def _write_report(report: FitReport, out: Path, coef_csv: Optional[Path]) -> None:
    atomic_write(out, report.to_json())
    atomic_write(coef_csv or out.with_suffix(".csv"), report.coefficient_csv())
    log.info("wrote %s", out)


def _gcv_trace(tuning) -> str:
    rows = [[float(l), g, r, d, int(c)] for l, g, r, d, c in zip(
        tuning.lambda_grid, tuning.gcv_values, tuning.rss_values, tuning.effective_params, tuning.converged)]
    rows = [[v if not isinstance(v, float) or np.isfinite(v) else None for v in row] for row in rows]
    return csv_text(["lambda", "gcv", "rss", "effective_params", "converged"], rows)


def _run_fit(args, force_tune: bool) -> int:
    from .estimating import fit
    from .tuning import select_lambda

    cfg = _load(args)
    lam = getattr(args, "lam", None)
    if lam is None and not force_tune:
        lam = cfg.spec.lam
    if lam is not None and lam < 0:
        raise InputError("lambda must be nonnegative")
    data = load_csv(args.data, cfg.data)
    spec = cfg.spec
    tuning = None
    if lam is None:
        tuning = select_lambda(data, spec, seed=cfg.seed)
        res = tuning.fit
        log.info("selected lambda %.6g", tuning.lambda_opt)
    else:
        res = fit(data, spec, lam=lam, seed=cfg.seed)
    cfg_dict = config_to_dict(cfg)
    if lam is not None:
        cfg_dict["penalty"]["lambda"] = float(lam)
    report = build_report(res, _inference(res, cfg), cfg_dict, cfg.seed, tuning,
                          timestamp="" if args.no_timestamp else None)
    out = Path(args.out)
    _write_report(report, out, Path(args.coef_csv) if args.coef_csv else None)
    if tuning is not None:
        atomic_write(Path(args.trace) if getattr(args, "trace", None) else out.with_name(out.stem + "_gcv.csv"),
                     _gcv_trace(tuning))
    if not res.converged:
        print(f"warning: fit did not converge (flags: {', '.join(res.flags)}); report written to {out}",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_fit(args) -> int:
    return _run_fit(args, force_tune=False)


def cmd_tune(args) -> int:
    return _run_fit(args, force_tune=True)


# ---------------------------------------------------------------------------
# simulate


def _design_from_args(args):
    from .simulation import SimDesign, get_preset

    if args.design:
        try:
            with open(args.design, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise InputError(f"design file not found: {args.design}") from None
        names = {f.name for f in dataclasses.fields(SimDesign)} - {"f_true"}
        unknown = set(raw) - names
        if unknown:
            raise InputError(f"unknown design key(s): {', '.join(sorted(unknown))}")
        try:
            design = SimDesign(**raw)
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad design: {exc}") from None
    elif args.preset:
        try:
            design = get_preset(args.preset)
        except KeyError as exc:
            raise InputError(exc.args[0]) from None
    else:
        raise InputError("give --preset NAME or --design FILE (see --list-presets)")
    changes = {}
    if args.replicates is not None:
        if args.replicates < 1:
            raise InputError("--replicates must be at least 1")
        changes["replicates"] = args.replicates
    if args.seed is not None:
        if args.seed < 0:
            raise InputError("--seed must be nonnegative")
        changes["seed"] = args.seed
    return design.with_(**changes) if changes else design


def sim_tables(report) -> dict[str, str]:
    d = report.design
    t1 = csv_text(
        ["n", "p", "replicates", "failures", "mse", "mean_squared_error", "C", "I",
         "under_fit", "correct_fit", "over_fit", "mise_f"],
        [[d["n_subjects"], d["p"], report.replicates, report.failures, report.mse, report.mean_squared_error,
          report.C, report.I, report.under_fit, report.correct_fit, report.over_fit, report.mise_f]])
    rows = []
    for k, b in enumerate(d["true_beta"]):
        if b != 0:
            rows.append([f"beta{k + 1}", b, report.bias[k], report.sd1[k], report.sd2[k], report.cp[k]])
    t2 = csv_text(["coefficient", "true", "bias", "sd1", "sd2", "cp"], rows)
    f = report.f_curve
    keys = ["t", "true", "mean_fit", "bias", "sd", "sd_sandwich", "coverage"]
    fc = csv_text(keys, [list(r) for r in zip(*(f[k] for k in keys))] if f else [])
    return {"table1.csv": t1, "table2.csv": t2, "f_curve.csv": fc}


def cmd_simulate(args) -> int:
    from .simulation import PRESETS, run_study, simulation_spec

    if args.list_presets:
        for name, d in PRESETS.items():
            tag = "  (long-running)" if d.long_running else ""
            print(f"{name}\tn={d.n_subjects}\tp={d.p}{tag}")
        return EXIT_OK
    design = _design_from_args(args)
    workers = args.threads
    if workers is not None and workers < 1:
        raise InputError("--threads must be at least 1")
    spec = simulation_spec(args.grid_points) if args.grid_points else simulation_spec()
    report = run_study(design, spec, workers=workers)
    out = Path(args.out_dir)
    atomic_write(out / "sim_report.json", dumps(report.to_dict()))
    for name, text in sim_tables(report).items():
        atomic_write(out / name, text)
    print(f"{design.name or 'custom'}: MSE {report.mse:.4f}  C {report.C:.2f}  I {report.I:.2f}  "
          f"correct-fit {report.correct_fit:.2f}  failures {report.failures}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# print-config


def cmd_print_config(args) -> int:
    cfg = load_config(args.config) if args.config else None
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pgsmm", description="Penalized semiparametric mixed models for longitudinal data.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def fit_args(sp, with_lambda):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--data", required=True, help="long-format CSV")
        sp.add_argument("--out", required=True, help="FitReport JSON path")
        sp.add_argument("--coef-csv", help="coefficient CSV path (default: OUT with .csv)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--no-timestamp", action="store_true", help="leave the report's created field empty")
        if with_lambda:
            sp.add_argument("--lambda", dest="lam", type=float, help="fixed tuning parameter; tunes by GCV if absent")

    fp = sub.add_parser("fit", help="fit at a fixed lambda, or tune when none is given")
    fit_args(fp, True)
    fp.set_defaults(func=cmd_fit)

    tp = sub.add_parser("tune", help="select lambda by GCV over the configured grid, then fit")
    fit_args(tp, False)
    tp.add_argument("--trace", help="GCV trace CSV path (default: OUT stem + _gcv.csv)")
    tp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("simulate", help="run a simulation study")
    sp.add_argument("--preset", help="named design, see --list-presets")
    sp.add_argument("--design", help="YAML file with SimDesign fields")
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--grid-points", type=int, help="lambda grid size (default 15)")
    sp.add_argument("--out-dir", default="sim_out")
    sp.add_argument("--threads", type=int, help="worker processes (default: PGSMM_THREADS or 1)")
    sp.add_argument("--list-presets", action="store_true")
    sp.set_defaults(func=cmd_simulate)

    cp = sub.add_parser("print-config", help="print the full configuration with defaults filled in")
    cp.add_argument("--config", help="configuration to resolve (defaults when omitted)")
    cp.set_defaults(func=cmd_print_config)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .tuning import TuningError

    try:
        return args.func(args)
    except (InputError, ConfigError, DataError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TuningError as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except Exception as exc:  # noqa: BLE001 - last-resort reporting
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
