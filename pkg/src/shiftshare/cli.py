"""Command-line interface.

Every subcommand writes a JSON report (schema version "1") holding the full
resolved configuration and the results.  Fields that vary between identical
runs live under the top-level ``"timestamp"`` key only.

Exit codes: 0 success, 2 invalid input or arguments, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import SCHEMES, BootstrapConfig
from .data import Schema, load_csv, stack_panel
from .diagnostics import (
    builtin_transforms,
    share_corr_check,
    sign_diagnostic_shares,
    sign_diagnostic_shocks,
    within_cluster_shock_cov,
)
from .errors import DataError, NumericalError
from .longpanel import longpanel_fit
from .overid_shares import run_shares_test
from .overid_shocks import DEFAULT_LAMBDA, MomentFunctionSet, logit_moment_set, ridge_shock_residual, run_shocks_test
from .simulate import (
    SHARES_TABLE_ROWS,
    SHOCKS_TABLE_ROWS,
    export_base,
    fit_shares_dgp,
    fit_shocks_dgp,
    rejection_study,
    synthetic_shares_base,
    synthetic_shocks_base,
)
from .tsls import fit_tsls

SCHEMA_VERSION = "1"
THREADS_ENV = "SHIFTSHARE_THREADS"
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


# ---------------------------------------------------------------------------
# JSON helpers
# ---------------------------------------------------------------------------


def _plain(obj):
    """Convert numpy scalars/arrays to JSON types; non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dump_report(report: dict) -> str:
    return json.dumps(_plain(report), indent=2, sort_keys=False, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_data_args(p, required=True):
    p.add_argument("--data", required=required, help="observation CSV (one row per unit and period)")
    p.add_argument("--shocks", required=required, help="shock CSV (long or wide layout)")
    p.add_argument("--config", required=required, help="JSON file mapping roles to column names")


def _add_boot_args(p):
    p.add_argument("--B", type=int, default=1000, help="bootstrap draws (default 1000)")
    p.add_argument("--scheme", choices=SCHEMES, default="gaussian", help="multiplier distribution")
    p.add_argument("--alpha", type=float, default=0.05, help="test level (default 0.05)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")


def _add_common(p):
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads (default: ${THREADS_ENV} or 1); results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftshare", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("overid-shares", help="overidentification test with exogenous shares")
    _add_data_args(p)
    p.add_argument("--sic", type=int, choices=(2, 3, 4), help="aggregate moment shares to this many digits")
    grp = p.add_mutually_exclusive_group()
    grp.add_argument("--pool-time", action="store_true", help="sum each sector's moment over periods")
    grp.add_argument("--period", help="use the moments of one period (label)")
    p.add_argument("--refit-per-period", action="store_true",
                   help="with --period, refit TSLS on that period only")
    _add_boot_args(p)
    _add_common(p)

    p = sub.add_parser("overid-shocks", help="overidentification test with exogenous shocks")
    _add_data_args(p)
    p.add_argument("--ridge-lambda", type=float, default=DEFAULT_LAMBDA, help="ridge penalty (default 1e-5)")
    p.add_argument("--e-method", choices=("ridge", "projection"), default="ridge")
    p.add_argument("--q-matrix", help="CSV (p rows, no header) of aggregate covariates for --e-method projection")
    p.add_argument("--moments", default="logit20", help="'logit20' or a JSON moment spec file")
    _add_boot_args(p)
    _add_common(p)

    p = sub.add_parser("longpanel-se", help="long-panel standard error of beta")
    _add_data_args(p)
    p.add_argument("--bandwidth", default="auto", help="Bartlett lag truncation or 'auto'")
    p.add_argument("--no-bias-correction", action="store_true",
                   help="do not remove the panel noise from the time-series variance")
    p.add_argument("--no-small-sample-correction", action="store_true",
                   help="do not rescale the HAC estimate for the zero-sum score")
    _add_common(p)

    p = sub.add_parser("diagnostics", help="heterogeneous-effects diagnostics")
    _add_data_args(p)
    p.add_argument("--threshold", type=float, default=0.1, help="share correlation flag threshold")
    p.add_argument("--ridge-lambda", type=float, default=DEFAULT_LAMBDA, help="ridge penalty for shock residuals")
    p.add_argument("--control", help="control used by the built-in sign-diagnostic transforms")
    _add_common(p)

    p = sub.add_parser("simulate", help="rejection-rate study under a fitted null DGP")
    _add_data_args(p, required=False)
    p.add_argument("--dgp", choices=("shares", "shocks"), required=True)
    p.add_argument("--reps", type=int, default=1000, help="Monte Carlo replications")
    p.add_argument("--row", action="append", metavar="SIC:SELECTION",
                   help="shares configuration row such as 2:pooled or 4:all (repeatable)")
    p.add_argument("--lambdas", type=float, nargs="+", help="ridge penalties for the shocks rows")
    p.add_argument("--fit-lambda", type=float, default=0.1, help="ridge penalty when fitting the shocks DGP")
    p.add_argument("--table", help="also write the aligned-text table here")
    p.add_argument("--export-base", metavar="DIR",
                   help="write the built-in base for --dgp as CSV files and exit")
    _add_boot_args(p)
    _add_common(p)

    p = sub.add_parser("validate", help="load and validate a dataset")
    _add_data_args(p)
    _add_common(p)
    return parser


def resolve_threads(arg) -> int:
    if arg is not None:
        threads = arg
    else:
        raw = os.environ.get(THREADS_ENV)
        try:
            threads = int(raw) if raw else 1
        except ValueError:
            raise DataError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise DataError("thread count must be positive")
    return threads


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _load(args):
    for flag in ("data", "shocks", "config"):
        path = getattr(args, flag)
        if not Path(path).is_file():
            raise DataError(f"--{flag} file not found: {path}")
    schema = Schema.from_json(args.config)
    return load_csv(args.data, args.shocks, schema), schema


def _data_echo(args, schema):
    return {"data": args.data, "shocks": args.shocks, "config": args.config, "schema": schema.to_dict()}


def _boot(args, threads):
    try:
        return BootstrapConfig(B=args.B, scheme=args.scheme, alpha=args.alpha, seed=args.seed, threads=threads)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def cmd_overid_shares(args, threads):
    ds, schema = _load(args)
    selection = "pooled" if args.pool_time else (args.period if args.period is not None else "all")
    if args.refit_per_period and args.period is None:
        raise DataError("--refit-per-period requires --period")
    cfg = _boot(args, threads)
    res = run_shares_test(ds, args.sic, selection, cfg, args.refit_per_period)
    config = {**_data_echo(args, schema), "sic": args.sic, "period_selection": selection,
              "refit_per_period": args.refit_per_period, "bootstrap": cfg.echo()}
    return config, res.to_dict()


def _read_q_matrix(path, p):
    try:
        Q = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError:
        raise DataError(f"Q matrix file not found: {path}") from None
    except ValueError as exc:
        raise DataError(f"Q matrix {path} is not numeric CSV: {exc}") from None
    if Q.shape[0] != p:
        raise DataError(f"Q matrix has {Q.shape[0]} rows, expected one per sector ({p})")
    return Q


def cmd_overid_shocks(args, threads):
    ds, schema = _load(args)
    g = logit_moment_set() if args.moments == "logit20" else MomentFunctionSet.from_json(args.moments)
    Q = None
    if args.e_method == "projection":
        if not args.q_matrix:
            raise DataError("--e-method projection requires --q-matrix")
        Q = _read_q_matrix(args.q_matrix, ds.p)
    cfg = _boot(args, threads)
    res = run_shocks_test(ds, g, args.e_method, args.ridge_lambda, Q, cfg)
    config = {**_data_echo(args, schema), "e_method": args.e_method,
              "ridge_lambda": args.ridge_lambda if args.e_method == "ridge" else None,
              "q_matrix": args.q_matrix, "moments": g.to_dict()["moments"], "bootstrap": cfg.echo()}
    return config, res.to_dict()


def cmd_longpanel(args, threads):
    ds, schema = _load(args)
    bw = args.bandwidth
    if bw != "auto":
        try:
            bw = int(bw)
        except ValueError:
            raise DataError(f"--bandwidth must be 'auto' or an integer, got {bw!r}") from None
    fit, dec, var = longpanel_fit(ds, bw, not args.no_bias_correction, not args.no_small_sample_correction)
    config = {**_data_echo(args, schema), "bandwidth": args.bandwidth,
              "bias_correction": not args.no_bias_correction,
              "small_sample_correction": not args.no_small_sample_correction,
              "estimator": "unweighted IV without controls"}
    return config, {"beta_hat": fit.beta, **var.to_dict()}


def cmd_diagnostics(args, threads):
    ds, schema = _load(args)
    transforms = builtin_transforms(ds, args.control)
    fit = fit_tsls(stack_panel(ds), ds.control_names)
    e_hat = ridge_shock_residual(ds, fit.pi_hat, args.ridge_lambda)
    result = {
        "share_correlation": share_corr_check(ds, args.threshold),
        "sign_shares": sign_diagnostic_shares(ds, transforms),
        "sign_shocks": sign_diagnostic_shocks(ds, e_hat, transforms),
    }
    if ds.T >= 2:
        result["within_cluster_shock_cov"] = within_cluster_shock_cov(e_hat, ds.sector_cluster, ds.sector_code)
    else:
        result["within_cluster_shock_cov"] = {"skipped": "needs at least 2 periods"}
    config = {**_data_echo(args, schema), "threshold": args.threshold, "ridge_lambda": args.ridge_lambda,
              "transforms": [t.name for t in transforms]}
    return config, result


def _parse_rows(specs):
    rows = []
    for spec in specs:
        level, _, sel = spec.partition(":")
        try:
            lv = int(level)
        except ValueError:
            raise DataError(f"bad --row {spec!r}; expected SIC:SELECTION such as 2:pooled") from None
        if lv not in (2, 3, 4):
            raise DataError(f"--row SIC level must be 2, 3 or 4, got {lv}")
        rows.append({"sic_level": lv, "period_selection": sel or "all"})
    return rows


def cmd_simulate(args, threads):
    given = [args.data, args.shocks, args.config]
    if any(given) and not all(given):
        raise DataError("--data, --shocks and --config must be given together")
    if args.reps < 1:
        raise DataError("--reps must be positive")
    if all(given):
        ds, schema = _load(args)
        base = _data_echo(args, schema)
    else:
        ds = synthetic_shares_base() if args.dgp == "shares" else synthetic_shocks_base()
        base = {"builtin": args.dgp}
    cfg = _boot(args, threads)
    if args.dgp == "shares":
        dgp = fit_shares_dgp(ds, seed=args.seed)
        rows = _parse_rows(args.row) if args.row else [dict(r) for r in SHARES_TABLE_ROWS]
    else:
        dgp = fit_shocks_dgp(ds, args.fit_lambda, seed=args.seed)
        rows = [{"lambda": lam} for lam in args.lambdas] if args.lambdas else [dict(r) for r in SHOCKS_TABLE_ROWS]
    table = rejection_study(dgp, args.dgp, rows, args.reps, args.seed, cfg.B, cfg.scheme, threads)
    if args.table:
        Path(args.table).write_text(table.to_text(), encoding="utf-8")
    config = {"base": base, "dgp": args.dgp, "reps": args.reps, "rows": rows,
              "fit_lambda": args.fit_lambda if args.dgp == "shocks" else None, "bootstrap": cfg.echo()}
    return config, table.to_dict()


def cmd_validate(args, threads):
    ds, schema = _load(args)
    sums = ds.s_z.sum(axis=2)
    result = {
        "valid": True,
        "n": ds.n, "T": ds.T, "p": ds.p, "d": ds.d,
        "periods": list(ds.periods),
        "controls": list(ds.control_names),
        "n_obs_clusters": int(np.unique(ds.obs_cluster.astype(str)).size),
        "n_sector_clusters": int(np.unique(ds.sector_cluster.astype(str)).size),
        "share_row_sum": {"min": float(sums.min()), "max": float(sums.max())},
        "has_regressor_shares": ds.s_x is not None,
    }
    return _data_echo(args, schema), result


COMMANDS = {
    "overid-shares": cmd_overid_shares,
    "overid-shocks": cmd_overid_shocks,
    "longpanel-se": cmd_longpanel,
    "diagnostics": cmd_diagnostics,
    "simulate": cmd_simulate,
    "validate": cmd_validate,
}


def run(argv=None) -> int:
    """Parse ``argv``, run the subcommand and return the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    if args.command == "simulate" and args.export_base:
        try:
            paths = export_base(args.dgp, args.export_base)
        except (DataError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INPUT
        for key, path in paths.items():
            print(f"{key}: {path}")
        return EXIT_OK

    start = time.perf_counter()
    try:
        threads = resolve_threads(args.threads)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            config, result = COMMANDS[args.command](args, threads)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL

    messages = list(dict.fromkeys(str(w.message) for w in caught))
    for m in messages:
        print(f"warning: {m}", file=sys.stderr)
    report = {
        "schema_version": SCHEMA_VERSION,
        "command": args.command,
        "package_version": __version__,
        "config": config,
        "result": result,
        "warnings": messages,
        "timestamp": {
            "utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "wall_time_seconds": time.perf_counter() - start,
        },
    }
    text = dump_report(report)
    if args.out:
        try:
            Path(args.out).write_text(text, encoding="utf-8")
        except OSError as exc:
            print(f"error: cannot write report: {exc}", file=sys.stderr)
            return EXIT_INPUT
    else:
        sys.stdout.write(text)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
