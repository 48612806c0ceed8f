"""Command-line interface.

Exit codes: 0 success, 1 user error (bad flags, data or formula), 2 fit or
numerical failure. Tables and data go to standard output; warnings, timing
and errors go to standard error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    FACTOR,
    Dataset,
    DatasetError,
    combine_factors,
    load_long_csv,
    make_factor,
    mark_series_starts,
    to_ordered_treatment,
    write_csv,
)
from .diagnostics import DiagnosticsError, acf_split, residuals
from .engine.assemble import ModelSpecError
from .engine.model import SCHEMA, FittedModel, fit
from .engine.pls import FitError
from .formula import FormulaError
from .inference import (
    InferenceError,
    aic,
    compare_ml,
    format_aic,
    predict_diff,
    predict_smooth,
    predict_surface,
    summarize,
)
from .simgen import METHODS, VARIANTS, SimConfig, gen_words, run_power_harness, run_type1_harness


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _warn_to_stderr(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


# -- argument helpers ---------------------------------------------------------------------


def _pair(text: str, sep: str, what: str) -> tuple[str, str]:
    if sep not in text:
        raise UsageError(f"{what} must look like A{sep}B, got {text!r}")
    a, b = text.split(sep, 1)
    if not a or not b:
        raise UsageError(f"{what} must look like A{sep}B, got {text!r}")
    return a.strip(), b.strip()


def _conds(items: list[str] | None) -> dict:
    out = {}
    for it in items or []:
        k, v = _pair(it, "=", "--cond")
        try:
            out[k] = float(v)
        except ValueError:
            out[k] = v
    return out


def _floats(text: str, n: int, what: str) -> tuple[float, ...]:
    parts = text.split(",")
    try:
        vals = tuple(float(p) for p in parts)
    except ValueError:
        raise UsageError(f"{what} expects {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what} expects {n} comma-separated numbers, got {text!r}")
    return vals


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _preprocess(d: Dataset, meta: dict) -> Dataset:
    """Apply the column transformations recorded in a model's metadata."""
    for col in meta.get("factor", []):
        c = d[col]
        if not c.is_factor:
            d = d.with_column(make_factor(col, [repr(float(v)) if v != int(v) else str(int(v))
                                                for v in c.data]), replace=True)
    for a, b, new in meta.get("combine", []):
        d = combine_factors(d, a, b, new)
    for col, ref, new in meta.get("ordered", []):
        d = to_ordered_treatment(d, col, ref, new)
    return d


def _parse_meta(args) -> dict:
    meta = {"factor": list(args.factor or []), "combine": [], "ordered": []}
    for spec in args.combine or []:
        ab, new = _pair(spec, "=", "--combine")
        a, b = _pair(ab, ",", "--combine")
        meta["combine"].append([a, b, new])
    for spec in args.ordered or []:
        col, rest = _pair(spec, "=", "--ordered")
        ref, new = (rest.split(":", 1) + [None])[:2] if ":" in rest else (rest, None)
        meta["ordered"].append([col, ref, new])
    return meta


def _load_model(path: str) -> FittedModel:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such model file: {path}")
    try:
        return FittedModel.load(p)
    except (ValueError, KeyError) as e:
        raise UsageError(f"{path}: not a valid model file ({e})") from None


def _series(d: Dataset, series: str | None, order: str | None):
    if bool(series) != bool(order):
        raise UsageError("--series and --order must be given together")
    return mark_series_starts(d, series, order) if series else None


# -- subcommands ------------------------------------------------------------------------------


def cmd_fit(args) -> int:
    if args.rho is not None and not (args.series and args.order):
        raise UsageError("--rho needs both --series and --order to mark where each series starts")
    meta = _parse_meta(args)
    d = load_long_csv(args.data, drop_na=args.drop_na)
    d = _preprocess(d, meta)
    starts = _series(d, args.series, args.order)
    meta.update({"series": args.series, "order": args.order, "drop_na": args.drop_na})
    t0 = time.perf_counter()
    m = fit(args.formula, d, args.method, rho=args.rho, starts=starts)
    elapsed = time.perf_counter() - t0
    m.meta = meta
    if args.out:
        m.save(args.out)
    print(summarize(m).to_text())
    print(f"fit time: {elapsed:.3f} s elapsed", file=sys.stderr)
    if not m.converged:
        print("warning: smoothing parameter search did not fully converge", file=sys.stderr)
    return 0


def cmd_summary(args) -> int:
    print(summarize(_load_model(args.model)).to_text())
    return 0


def cmd_compare(args) -> int:
    full, reduced = _load_model(args.full), _load_model(args.reduced)
    names = (Path(args.full).stem, Path(args.reduced).stem)
    try:
        res = compare_ml(full, reduced, names)
    except InferenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(res.to_text())
    return 0


def cmd_aic(args) -> int:
    models = [_load_model(p) for p in args.models]
    print(format_aic(aic(models, [Path(p).stem for p in args.models])))
    return 0


def cmd_predict(args) -> int:
    m = _load_model(args.model)
    g = predict_smooth(m, args.view, _conds(args.cond), args.exclude_random, args.grid_n, args.level)
    _write(g.to_csv(), args.out)
    return 0


def cmd_diff(args) -> int:
    m = _load_model(args.model)
    factor, levels = _pair(args.comp, "=", "--comp")
    high, low = _pair(levels, ",", "--comp")
    g = predict_diff(m, args.view, {factor: (high, low)}, _conds(args.cond), args.exclude_random,
                     args.grid_n, args.level)
    _write(g.to_csv(), args.out)
    return 0


def cmd_surface(args) -> int:
    m = _load_model(args.model)
    v1, v2 = _pair(args.view, ",", "--view")
    n1, n2 = (int(v) for v in _floats(args.grid, 2, "--grid"))
    ylim = _floats(args.ylim, 2, "--ylim") if args.ylim else None
    s = predict_surface(m, (v1, v2), _conds(args.cond), (n1, n2), ylim, args.exclude_random)
    _write(s.to_csv(), args.out)
    return 0


def cmd_acf(args) -> int:
    m = _load_model(args.model)
    if args.normalized and m.ar is None:
        raise UsageError("--normalized needs a model fitted with an AR1 error model (--rho); "
                         "this model has none")
    meta = m.meta or {}
    d = _preprocess(load_long_csv(args.data, drop_na=meta.get("drop_na", False)), meta)
    m.with_data(d)
    series = args.series or meta.get("series")
    order = args.order or meta.get("order")
    idx = _series(d, series, order)
    if idx is None:
        if m.series_starts is None:
            raise UsageError("give --series and --order so residuals can be split by series")
        flags = m.series_starts
    else:
        flags = idx.start_flags
    e = residuals(m, "normalized" if args.normalized else "raw")
    table = acf_split(e, flags, args.max_lag)
    if args.sketch:
        print(table.sketch(), file=sys.stderr)
    _write(table.to_csv(), args.out)
    return 0


def _sim_config(args, effect_default: float) -> SimConfig:
    effect = effect_default if args.effect is None else args.effect
    return SimConfig(n_traj=args.n_traj, n_points=args.n_points, effect=effect, rho=args.sim_rho,
                     noise_sd=args.noise_sd, random_amplitude=args.amplitude, seed=args.seed)


def cmd_simulate(args) -> int:
    d = gen_words(_sim_config(args, 100.0))
    write_csv(d, args.out or sys.stdout)
    return 0


def cmd_harness(args) -> int:
    cfg = _sim_config(args, 0.0)
    try:
        methods = tuple(int(v) for v in args.methods.split(","))
    except ValueError:
        raise UsageError(f"--methods expects comma-separated method numbers, got {args.methods!r}") from None
    run = run_type1_harness if cfg.effect == 0 else run_power_harness
    report = run(cfg, args.replicates, methods, args.variant, args.jobs)
    if report.failures:
        print(f"warning: {report.failures} replicate fits failed", file=sys.stderr)
    _write(report.to_json(), args.out)
    return 0


# -- parser --------------------------------------------------------------------------------------


def _grid_flags(p):
    p.add_argument("--cond", action="append", metavar="VAR=VALUE",
                   help="hold a covariate at a value (repeatable); defaults are medians and reference levels")
    p.add_argument("--exclude-random", action="store_true", help="drop random-effect terms from the prediction")
    p.add_argument("--grid-n", type=int, default=100)
    p.add_argument("--level", type=float, default=0.95, help="confidence level (default 0.95)")
    p.add_argument("--out", help="output CSV (default: standard output)")


def _sim_flags(p):
    p.add_argument("--preset", choices=["words"], default="words")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--n-traj", type=int, default=25, help="trajectories per word")
    p.add_argument("--n-points", type=int, default=11)
    p.add_argument("--effect", type=float, default=None, help="end-point difference between the words")
    p.add_argument("--sim-rho", type=float, default=0.6, help="AR1 coefficient of the noise")
    p.add_argument("--noise-sd", type=float, default=SimConfig.noise_sd)
    p.add_argument("--amplitude", type=float, default=SimConfig.random_amplitude,
                   help="scale of the per-trajectory random deviations")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="trajgam", description="Penalized additive mixed models for trajectory data.")
    ap.add_argument("--version", action="version", version=f"trajgam {__version__} (model schema {SCHEMA})")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a model and write it as JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--formula", required=True)
    p.add_argument("--method", choices=["GCV", "ML", "REML", "fREML"], default="REML")
    p.add_argument("--rho", type=float, help="AR1 coefficient of the errors")
    p.add_argument("--series", help="column identifying each series (needed with --rho)")
    p.add_argument("--order", help="column ordering rows inside a series (needed with --rho)")
    p.add_argument("--ordered", action="append", metavar="COL=REF[:NEW]",
                   help="treat COL as an ordered factor with reference REF, optionally as new column NEW")
    p.add_argument("--combine", action="append", metavar="A,B=NEW", help="interaction factor of A and B")
    p.add_argument("--factor", action="append", metavar="COL", help="read a numeric-looking column as a factor")
    p.add_argument("--drop-na", action="store_true", help="drop rows with missing values")
    p.add_argument("--out", help="model JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summary", help="print the summary tables of a fitted model")
    p.add_argument("model")
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("compare", help="compare nested ML fits")
    p.add_argument("full")
    p.add_argument("reduced")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("aic", help="AIC table of models fitted to the same data")
    p.add_argument("models", nargs="+")
    p.set_defaults(func=cmd_aic)

    p = sub.add_parser("predict", help="fitted curve with confidence band")
    p.add_argument("model")
    p.add_argument("--view", required=True)
    _grid_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("diff", help="difference curve between two factor levels")
    p.add_argument("model")
    p.add_argument("--view", required=True)
    p.add_argument("--comp", required=True, metavar="FACTOR=HIGH,LOW")
    _grid_flags(p)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("surface", help="fitted surface over two covariates")
    p.add_argument("model")
    p.add_argument("--view", required=True, metavar="VAR1,VAR2")
    p.add_argument("--grid", default="30,30", metavar="N1,N2")
    p.add_argument("--ylim", metavar="QLO,QHI", help="clamp VAR2 to these quantiles of its data")
    p.add_argument("--cond", action="append", metavar="VAR=VALUE")
    p.add_argument("--exclude-random", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_surface)

    p = sub.add_parser("acf", help="per-series residual autocorrelation averaged over series")
    p.add_argument("model")
    p.add_argument("--data", required=True, help="the CSV the model was fitted to")
    p.add_argument("--series")
    p.add_argument("--order")
    p.add_argument("--normalized", action="store_true", help="use AR1-whitened residuals")
    p.add_argument("--max-lag", type=int)
    p.add_argument("--sketch", action="store_true", help="also draw a text bar chart on standard error")
    p.add_argument("--out")
    p.set_defaults(func=cmd_acf)

    p = sub.add_parser("simulate", help="generate a synthetic two-word trajectory dataset")
    _sim_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("harness", help="Monte-Carlo rejection rates of the six testing methods")
    _sim_flags(p)
    p.add_argument("--variant", choices=VARIANTS, default="ar1")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--methods", default=",".join(str(m) for m in METHODS))
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_harness)
    return ap


USER_ERRORS = (UsageError, DatasetError, FormulaError, ModelSpecError, InferenceError, DiagnosticsError,
               ValueError, KeyError, OSError)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="warning: %(message)s")
    warnings.showwarning = _warn_to_stderr
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FitError as e:
        print(f"fit error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        # downstream reader closed early (e.g. `| head`); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return 0
    except (np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 2
    except USER_ERRORS as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
