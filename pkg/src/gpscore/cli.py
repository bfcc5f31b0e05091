"""Command-line front end: fit, evaluate, search, export.

Results go to standard output (or files named by flags); progress and
diagnostics go to standard error.  Exit codes: 0 success, 2 configuration
error, 3 data error, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time

import numpy as np

from .errors import ConfigError, DataError
from .evaldata import (
    ModelTemplate,
    chronological_split,
    elo_baseline,
    parse_dataset,
    random_baseline,
    random_search,
    rolling_evaluate,
)
from .inference import FitConfig
from .model import Model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NO_CONVERGENCE = 4


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON ({path}, line {exc.lineno})") from exc


def _fit_config(args) -> FitConfig:
    return FitConfig(
        objective=args.objective,
        learning_rate=args.lr,
        tol=args.tol,
        max_iters=args.max_iters,
        threads=args.threads,
    )


def _add_fit_flags(parser):
    parser.add_argument("--objective", default="ep", choices=["ep", "kl", "reverse_kl"])
    parser.add_argument("--lr", type=float, default=None,
                        help="learning rate in (0, 1]; default per likelihood")
    parser.add_argument("--tol", type=float, default=1e-3,
                        help="log-marginal improvement threshold")
    parser.add_argument("--max-iters", type=int, default=500)
    parser.add_argument("--threads", type=int, default=None)
    parser.add_argument("--progress", action="store_true",
                        help="stream per-iteration JSON records to stderr")


def _read_records(args):
    schema = _load_json(args.schema, "schema") if args.schema else None
    return parse_dataset(args.data, schema=schema, on_error=args.on_error)


def _build_and_observe(template: ModelTemplate, records):
    model = template.build()
    for rec in records:
        for coeffs, t, y in template.observations(model, rec):
            model.observe(coeffs, t, y)
    return model


def _fit_with_progress(model, config, progress):
    if not progress:
        return model.fit(config)
    # drive the fit one iteration at a time so each can be reported
    from .inference import FitReport

    start = time.monotonic()
    step = FitConfig(**{**config.__dict__, "max_iters": 1})
    logmls = []
    guarded = clamped = 0
    converged = False
    for it in range(1, config.max_iters + 1):
        rep = model.fit(step)
        if not rep.log_marginals:
            break
        guarded += rep.guarded
        clamped += rep.clamped
        logmls.append(rep.log_marginals[-1])
        print(json.dumps({"iter": it, "log_marginal": logmls[-1],
                          "elapsed_s": round(time.monotonic() - start, 3)}),
              file=sys.stderr, flush=True)
        if len(logmls) >= 2 and abs(logmls[-1] - logmls[-2]) < config.tol:
            converged = True
            break
    report = FitReport(iterations=len(logmls), converged=converged,
                       log_marginals=logmls, guarded=guarded, clamped=clamped)
    model._report = report
    return report


def cmd_fit(args) -> int:
    config = _fit_config(args)
    template = ModelTemplate(_load_json(args.model_config, "model config"))
    records = _read_records(args)
    if not records:
        raise DataError(f"no records in {args.data}")
    if args.train_fraction is not None:
        records, _ = chronological_split(records, args.train_fraction)
    model = _build_and_observe(template, records)
    report = _fit_with_progress(model, config, args.progress)
    model.save(args.out)
    print(json.dumps({"snapshot": args.out, **report.to_json()}, indent=2))
    return EXIT_OK if report.converged else EXIT_NO_CONVERGENCE


def cmd_evaluate(args) -> int:
    records = _read_records(args)
    if not records:
        raise DataError(f"no records in {args.data}")
    if args.baseline == "random":
        result = random_baseline(records, train_fraction=args.train_fraction or 0.7)
    elif args.baseline == "elo":
        if args.lr is None:
            raise ConfigError("--baseline elo requires --lr")
        result = elo_baseline(records, learning_rate=args.lr,
                              base=args.elo_base, draw_margin=args.draw_margin,
                              train_fraction=args.train_fraction or 0.7)
    else:
        if not args.model_config:
            raise ConfigError("either --baseline or --model-config is required")
        template = ModelTemplate(_load_json(args.model_config, "model config"))
        result = rolling_evaluate(
            template, records,
            train_fraction=args.train_fraction or 0.7,
            granularity_days=args.granularity_days,
            fit_config=_fit_config(args))
    if args.per_record:
        rows = [r.to_row() for r in result.records]
        fieldnames = sorted({k for row in rows for k in row},
                            key=lambda k: (k not in ("index", "time", "observed",
                                                     "log_loss", "correct"), k))
        with open(args.per_record, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            writer.writerows(rows)
    print(json.dumps(result.to_json(), indent=2))
    return EXIT_OK


def cmd_search(args) -> int:
    space = _load_json(args.space, "search space")
    records = _read_records(args)
    if not records:
        raise DataError(f"no records in {args.data}")
    train, _ = chronological_split(records, args.train_fraction or 0.7)
    ranked = random_search(space, args.n, args.seed, train,
                           fit_config=_fit_config(args))
    print(json.dumps(ranked, indent=2))
    return EXIT_OK


def cmd_export(args) -> int:
    model = Model.load(args.snapshot)
    feature_ids = args.features.split(",") if args.features else list(model.features)
    for fid in feature_ids:
        if fid not in model.features:
            raise ConfigError(f"unknown feature {fid!r} in snapshot")
    times = []
    for feat in model.features.values():
        times.extend(feat.times)
    if args.grid:
        try:
            start, end, step = map(float, args.grid.split(":"))
        except ValueError as exc:
            raise ConfigError("--grid must be start:end:step (years)") from exc
    else:
        if not times:
            raise DataError("snapshot has no observations and no --grid given")
        start, end = min(times), max(times)
        step = (end - start) / 100 if end > start else 1.0
    if step <= 0 or end < start:
        raise ConfigError("--grid must have positive step and end >= start")
    grid = np.arange(start, end + 0.5 * step, step)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["feature", "t", "mean", "std"])
        for fid in feature_ids:
            _, means, stds = model.trajectory(fid, grid)
            for t, m, s in zip(grid, means, stds):
                writer.writerow([fid, repr(float(t)), repr(float(m)), repr(float(s))])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpscore",
        description="Time-varying skill ratings from pairwise comparisons")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model and write a snapshot")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--schema", default=None)
    p_fit.add_argument("--on-error", default="fail", choices=["fail", "skip"])
    p_fit.add_argument("--model-config", required=True)
    p_fit.add_argument("--out", required=True, help="snapshot path")
    p_fit.add_argument("--train-fraction", type=float, default=None,
                       help="fit only the first fraction of the records")
    _add_fit_flags(p_fit)
    p_fit.set_defaults(func=cmd_fit)

    p_eval = sub.add_parser("evaluate", help="rolling evaluation or baselines")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--schema", default=None)
    p_eval.add_argument("--on-error", default="fail", choices=["fail", "skip"])
    p_eval.add_argument("--model-config", default=None)
    p_eval.add_argument("--baseline", default=None, choices=["random", "elo"])
    p_eval.add_argument("--elo-base", default="logit", choices=["logit", "probit"])
    p_eval.add_argument("--draw-margin", type=float, default=0.0)
    p_eval.add_argument("--train-fraction", type=float, default=None)
    p_eval.add_argument("--granularity-days", type=int, default=1)
    p_eval.add_argument("--per-record", default=None,
                        help="also write per-record predictions to this CSV")
    _add_fit_flags(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_search = sub.add_parser("search", help="random hyperparameter search")
    p_search.add_argument("--data", required=True)
    p_search.add_argument("--schema", default=None)
    p_search.add_argument("--on-error", default="fail", choices=["fail", "skip"])
    p_search.add_argument("--space", required=True, help="search-space JSON")
    p_search.add_argument("--n", type=int, default=100)
    p_search.add_argument("--seed", type=int, default=0)
    p_search.add_argument("--train-fraction", type=float, default=None)
    _add_fit_flags(p_search)
    p_search.set_defaults(func=cmd_search)

    p_export = sub.add_parser("export", help="export skill curves as CSV")
    p_export.add_argument("--snapshot", required=True)
    p_export.add_argument("--features", default=None,
                          help="comma-separated ids (default: all)")
    p_export.add_argument("--grid", default=None, help="start:end:step in years")
    p_export.add_argument("--out", default=None, help="CSV path (default stdout)")
    p_export.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
