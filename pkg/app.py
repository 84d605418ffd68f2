import os
import sys
import json
import argparse
import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import ValidationError

from core.errors import (
    CensAftError, InputParseError, InsufficientCovariates, LargestNotCensored,
)
from core.inputs import read_table
from core.km import km_estimate, order_dataset, stute_weights
from core.buckley_james import bj_resample_distribution, resample_summary
from core.impute import (
    ImputationMethod, predicted_difference, refit_with_tail_ties,
    run_pipeline, tail_ties_extrapolate, tail_ties_iterative,
)
from core.models import FitReport, PipelineOptions, SimConfig
from core.simulate import run_study
from core.swls import CONSTRAINT_ROWS, default_ridge
from core.db import StudyStore

logger = logging.getLogger("censaft")

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

EXIT_OK, EXIT_PARSE, EXIT_DATA, EXIT_NOT_CENSORED, EXIT_COVARIATES = 0, 2, 3, 4, 5


def _setup_logging(verbose: int) -> None:
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, os.getenv("CENSAFT_LOG_LEVEL", "WARNING").upper(), logging.WARNING)
    root = logging.getLogger()
    # main() が複数回呼ばれても handler は 1 つ
    for h in list(root.handlers):
        if getattr(h, "_censaft", False):
            root.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._censaft = True
    root.addHandler(handler)
    root.setLevel(level)


def _fmt(v) -> str:
    return "NA" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6g}"


def _write_frame(df: pd.DataFrame, out: Optional[str]) -> None:
    if out:
        df.to_csv(out, index=False, float_format="%.17g")
    else:
        sys.stdout.write(df.to_csv(index=False, float_format="%.6g"))


def _load_ordered(path: str):
    table = read_table(path)
    return table, order_dataset(table.to_dataset())


# =========================
# コマンド
# =========================

def cmd_km(args) -> int:
    _, data = _load_ordered(args.file)
    curve = km_estimate(data, tail_correction=args.tail_correction)
    df = pd.DataFrame({"t": curve.event_times, "survival": curve.survival, "jump": curve.jumps})
    if curve.event_times.size == 0:
        # 全件打ち切り: Ŝ ≡ 1
        df = pd.DataFrame({"t": [float(data.times[-1])], "survival": [1.0], "jump": [0.0]})
    _write_frame(df, args.out)
    return EXIT_OK


def cmd_weights(args) -> int:
    _, data = _load_ordered(args.file)
    w = stute_weights(data, tail_correction=args.tail_correction)
    df = pd.DataFrame({
        "time": data.times, "status": data.statuses, "row": data.permutation + 1, "weight": w.weights,
    })
    _write_frame(df, args.out)
    return EXIT_OK


def _fit_report(table, data, method: ImputationMethod, args) -> FitReport:
    lambda2 = args.lambda2 if args.lambda2 is not None else default_ridge(data.p)
    options = PipelineOptions(
        n_draws=args.n_draws, m=args.m, tau_draws=args.tau_draws, seed=args.seed,
        relax_infeasible=not args.strict, constraint_rows=args.constraint_rows,
    )
    result = run_pipeline(data, method, lambda2, options)
    std_errors = None
    if args.draws:
        draws = bj_resample_distribution(
            data, lambda2, m=args.m, n_draws=args.draws, rng_seed=args.seed,
            relax_infeasible=not args.strict, constraint_rows=args.constraint_rows,
        )
        std_errors = [float(v) for v in resample_summary(draws).std]
    fit = result.fit
    return FitReport(
        method=method.value,
        label=method.label,
        covariates=table.covariate_names,
        beta=[float(v) for v in fit.beta],
        intercept=float(fit.intercept),
        lambda2=float(lambda2),
        censored_time=None if result.censored_log_time is None else float(np.exp(result.censored_log_time)),
        imputed_log_time=result.imputed_log_time,
        imputed_time=result.imputed_time,
        tau=result.tau,
        std_errors=std_errors,
        active_constraints=fit.n_active_censoring_constraints,
        dropped_constraints=fit.dropped_constraints,
        dropped_rows=[int(data.permutation[i]) for i in fit.dropped_rows],
        flags=sorted(result.flags),
    )


def _print_fit(rep: FitReport) -> None:
    print(f"method      {rep.method} ({rep.label})")
    print(f"lambda2     {_fmt(rep.lambda2)}")
    print(f"intercept   {_fmt(rep.intercept)}")
    width = max(len(c) for c in rep.covariates)
    for j, name in enumerate(rep.covariates):
        se = f"  ({_fmt(rep.std_errors[j])})" if rep.std_errors else ""
        print(f"  {name.ljust(width)}  {_fmt(rep.beta[j])}{se}")
    if rep.imputed_time is not None:
        print(f"censored    {_fmt(rep.censored_time)}")
        print(f"imputed     {_fmt(rep.imputed_time)}  (log {_fmt(rep.imputed_log_time)}, tau {_fmt(rep.tau)})")
    print(f"active      {rep.active_constraints}")
    if rep.dropped_constraints:
        print(f"dropped     {rep.dropped_constraints} infeasible censoring constraints "
              f"(rows {','.join(str(i + 1) for i in rep.dropped_rows)})")
    if rep.flags:
        print(f"flags       {','.join(rep.flags)}")


def cmd_fit(args) -> int:
    table, data = _load_ordered(args.file)
    rep = _fit_report(table, data, ImputationMethod(args.method), args)
    if args.json:
        print(rep.model_dump_json(indent=2))
    else:
        _print_fit(rep)
    return EXIT_OK


def cmd_diffdata(args) -> int:
    _, data = _load_ordered(args.file)
    dr = predicted_difference(data)
    body = dr.to_frame().to_csv(index=False, float_format="%.17g" if args.out else "%.6g")
    trailer = f"# intercept={dr.intercept!r} slope={dr.slope!r} nu={dr.nu!r}\n"
    if args.out:
        Path(args.out).write_text(body + trailer, encoding="utf-8")
    else:
        sys.stdout.write(body + trailer)
    return EXIT_OK


def cmd_tailties(args) -> int:
    table, data = _load_ordered(args.file)
    payload = {"method": args.method}
    if args.method == "iterative":
        res = tail_ties_iterative(data)
        lifetimes = res.lifetimes
        payload.update(log_times=[float(v) for v in res.log_times], nu=[float(v) for v in res.nus])
    else:
        res = tail_ties_extrapolate(data, psi=args.psi)
        lifetimes = res.lifetimes
        payload.update(psi=res.psi, intercept=res.intercept, slope=res.slope, r_squared=res.r_squared,
                       probabilities=[float(v) for v in res.probabilities])
    payload["lifetimes"] = [float(v) for v in lifetimes]
    payload["flags"] = sorted(res.flags)
    if args.refit:
        fit = refit_with_tail_ties(
            data, lifetimes, args.lambda2,
            relax_infeasible=not args.strict, constraint_rows=args.constraint_rows,
        )
        payload["refit"] = {"covariates": table.covariate_names, **fit.to_dict()}

    if args.json:
        print(json.dumps(payload, indent=2))
        return EXIT_OK
    print(f"{args.method}: {len(lifetimes)} tied maxima")
    print(", ".join(_fmt(v) for v in lifetimes))
    if args.method == "extrapolate":
        print(f"trend R^2   {_fmt(res.r_squared)}")
    if payload["flags"]:
        print(f"flags       {','.join(payload['flags'])}")
    if args.refit:
        for name, b in zip(table.covariate_names, payload["refit"]["beta"]):
            print(f"  {name}  {_fmt(b)}")
    return EXIT_OK


def _load_config(path: str, reps: Optional[int], seed: Optional[int]) -> SimConfig:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, dict):
        raise InputParseError(f"{path}: config must be a JSON object")
    if reps is not None:
        raw["replications"] = reps
    if seed is not None:
        raw["seed"] = seed
    return SimConfig.model_validate(raw)


def cmd_simulate(args) -> int:
    config = _load_config(args.config, args.reps, args.seed)
    report = run_study(config, methods=args.methods, threads=args.threads)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_csv(out.with_suffix(".csv"))
        report.to_json(out.with_suffix(".json"))
        report.estimates_frame().to_csv(out.with_name(out.name + "_estimates.csv"), index=False, float_format="%.17g")
    else:
        print(report.to_json())
    if args.db:
        sid = StudyStore(args.db).save_study(config, report)
        logger.info("stored study %d", sid)
    return EXIT_OK


def cmd_history(args) -> int:
    store = StudyStore(args.db)
    rows = store.list_studies(args.limit)
    if not rows:
        print("no stored studies")
        return EXIT_OK
    print(pd.DataFrame(rows).to_string(index=False))
    return EXIT_OK


# =========================
# 引数
# =========================

def _add_constraint_rows(p: argparse.ArgumentParser) -> None:
    p.add_argument("--constraint-rows", choices=CONSTRAINT_ROWS, default="unweighted",
                   help="censoring constraint rows: unweighted centred values or sqrt(w)-scaled (inert)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="censaft", description="Censored AFT fitting by penalized Stute-weighted least squares")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("km", help="Kaplan-Meier curve")
    p.add_argument("file")
    p.add_argument("--tail-correction", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_km)

    p = sub.add_parser("weights", help="Stute Kaplan-Meier weights")
    p.add_argument("file")
    p.add_argument("--tail-correction", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_weights)

    p = sub.add_parser("fit", help="fit one estimation pipeline")
    p.add_argument("file")
    p.add_argument("--method", choices=[m.value for m in ImputationMethod], default="efron")
    p.add_argument("--lambda2", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--draws", type=int, default=0, help="resampling draws for standard errors")
    p.add_argument("--n-draws", type=int, default=100)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--tau-draws", type=int, default=100)
    p.add_argument("--strict", action="store_true", help="fail instead of relaxing infeasible censoring constraints")
    _add_constraint_rows(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("diffdata", help="differences between mean-imputed and censored log times")
    p.add_argument("file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_diffdata)

    p = sub.add_parser("tailties", help="impute censored observations tied at the maximum")
    p.add_argument("file")
    p.add_argument("--method", choices=["iterative", "extrapolate"], default="iterative")
    p.add_argument("--psi", type=float, default=1.0)
    p.add_argument("--refit", action="store_true")
    p.add_argument("--lambda2", type=float)
    p.add_argument("--strict", action="store_true")
    _add_constraint_rows(p)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_tailties)

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--config", required=True)
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--methods", nargs="+", choices=[m.value for m in ImputationMethod])
    p.add_argument("--threads", type=int, help="worker threads (default CENSAFT_THREADS, 0 = auto)")
    p.add_argument("--db", help="store the report in this database URL")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("history", help="stored simulation runs")
    p.add_argument("--limit", type=int, default=20)
    p.add_argument("--db")
    p.set_defaults(func=cmd_history)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except InputParseError as e:
        logger.error("%s", e)
        return EXIT_PARSE
    except (ValidationError, json.JSONDecodeError, FileNotFoundError) as e:
        logger.error("%s", e)
        print(str(e), file=sys.stderr)
        return EXIT_PARSE
    except LargestNotCensored as e:
        logger.error("%s", e)
        return EXIT_NOT_CENSORED
    except InsufficientCovariates as e:
        logger.error("%s", e)
        return EXIT_COVARIATES
    except CensAftError as e:
        logger.error("%s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
