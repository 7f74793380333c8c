"""Batch experiment runner.

Subcommands: ``solve`` (one run, writes trace.csv + summary.json),
``sweep`` (gamma sweep with log-log slope fits, writes sweep.csv +
slopes.json), ``check`` (verification battery, writes checks.json) and
``hyperclean`` (synthetic data-cleaning demo, writes weights.csv +
hyperclean.json).

Config precedence: command-line flags override config-file values override
built-in defaults.  All randomness flows from the single ``--seed`` through
named sub-streams, and emitted files are byte-reproducible under a fixed
seed (per-iteration wall times are therefore written as 0 in trace.csv
unless ``--timed-trace`` is given).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .core import (
    InvalidConfigError,
    MissingOracleError,
    PenaltyKind,
    ProblemSpec,
    SolveReport,
    SolverConfig,
    Termination,
    rng_stream,
)
from .problems import (
    catalog_entry,
    catalog_names,
    make_hyperclean_data,
    make_hyperclean_synthetic,
    make_problem,
    sigmoid,
)
from .proxlinear import pbpl
from .solvers import g_pbgd, pbgd, v_pbgd, v_pbgd_constrained, v_pbsgd
from .verify import (
    lower_value_and_solution,
    check_problem,
    check_squared_distance_bound,
    fit_loglog_slope,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGED = 3

ALGORITHMS = ("pbgd", "v-pbgd", "v-pbgd-con", "g-pbgd", "v-pbsgd", "pbpl")

_DEFAULT_PENALTY = {
    "pbgd": PenaltyKind.VALUE_GAP,
    "v-pbgd": PenaltyKind.VALUE_GAP,
    "v-pbgd-con": PenaltyKind.VALUE_GAP,
    "g-pbgd": PenaltyKind.GRAD_NORM_SQ,
    "v-pbsgd": PenaltyKind.VALUE_GAP,
    "pbpl": PenaltyKind.GRAD_NORM,
}

_SOLVER_FN = {
    "pbgd": pbgd,
    "v-pbgd": v_pbgd,
    "v-pbgd-con": v_pbgd_constrained,
    "g-pbgd": g_pbgd,
    "v-pbsgd": v_pbsgd,
    "pbpl": pbpl,
}

TRACE_HEADER = ["k", "f_value", "penalty_value", "F_gamma", "proj_grad_norm_sq", "inner_iters", "elapsed_ns"]


# ---------------------------------------------------------------------------
# serialization


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def write_trace_csv(path, report: SolveReport, timed: bool = False) -> None:
    """RFC-4180 trace with 17-significant-digit decimals, one row per outer
    iteration.  ``elapsed_ns`` is 0 unless ``timed`` (wall time is the one
    non-reproducible quantity; zeroing it keeps fixed-seed traces
    byte-identical)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for r in report.trace:
            w.writerow(
                [
                    r.k,
                    _fmt(r.f_value),
                    _fmt(r.penalty_value),
                    _fmt(r.F_gamma),
                    _fmt(r.proj_grad_norm_sq),
                    r.inner_iters_used,
                    r.elapsed_ns if timed else 0,
                ]
            )


def _config_echo(config: SolverConfig) -> dict:
    d = asdict(config)
    d["penalty"] = config.penalty.value
    for key in ("x0", "y0"):
        if d[key] is not None:
            d[key] = [float(v) for v in np.asarray(d[key]).ravel()]
    return d


def summary_dict(report: SolveReport) -> dict:
    final = report.final_record
    return {
        "library_version": __version__,
        "problem": report.problem_name,
        "algorithm": report.algorithm,
        "seed": report.config.seed,
        "config": _config_echo(report.config),
        "resolved_steps": {k: v for k, v in report.resolved_steps.items()},
        "termination": report.termination.value,
        "iterations": report.iterations,
        "final_x": [float(v) for v in report.final_x],
        "final_y": [float(v) for v in report.final_y],
        "final_metrics": None
        if final is None
        else {
            "f_value": final.f_value,
            "penalty_value": final.penalty_value,
            "F_gamma": final.F_gamma,
            "proj_grad_norm_sq": final.proj_grad_norm_sq,
        },
        "mean_proj_grad_norm_sq": None if not report.trace else report.mean_proj_grad_norm_sq,
        "penalty_source": report.penalty_source,
        "notes": list(report.notes),
    }


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# solve plumbing


def _parse_point(text: str) -> list:
    return [float(tok) for tok in text.split(",") if tok.strip() != ""]


def _parse_problem_params(pairs) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise InvalidConfigError(f"--problem-param expects KEY=VALUE, got {item!r}")
        key, val = item.split("=", 1)
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        out[key] = parsed
    return out


def validate_pairing(problem: ProblemSpec, algo: str, config: SolverConfig) -> None:
    """Reject incompatible algorithm/problem combinations up front."""
    if algo not in ALGORITHMS:
        raise InvalidConfigError(f"unknown algorithm {algo!r}")
    if algo in ("v-pbgd", "v-pbsgd", "pbpl") and not problem.lower_set.is_full:
        raise InvalidConfigError(f"{algo} requires an unconstrained lower level")
    if algo == "v-pbgd-con" and problem.lower_set.is_full:
        raise InvalidConfigError("v-pbgd-con requires a bounded lower-level set")
    if algo in ("g-pbgd", "pbpl") and not problem.has_hvp:
        raise InvalidConfigError(
            f"{algo} needs lower-level Hessian-product oracles, which "
            f"problem {problem.name!r} does not supply"
        )
    if algo == "v-pbsgd" and not problem.has_stochastic:
        raise InvalidConfigError(f"v-pbsgd needs stochastic gradient oracles on {problem.name!r}")
    if config.penalty != _DEFAULT_PENALTY[algo] and algo != "pbgd":
        raise InvalidConfigError(
            f"algorithm {algo} runs the {_DEFAULT_PENALTY[algo].value} penalty, "
            f"config requests {config.penalty.value}"
        )


def run_algorithm(problem: ProblemSpec, algo: str, config: SolverConfig) -> SolveReport:
    validate_pairing(problem, algo, config)
    return _SOLVER_FN[algo](problem, config)


_CONFIG_KEYS = (
    "gamma",
    "alpha",
    "beta",
    "K",
    "inner_schedule",
    "inner_T",
    "tol_proj_grad",
    "penalty",
    "batch_size",
    "seed",
    "delta0",
    "q",
    "t",
    "warm_start",
    "x0",
    "y0",
)


def _build_config(algo: str, file_cfg: dict, flag_cfg: dict) -> SolverConfig:
    merged = dict(penalty=_DEFAULT_PENALTY[algo])
    for src in (file_cfg, flag_cfg):
        for key in _CONFIG_KEYS:
            if key in src and src[key] is not None:
                merged[key] = src[key]
    if flag_cfg.get("auto_steps"):
        merged["alpha"] = None
        merged["beta"] = None
    return SolverConfig(**merged)


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidConfigError("config file must hold a JSON object")
    return data


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve(args) -> int:
    file_cfg = _load_config_file(args.config)
    problem_params = _parse_problem_params(args.problem_param)
    problem_params.update(file_cfg.get("problem_params", {}))
    algo = args.algo or file_cfg.get("algo")
    name = args.problem or file_cfg.get("problem")
    if not algo or not name:
        raise InvalidConfigError("solve needs --problem and --algo")
    problem = make_problem(name, **problem_params)
    flags = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
    flags["auto_steps"] = args.auto_steps
    if args.x0 is not None:
        flags["x0"] = _parse_point(args.x0)
    if args.y0 is not None:
        flags["y0"] = _parse_point(args.y0)
    config = _build_config(algo, file_cfg, flags)
    report = run_algorithm(problem, algo, config)

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if not args.no_trace:
        write_trace_csv(outdir / "trace.csv", report, timed=args.timed_trace)
    if not args.no_summary:
        write_json(outdir / "summary.json", summary_dict(report))
    print(
        f"{report.algorithm} on {report.problem_name}: {report.termination.value} "
        f"after {report.iterations} iterations"
    )
    return EXIT_OK if report.termination != Termination.DIVERGED else EXIT_DIVERGED


def _sweep_worker(payload: dict) -> dict:
    problem = make_problem(payload["problem"], **payload.get("problem_params", {}))
    config = SolverConfig(**payload["config"])
    report = run_algorithm(problem, payload["algo"], config)
    final = report.final_record
    return {
        "gamma": config.gamma,
        "start": payload["start_index"],
        "iterations": report.iterations,
        "terminal_penalty": None if final is None else final.penalty_value,
        "termination": report.termination.value,
    }


def cmd_sweep(args) -> int:
    file_cfg = _load_config_file(args.config)
    name = args.problem or file_cfg.get("problem", "toy-nc")
    algo = args.algo or file_cfg.get("algo", "v-pbgd")
    problem_params = _parse_problem_params(args.problem_param)
    gammas = [float(g) for g in args.gammas.split(",")]
    if len(gammas) < 3:
        raise InvalidConfigError("sweep needs at least 3 gamma values for slope fits")
    problem = make_problem(name, **problem_params)
    tol = float(np.sqrt(args.tol_gsq))
    seed = args.seed if args.seed is not None else int(file_cfg.get("seed", 0))

    rng = rng_stream(seed, 31)
    if args.starts > 1:
        # one start list shared across gammas, so per-gamma rows are comparable
        starts = [
            (
                list(_sample_start(problem.upper_set, rng)),
                list(_sample_start(problem.lower_set, rng, args.y_start_range)),
            )
            for _ in range(args.starts)
        ]
    else:
        starts = [(None, None)]
    jobs = []
    for gamma in gammas:
        for j, (x0, y0) in enumerate(starts):
            flags = {k: getattr(args, k, None) for k in _CONFIG_KEYS}
            flags.update(gamma=gamma, tol_proj_grad=tol, seed=seed)
            if args.alpha_over_gamma is not None:
                flags["alpha"] = args.alpha_over_gamma / gamma
            if x0 is not None:
                flags.update(x0=x0, y0=y0)
            config = _build_config(algo, file_cfg, flags)
            validate_pairing(problem, algo, config)
            cfg_dict = {k: getattr(config, k) for k in _CONFIG_KEYS}
            cfg_dict["penalty"] = config.penalty.value
            jobs.append(
                dict(
                    problem=name,
                    problem_params=problem_params,
                    algo=algo,
                    config=cfg_dict,
                    start_index=j,
                )
            )

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_worker, jobs))
    else:
        results = [_sweep_worker(job) for job in jobs]

    rows = []
    failures = []
    for gamma in gammas:
        members = [r for r in results if r["gamma"] == gamma]
        good = [r for r in members if r["termination"] != Termination.DIVERGED.value]
        failures.extend(r for r in members if r["termination"] == Termination.DIVERGED.value)
        if good:
            rows.append(
                {
                    "gamma": gamma,
                    "iterations_to_tol": float(np.mean([r["iterations"] for r in good])),
                    "terminal_penalty": float(np.mean([r["terminal_penalty"] for r in good])),
                    "n_runs": len(good),
                    "n_failed": len(members) - len(good),
                }
            )
        else:
            rows.append(
                {"gamma": gamma, "iterations_to_tol": None, "terminal_penalty": None,
                 "n_runs": 0, "n_failed": len(members)}
            )

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["gamma", "iterations_to_tol", "terminal_penalty", "n_runs", "n_failed"])
        for row in rows:
            w.writerow(
                [
                    _fmt(row["gamma"]),
                    "" if row["iterations_to_tol"] is None else _fmt(row["iterations_to_tol"]),
                    "" if row["terminal_penalty"] is None else _fmt(row["terminal_penalty"]),
                    row["n_runs"],
                    row["n_failed"],
                ]
            )

    valid = [r for r in rows if r["n_runs"] > 0 and r["terminal_penalty"] and r["terminal_penalty"] > 0]
    slopes: dict = {"tol_gsq": args.tol_gsq, "gammas": gammas}
    if len(valid) >= 3:
        slopes["slope_penalty_vs_gamma"] = fit_loglog_slope(
            [(r["gamma"], r["terminal_penalty"]) for r in valid]
        )
        slopes["slope_iters_vs_gamma"] = fit_loglog_slope(
            [(r["gamma"], r["iterations_to_tol"]) for r in valid]
        )
    else:
        slopes["error"] = "fewer than 3 non-diverged gamma rows; slopes not fitted"
    if failures:
        slopes["failures"] = failures
    write_json(outdir / "slopes.json", slopes)
    print(json.dumps({k: v for k, v in slopes.items() if k.startswith("slope")}))
    return EXIT_OK if not failures else EXIT_CHECK_FAILED


def _sample_start(cset, rng, default_range=(-1.0, 1.0)):
    if cset.is_bounded and cset.kind in ("box", "interval"):
        return rng.uniform(cset.lower, cset.upper)
    lo, hi = default_range
    return rng.uniform(lo, hi, size=cset.dim)


def cmd_check(args) -> int:
    names = catalog_names() if args.selector == "all" else [args.selector]
    for name in names:
        if name not in catalog_names():
            raise InvalidConfigError(f"unknown problem {name!r}")
    out: dict = {}
    any_failed = False
    for name in names:
        entry = catalog_entry(name)
        if args.rho is not None or args.kind is not None:
            if args.rho is None or args.kind is None:
                raise InvalidConfigError("--rho and --kind must be supplied together")
            reports = [
                check_squared_distance_bound(
                    entry.spec, PenaltyKind(args.kind), args.rho,
                    n_samples=args.samples, seed=args.seed,
                )
            ]
        else:
            reports = check_problem(entry, seed=args.seed, fast=args.fast)
        out[name] = [r.to_dict() for r in reports]
        any_failed = any_failed or any(r.failed for r in reports)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(outdir / "checks.json", out)
    n_total = sum(len(v) for v in out.values())
    n_bad = sum(1 for v in out.values() for r in v if r["status"] == "fail")
    print(f"checks: {n_total - n_bad}/{n_total} passed")
    return EXIT_CHECK_FAILED if any_failed else EXIT_OK


def cmd_hyperclean(args) -> int:
    if args.algo not in ("v-pbgd", "v-pbsgd"):
        raise InvalidConfigError("hyperclean supports v-pbgd and v-pbsgd")
    data = make_hyperclean_data(
        n_train=args.n_train,
        n_val=args.n_val,
        dim=args.dim,
        noise_rate=args.noise,
        lambda_reg=args.lambda_reg,
        seed=args.seed,
    )
    problem = make_hyperclean_synthetic(data=data)
    config = SolverConfig(
        gamma=args.gamma,
        alpha=args.alpha,
        K=args.K,
        inner_schedule="fixed",
        inner_T=args.inner_T,
        tol_proj_grad=0.0,
        penalty=PenaltyKind.VALUE_GAP,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    report = run_algorithm(problem, args.algo, config)
    weights = sigmoid(report.final_x)

    def val_accuracy(w):
        return float(np.mean(np.sign(data.A_val @ w) == data.b_val))

    # retrain the model to high accuracy at the learned and uniform weights
    _, w_learned = lower_value_and_solution(problem, report.final_x)
    _, w_uniform = lower_value_and_solution(problem, np.zeros(problem.d_x))

    corrupted = data.corrupted
    n_bad = int(corrupted.sum())
    mean_bad = float(weights[corrupted].mean()) if n_bad else None
    mean_clean = float(weights[~corrupted].mean()) if n_bad < len(weights) else None
    separation = None if (mean_bad is None or mean_clean is None) else mean_clean - mean_bad

    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "weights.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "corrupted", "weight"])
        for i, (bad, wt) in enumerate(zip(corrupted, weights)):
            w.writerow([i, int(bad), _fmt(wt)])
    result = {
        "library_version": __version__,
        "seed": args.seed,
        "algo": args.algo,
        "sizes": {"n_train": args.n_train, "n_val": args.n_val, "dim": args.dim},
        "noise_rate": args.noise,
        "lambda_reg": args.lambda_reg,
        "gamma": args.gamma,
        "iterations": report.iterations,
        "termination": report.termination.value,
        "n_corrupted": n_bad,
        "mean_weight_clean": mean_clean,
        "mean_weight_corrupted": mean_bad,
        "weight_separation": separation,
        "val_accuracy_learned": val_accuracy(w_learned),
        "val_accuracy_uniform": val_accuracy(w_uniform),
        "val_accuracy_terminal_w": val_accuracy(report.final_y),
    }
    write_json(outdir / "hyperclean.json", result)
    print(
        f"hyperclean: separation="
        f"{'n/a' if separation is None else f'{separation:.4f}'}"
        f", val acc learned={result['val_accuracy_learned']:.4f}"
        f" uniform={result['val_accuracy_uniform']:.4f}"
    )
    return EXIT_OK if report.termination != Termination.DIVERGED else EXIT_DIVERGED


# ---------------------------------------------------------------------------
# parser


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--inner-schedule", dest="inner_schedule", choices=("fixed", "log"), default=None)
    p.add_argument("--inner-T", dest="inner_T", type=int, default=None)
    p.add_argument("--tol", dest="tol_proj_grad", type=float, default=None,
                   help="stop once ||G_gamma|| <= tol")
    p.add_argument("--penalty", choices=[k.value for k in PenaltyKind], default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--delta0", type=float, default=None)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--auto-steps", action="store_true",
                   help="derive alpha/beta from the problem constants")
    p.add_argument("--config", default=None, help="JSON config file (flags override it)")
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbgd", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run one solver on one problem")
    p.add_argument("--problem", choices=catalog_names(), default=None)
    p.add_argument("--algo", choices=ALGORITHMS, default=None)
    p.add_argument("--problem-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--x0", default=None, help="comma-separated start for x")
    p.add_argument("--y0", default=None, help="comma-separated start for y")
    p.add_argument("--no-trace", action="store_true")
    p.add_argument("--no-summary", action="store_true")
    p.add_argument("--timed-trace", action="store_true",
                   help="emit measured per-iteration wall times (breaks byte reproducibility)")
    _add_solver_flags(p)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("sweep", help="gamma sweep with log-log slope fits")
    p.add_argument("--problem", choices=catalog_names(), default=None)
    p.add_argument("--algo", choices=ALGORITHMS, default=None)
    p.add_argument("--problem-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--gammas", default="1,3,10,30,100", help="comma-separated gamma values")
    p.add_argument("--starts", type=int, default=1, help="random starts per gamma")
    p.add_argument("--tol-gsq", dest="tol_gsq", type=float, default=1e-4,
                   help="stop members once ||G_gamma||^2 <= tol-gsq")
    p.add_argument("--alpha-over-gamma", dest="alpha_over_gamma", type=float, default=None,
                   help="use the per-member step size alpha = C / gamma")
    p.add_argument("--y-start-range", dest="y_start_range", type=float, nargs=2,
                   default=(-1.0, 1.0))
    p.add_argument("--workers", type=int, default=1)
    _add_solver_flags(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("check", help="run the verification battery")
    p.add_argument("selector", help="'all' or a problem name")
    p.add_argument("--rho", type=float, default=None,
                   help="override the squared-distance-bound modulus")
    p.add_argument("--kind", choices=[k.value for k in PenaltyKind], default=None)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fast", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("hyperclean", help="synthetic data hyper-cleaning demo")
    p.add_argument("--n-train", dest="n_train", type=int, default=200)
    p.add_argument("--n-val", dest="n_val", type=int, default=500)
    p.add_argument("--dim", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--lambda-reg", dest="lambda_reg", type=float, default=0.01)
    p.add_argument("--algo", choices=("v-pbgd", "v-pbsgd"), default="v-pbgd")
    p.add_argument("--gamma", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--K", type=int, default=8000)
    p.add_argument("--inner-T", dest="inner_T", type=int, default=5)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_hyperclean)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidConfigError, MissingOracleError, KeyError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
