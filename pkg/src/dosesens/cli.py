"""Command-line front end: subcommand dispatch, JSON reports, CSV + figures."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .assignment import SensitivityParameter, tv_from_uniform
from .attributable import TaeInstance, separability_test, tae_confidence_set, test_tae_bnb, test_tae_enumeration
from .design import load_design, validate
from .design_sensitivity import DgpSpec, simulate_power, solve_design_sensitivity
from .diagnostics import balance_report
from .hardness import counterexample_instance, formulate_signomial, serialize_signomial, verify_counterexample
from .sharp_null import p_value_curve, worst_case_p_exact_mc, worst_case_p_normal
from .statistics import AdaptiveSpec, adaptive_p, parse_statistic

DEFAULT_SEED = 0


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_sanitize(v) for v in obj.tolist()]
    return obj


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _report(args, subcommand: str, config: dict, results: dict, input_path=None) -> dict:
    return _sanitize(
        {
            "tool": "dosesens",
            "version": __version__,
            "subcommand": subcommand,
            "seed": int(getattr(args, "seed", DEFAULT_SEED) or 0),
            "threads": args.threads,
            "input_digest": _digest(input_path) if input_path else None,
            "config": config,
            "results": results,
        }
    )


def _emit(report: dict, out_path) -> None:
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _figure_path(csv_path) -> str:
    base, _ = os.path.splitext(str(csv_path))
    return base + ".png"


def _load_dgp(path) -> DgpSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return DgpSpec.from_dict(json.load(fh))


def _gamma_list(text: str) -> list[float]:
    return [float(g) for g in text.split(",") if g.strip()]


def _cmd_validate(args) -> int:
    design = load_design(args.input, strict_ties=args.strict_ties)
    diag = validate(design, enumeration_cap=args.cap)
    results = {"diagnostics": diag.to_dict()}
    if args.tv_gamma is not None:
        gp = SensitivityParameter(args.tv_gamma)
        u_plus = design.outcomes.astype(float)
        rows = []
        tvs = []
        for mset, sl in zip(design.sets, design.unit_slices()):
            tv = tv_from_uniform(mset, gp, u_plus[sl])
            rows.append([mset.id, mset.n, mset.m, repr(tv)])
            tvs.append(tv)
        results["tv"] = {"gamma": args.tv_gamma, "mean": float(np.mean(tvs))}
        if args.tv_out:
            _write_csv(args.tv_out, ["set_id", "n", "m", "tv"], rows)
            results["tv"]["csv"] = str(args.tv_out)
            if not args.no_figures:
                from .plots import tv_histogram_figure

                results["tv"]["figure"] = tv_histogram_figure(tvs, _figure_path(args.tv_out))
    _emit(_report(args, "validate", {"input": str(args.input), "cap": args.cap,
                                     "tv_gamma": args.tv_gamma}, results, args.input), args.out)
    return 0


def _cmd_sharp_null(args) -> int:
    design = load_design(args.input, strict_ties=args.strict_ties)
    spec = parse_statistic(args.stat)
    config = {
        "input": str(args.input),
        "statistic": args.stat,
        "gamma": args.gamma,
        "method": args.method,
        "reps": args.reps,
        "alpha": args.alpha,
        "curve": args.curve,
    }
    method = args.method
    results: dict = {}

    def run_single(s, gamma):
        gp = SensitivityParameter(gamma)
        if method == "normal":
            return worst_case_p_normal(design, s, gp)
        return worst_case_p_exact_mc(design, s, gp, reps=args.reps, seed=args.seed)

    def combined(gamma) -> dict:
        if isinstance(spec, AdaptiveSpec):
            parts = [run_single(c, gamma) for c in spec.components]
            p = adaptive_p([r.p_worst for r in parts])
            return {
                "gamma": gamma,
                "Gamma": math.exp(gamma),
                "statistic": spec.label(),
                "p_worst": p,
                "method": method,
                "components": [r.to_dict() for r in parts],
            }
        return run_single(spec, gamma).to_dict()

    if args.curve:
        gammas = _gamma_list(args.curve)
        if isinstance(spec, AdaptiveSpec):
            points = [combined(g) for g in gammas]
        else:
            points = [r.to_dict() for r in p_value_curve(design, spec, gammas, method=method,
                                                         reps=args.reps, seed=args.seed)]
        results["curve"] = points
        cp = None
        for pt in points:
            if pt["p_worst"] > args.alpha:
                cp = pt["Gamma"]
                break
        results["changepoint_Gamma"] = cp
        if args.curve_out:
            _write_csv(args.curve_out, ["Gamma", "p_worst"],
                       [[repr(pt["Gamma"]), repr(pt["p_worst"])] for pt in points])
            results["curve_csv"] = str(args.curve_out)
            if not args.no_figures:
                from .plots import pvalue_curve_figure

                results["curve_figure"] = pvalue_curve_figure(
                    [pt["Gamma"] for pt in points], [pt["p_worst"] for pt in points],
                    args.alpha, _figure_path(args.curve_out))
    else:
        results.update(combined(args.gamma))
    _emit(_report(args, "sharp-null", config, results, args.input), args.out)
    return 0


def _cmd_tae(args) -> int:
    design = load_design(args.input, strict_ties=args.strict_ties)
    gp = SensitivityParameter(args.gamma)
    inst = TaeInstance.from_design(design, threshold=args.threshold, gp=gp,
                                   alpha=args.alpha, unexposed_eps=args.eps)
    config = {
        "input": str(args.input),
        "threshold": args.threshold,
        "eps": args.eps,
        "gamma": args.gamma,
        "alpha": args.alpha,
        "solver": args.solver,
        "delta": args.delta,
        "ci": args.ci,
    }
    results: dict = {"observed_count": inst.observed_count}
    if args.ci:
        if args.solver == "separability":
            accepted = [a for a in range(inst.observed_count + 1)
                        if separability_test(design, inst, a).decision == "accept"]
            results["accepted_set"] = accepted
            results["interval"] = [min(accepted), max(accepted)] if accepted else None
        else:
            ci = tae_confidence_set(design, inst, solver=args.solver)
            results["interval"] = None if ci is None else list(ci)
    else:
        if args.delta is None:
            raise SystemExit("tae: provide --delta or --ci")
        if args.solver == "enum":
            res = test_tae_enumeration(design, inst, args.delta)
        elif args.solver == "separability":
            res = separability_test(design, inst, args.delta)
        else:
            mode = "relaxed" if args.solver == "relaxed" else "exact"
            res = test_tae_bnb(design, inst, args.delta, mode=mode)
        results.update(res.to_dict())
    _emit(_report(args, "tae", config, results, args.input), args.out)
    return 0


def _cmd_design_sens(args) -> int:
    dgp = _load_dgp(args.dgp)
    spec = parse_statistic(args.stat)
    if isinstance(spec, AdaptiveSpec):
        raise SystemExit("design-sens: use a single-component statistic")
    res = solve_design_sensitivity(dgp, spec, mc_draws=args.mc_draws, tol=args.tol, seed=args.seed)
    results = res.to_dict()
    config = {"dgp": dgp.to_dict(), "statistic": args.stat, "mc_draws": args.mc_draws, "tol": args.tol}
    if args.curve_out:
        _write_csv(args.curve_out, ["gamma", "phi_hat", "se"],
                   [[repr(g), repr(v), repr(s)] for g, v, s in res.phi_samples])
        results["curve_csv"] = str(args.curve_out)
        if not args.no_figures:
            from .plots import phi_curve_figure

            results["curve_figure"] = phi_curve_figure(res.phi_samples, res.target_mean,
                                                       res.gamma_tilde, _figure_path(args.curve_out))
    _emit(_report(args, "design-sens", config, results), args.out)
    return 0


def _cmd_power(args) -> int:
    dgp = _load_dgp(args.dgp)
    spec = parse_statistic(args.stat)
    gammas = _gamma_list(args.gamma_grid) if args.gamma_grid else [args.gamma]
    if any(g is None for g in gammas):
        raise SystemExit("power: provide --gamma or --gamma-grid")
    config = {
        "dgp": dgp.to_dict(),
        "statistic": args.stat,
        "sets": args.sets,
        "alpha": args.alpha,
        "reps": args.reps,
        "gammas": gammas,
    }
    points = [
        simulate_power(dgp, spec, g, num_sets=args.sets, alpha=args.alpha,
                       sim_reps=args.reps, seed=args.seed)
        for g in gammas
    ]
    results: dict = {"points": [p.to_dict() for p in points]}
    if args.curve_out:
        _write_csv(args.curve_out, ["Gamma", "power", "se"],
                   [[repr(math.exp(p.gamma)), repr(p.power), repr(p.se)] for p in points])
        results["curve_csv"] = str(args.curve_out)
        if not args.no_figures:
            from .plots import power_curve_figure

            results["curve_figure"] = power_curve_figure(
                [math.exp(p.gamma) for p in points], [p.power for p in points],
                [p.se for p in points], _figure_path(args.curve_out))
    _emit(_report(args, "power", config, results), args.out)
    return 0


def _cmd_balance(args) -> int:
    design = load_design(args.input, strict_ties=args.strict_ties)
    report = balance_report(design, alpha=args.alpha, permutation_reps=args.reps, seed=args.seed)
    results = report.to_dict()
    config = {"input": str(args.input), "alpha": args.alpha, "reps": args.reps}
    if args.csv_out:
        _write_csv(
            args.csv_out,
            ["confounder", "Below", "Above", "SMD", "KS p", "Low", "High", "SMD", "KS p"],
            [
                [r.name, repr(r.mean_below), repr(r.mean_above), repr(r.smd_before),
                 repr(r.ks_p_before), repr(r.mean_low), repr(r.mean_high), repr(r.smd_after),
                 repr(r.ks_p_after)]
                for r in report.rows
            ],
        )
        results["csv"] = str(args.csv_out)
        if not args.no_figures:
            from .plots import balance_figure

            results["figure"] = balance_figure(report.rows, _figure_path(args.csv_out))
    _emit(_report(args, "balance", config, results, args.input), args.out)
    return 0


def _cmd_demo_hardness(args) -> int:
    report = verify_counterexample(seed=args.seed)
    results = {"counterexample": report}
    config = {"emit_program": args.emit_program, "alpha": args.alpha}
    if args.emit_program:
        design, scores, gp, t_obs = counterexample_instance()
        prog = formulate_signomial(design, scores, gp, alpha=args.alpha, t_obs=t_obs)
        with open(args.emit_program, "w", encoding="utf-8") as fh:
            fh.write(serialize_signomial(prog))
        results["program"] = {"path": str(args.emit_program), "counts": prog.counts()}
    _emit(_report(args, "demo-hardness", config, results), args.out)
    return 0 if report["passed"] else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dosesens",
        description="Sensitivity analysis for matched studies with continuous doses and binary outcomes",
    )
    parser.add_argument("--version", action="version", version=f"dosesens {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, with_input=True):
        if with_input:
            p.add_argument("input", help="design CSV (set_id,dose,outcome[,covariates...])")
            p.add_argument("--strict-ties", action="store_true",
                           help="treat tied doses within a set as a parse error")
        p.add_argument("--out", default=None, help="JSON report path (default: stdout)")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument(
            "--threads",
            type=int,
            default=int(os.environ.get("DOSESENS_THREADS", "1")),
            help="worker-parallelism cap; results do not depend on it",
        )
        p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("validate", help="parse a design and report diagnostics")
    common(p)
    p.add_argument("--cap", type=int, default=10, help="full-enumeration size cap")
    p.add_argument("--tv-gamma", type=float, default=None,
                   help="also export per-set total-variation departures at this gamma")
    p.add_argument("--tv-out", default=None, help="TV CSV path (set_id,n,m,tv)")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("sharp-null", help="worst-case p-value for the no-effect null")
    common(p)
    p.add_argument("--stat", required=True, help='e.g. "t", "threshold:0.5", "adaptive:t,threshold:0.1"')
    p.add_argument("--gamma", type=float, default=0.0, help="log sensitivity parameter")
    p.add_argument("--curve", default=None, help="comma-separated ascending gamma grid")
    p.add_argument("--method", choices=["exact-mc", "normal"], default="normal")
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--alpha", type=float, default=0.05, help="level used for the changepoint scan")
    p.add_argument("--curve-out", default=None, help="curve CSV path (Gamma,p_worst)")
    p.set_defaults(func=_cmd_sharp_null)

    p = sub.add_parser("tae", help="threshold attributable effect test or confidence interval")
    common(p)
    p.add_argument("--threshold", type=float, required=True)
    p.add_argument("--eps", type=float, default=0.0, help="doses at or below reveal the zero-dose outcome")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--delta", type=int, default=None)
    p.add_argument("--ci", action="store_true")
    p.add_argument("--solver", choices=["enum", "bnb", "relaxed", "separability"], default="bnb")
    p.set_defaults(func=_cmd_tae)

    p = sub.add_parser("design-sens", help="design sensitivity under a simulated DGP")
    common(p, with_input=False)
    p.add_argument("--dgp", required=True, help="JSON file: {f, beta, dose_law, effect_mean}")
    p.add_argument("--stat", required=True)
    p.add_argument("--mc-draws", type=int, default=100_000)
    p.add_argument("--tol", type=float, default=1e-2)
    p.add_argument("--curve-out", default=None, help="phi-curve CSV path (gamma,phi_hat,se)")
    p.set_defaults(func=_cmd_design_sens)

    p = sub.add_parser("power", help="power of the sensitivity analysis under a simulated DGP")
    common(p, with_input=False)
    p.add_argument("--dgp", required=True)
    p.add_argument("--stat", required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--gamma-grid", default=None, help="comma-separated gamma grid")
    p.add_argument("--sets", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--curve-out", default=None, help="power CSV path (Gamma,power,se)")
    p.set_defaults(func=_cmd_power)

    p = sub.add_parser("balance", help="covariate balance table and randomization test")
    common(p)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--reps", type=int, default=2000, help="permutation draws")
    p.add_argument("--csv-out", default=None, help="balance table CSV path")
    p.set_defaults(func=_cmd_balance)

    p = sub.add_parser("demo-hardness", help="rerun the interior-maximizer counterexample")
    common(p, with_input=False)
    p.add_argument("--emit-program", default=None, help="also write the signomial program here")
    p.add_argument("--alpha", type=float, default=0.05, help="level embedded in the emitted program")
    p.set_defaults(func=_cmd_demo_hardness)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"dosesens: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
