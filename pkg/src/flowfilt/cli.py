"""Command-line front end: ``flowfilt run | gradcheck | selftest``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config
from .errors import ContractError, FlowFiltError
from .filter import METHODS, kalman_filter, run_scenario

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_FLOW = 0, 1, 2, 3

log = logging.getLogger("flowfilt")


def worker_count(jobs: int) -> int:
    cap = os.environ.get("FLOWFILT_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        limit = 1
    return max(1, min(jobs, limit))


def _run_method(cfg, method, trace):
    traces = []

    def keep(step, result):
        if result[1] is not None:
            traces.append((step, result[1]))

    scenario = cfg.scenario
    if trace and method.startswith("flow"):
        scenario = replace(scenario, flow_cfg=replace(scenario.flow_cfg, trace=True))
    records = run_scenario(scenario, method, on_update=keep)
    return records, traces


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def estimate_header(n: int, with_kalman: bool):
    cols = ["step", "method"] + [f"mean_{i + 1}" for i in range(n)]
    cols += [f"cov_{i + 1}_{j + 1}" for i in range(n) for j in range(n)] + ["ess"]
    if with_kalman:
        cols += [f"kalman_mean_{i + 1}" for i in range(n)]
        cols += [f"kalman_cov_{i + 1}_{j + 1}" for i in range(n) for j in range(n)]
    return cols


def write_estimates(path, records, n, kalman=None):
    """One row per record; floats with 17 significant digits so re-reading is exact."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(estimate_header(n, kalman is not None))
        for rec in records:
            row = [rec.step, rec.method] + [_fmt(v) for v in rec.mean] + [_fmt(v) for v in rec.cov.ravel()]
            row.append(_fmt(rec.ess))
            if kalman is not None:
                km, kP = kalman[rec.step]
                row += [_fmt(v) for v in km] + [_fmt(v) for v in np.ravel(kP)]
            w.writerow(row)


def read_estimates(path):
    """Parse ``estimates.csv`` back into dicts with float arrays."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames
        n = sum(c.startswith("mean_") for c in cols)
        for row in reader:
            rec = {"step": int(row["step"]), "method": row["method"],
                   "mean": np.array([float(row[f"mean_{i + 1}"]) for i in range(n)]),
                   "cov": np.array([[float(row[f"cov_{i + 1}_{j + 1}"]) for j in range(n)] for i in range(n)]),
                   "ess": float(row["ess"])}
            if "kalman_mean_1" in cols:
                rec["kalman_mean"] = np.array([float(row[f"kalman_mean_{i + 1}"]) for i in range(n)])
                rec["kalman_cov"] = np.array([[float(row[f"kalman_cov_{i + 1}_{j + 1}"]) for j in range(n)]
                                              for i in range(n)])
            out.append(rec)
    return out


def _write_trace(path, traces, n):
    diag = []
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "step", "gamma", "particle_index"] + [f"x{i + 1}" for i in range(n)])
        for method, step, tr in traces:
            for gamma, i, x in tr.rows():
                w.writerow([method, step, _fmt(gamma), i] + [_fmt(v) for v in x])
            diag.append({"method": method, "step": step, "stages": tr.diagnostics})
    Path(path).with_name("trace_diagnostics.json").write_text(json.dumps(diag, indent=1), encoding="utf-8")


def _kalman_reference(cfg):
    if cfg.kalman is None:
        return None
    k = cfg.kalman
    s = cfg.scenario
    ref = [(np.asarray(k["mean"]), np.asarray(k["cov"]))]
    ref += kalman_filter(k["mean"], k["cov"], k["A"], k["Q"], k["H"], k["R"], s.measurements, s.system.inputs)
    return ref


def run_config(config_path, out_dir=None, methods=None, seed=None, trace=None, quiet=False) -> int:
    """Execute a config file; returns the process exit code."""
    try:
        cfg = load_config(config_path, seed_override=seed)
        if methods:
            bad = [m for m in methods if m not in METHODS]
            if bad:
                raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}", path="--methods")
            methods = tuple(methods)
        else:
            methods = cfg.methods
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out_dir) if out_dir is not None else (cfg.out_dir or Path("results") / cfg.name)
    want_trace = cfg.trace if trace is None else trace

    results = {}
    try:
        with ThreadPoolExecutor(max_workers=worker_count(len(methods))) as pool:
            futures = {m: pool.submit(_run_method, cfg, m, want_trace) for m in methods}
            for m in methods:
                results[m] = futures[m].result()
    except FlowFiltError as exc:
        step = getattr(exc, "step", "?")
        print(f"error at step {step}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ContractError) else EXIT_FLOW

    records = [rec for m in methods for rec in results[m][0]]
    n = cfg.scenario.prior.dim
    kalman = _kalman_reference(cfg)
    out.mkdir(parents=True, exist_ok=True)
    write_estimates(out / "estimates.csv", records, n, kalman)
    report = {
        "name": cfg.name,
        "version": __version__,
        "config_hash": cfg.config_hash,
        "seed": cfg.seed,
        "methods": list(methods),
        "measurements": len(cfg.scenario.measurements),
        "records": [{"step": r.step, "method": r.method, "mean": r.mean.tolist(), "cov": r.cov.tolist(),
                     "ess": r.ess, "wall_ms": r.wall_ms} for r in records],
        "kalman": None if kalman is None else [{"step": k, "mean": m.tolist(), "cov": P.tolist()}
                                               for k, (m, P) in enumerate(kalman)],
    }
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    if want_trace:
        traces = [(m, step, tr) for m in methods for step, tr in results[m][1]]
        _write_trace(out / "trace.csv", traces, n)
    if not quiet:
        print(f"{len(records)} records for {', '.join(methods)} written to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    methods = [m.strip() for m in args.methods.split(",")] if args.methods else None
    return run_config(args.config, args.out, methods, args.seed, True if args.trace else None)


def cmd_gradcheck(args) -> int:
    from .checks import GRAD_TOL, HESS_TOL, J_TOL, derivative_check

    rep = derivative_check(args.trials, args.seed, fault=args.inject_fault)
    print(f"{rep['trials']} random instances (seed {args.seed})")
    print(f"  worst gradient rel. error {rep['worst_gradient']:.3e}  (limit {GRAD_TOL:g})")
    print(f"  worst Hessian  rel. error {rep['worst_hessian']:.3e}  (limit {HESS_TOL:g})")
    print(f"  worst J-vector rel. error {rep['worst_j']:.3e}  (limit {J_TOL:g})")
    fail = rep["failure"]
    if fail is not None:
        print(f"FAIL: instance {fail['instance']} (reproduce with --seed {fail['seed']} --trials {fail['instance'] + 1}; "
              f"N={fail['N']}, L={fail['L']}, M={fail['M']}, errors {', '.join(f'{e:.3e}' for e in fail['errors'])})")
        return EXIT_FAIL
    print("PASS")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .checks import CHECKS, run_checks

    if args.list:
        for name, text in CHECKS.items():
            print(f"{name:18s} {text}")
        return EXIT_OK
    names = args.only.split(",") if args.only else None
    if names:
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            print(f"unknown check(s): {unknown}", file=sys.stderr)
            return EXIT_CONFIG
    results = run_checks(names, flow_steps=args.flow_steps)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:18s} {r.seconds:6.2f}s  {r.detail}")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowfilt", description="Particle flow filtering by homotopy continuation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: output.dir or results/<name>)")
    r.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    r.add_argument("--seed", type=int, help="override scenario.seed")
    r.add_argument("--trace", action="store_true", help="write trace.csv for flow methods")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gradcheck", help="finite-difference check of gradient, Hessian and J-vectors")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", action="store_true", help="flip the gradient sign (the check must fail)")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("selftest", help="run the acceptance checks")
    s.add_argument("--list", action="store_true", help="list the checks without running them")
    s.add_argument("--only", help="comma-separated subset of checks")
    s.add_argument("--flow-steps", type=int, default=64, help="RK4 steps for the fixed-step checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "trials", 0) is not None and getattr(args, "trials", 0) < 0:
        print("--trials must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "flow_steps", 1) < 1:
        print("--flow-steps must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
