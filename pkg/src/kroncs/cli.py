"""Command-line front end.

Results go to standard output and to files; progress and diagnostics go to
standard error. Every run also writes ``<prefix>.config.json`` holding the
fully resolved arguments, which ``kroncs rerun`` replays exactly.

Exit codes: 0 ok, 1 computation failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .experiments import (SCHEMA_VERSION, rr_independence_check, run_experiment,
                          write_curves_csv, write_json)
from .model import (CorrelationInfeasibleError, CorrelationSpec, SignalPrior, load_instance,
                    make_instance, parse_correlation, save_instance, tridiagonal_factors)
from .recovery import BPParams, basis_pursuit
from .replica import BisectConfig, MCConfig, ReplicaError, find_threshold

logger = logging.getLogger("kroncs")

OUTPUT_DIR_ENV = "KRONCS_OUTPUT_DIR"
TRACE_COLUMNS = ["rho", "r", "alpha", "bracket_mean", "bracket_stderr", "chihat",
                 "n_chain", "n_samples", "seed"]
SWEEP_COLUMNS = ["schema_version", "rho", "r", "alpha_c", "mc_stderr", "chihat",
                 "n_chain", "n_samples", "seed", "status"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parsing

def parse_grid(text: str) -> list[float]:
    """``lo:hi:step`` (inclusive of ``hi`` up to rounding) or a comma list."""
    text = text.strip()
    if not text:
        raise UsageError("empty grid")
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise UsageError(f"grid {text!r} is not lo:hi:step")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0:
            raise UsageError("grid step must be positive")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        if count <= 0:
            raise UsageError(f"grid {text!r} is empty")
        # round away the accumulation error of lo + k*step
        return [round(lo + k * step, 12) for k in range(count)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError("empty grid")
    return vals


def parse_int_list(text: str) -> list[int]:
    vals = [int(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise UsageError("empty N list")
    return vals


def _check_rho(rho: float, open_interval: bool = True) -> None:
    ok = 0.0 < rho < 1.0 if open_interval else 0.0 <= rho <= 1.0
    if not ok:
        raise UsageError(f"rho={rho} must lie in {'(0, 1)' if open_interval else '[0, 1]'}")


def _check_r(r: float) -> None:
    try:
        tridiagonal_factors(r)
    except CorrelationInfeasibleError as exc:
        raise UsageError(str(exc)) from exc


def _spec(text: str, n: int) -> CorrelationSpec:
    try:
        return parse_correlation(text, n)
    except (ValueError, OSError) as exc:
        raise UsageError(f"bad correlation spec {text!r}: {exc}") from exc


def _out_prefix(args, default_name: str) -> Path:
    if args.out:
        prefix = Path(args.out)
    else:
        prefix = Path(os.environ.get(OUTPUT_DIR_ENV, ".")) / default_name
    prefix.parent.mkdir(parents=True, exist_ok=True)
    return prefix


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_config(prefix: Path, args) -> None:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    cfg["schema_version"] = SCHEMA_VERSION
    cfg["version"] = __version__
    write_json(cfg, f"{prefix}.config.json")


def _mc(args) -> MCConfig:
    if args.n_chain < 3 or args.samples < 2:
        raise UsageError("--n-chain must be >= 3 and --samples >= 2")
    return MCConfig(n_chain=args.n_chain, n_samples=args.samples, seed=args.seed)


# ---------------------------------------------------------------- commands

def _trace_rows(res, mc: MCConfig):
    for alpha, bracket, se, chihat in sorted(res.bracket_trace, key=lambda t: t[3]):
        yield [_fmt(res.rho), _fmt(res.r), _fmt(alpha), _fmt(bracket), _fmt(se), _fmt(chihat),
               mc.n_chain, mc.n_samples, mc.seed]


def cmd_threshold(args) -> int:
    _check_rho(args.rho)
    _check_r(args.r)
    mc = _mc(args)
    prefix = _out_prefix(args, f"threshold_rho{args.rho}_r{args.r}")
    try:
        res = find_threshold(SignalPrior(args.rho), args.r, mc, BisectConfig())
    except ReplicaError as exc:
        logger.error("threshold search failed: %s", exc)
        return 1
    _write_config(prefix, args)
    if args.format == "json":
        write_json({"schema_version": SCHEMA_VERSION, "result": res.to_dict(),
                    "config": {"n_chain": mc.n_chain, "n_samples": mc.n_samples, "seed": mc.seed}},
                   f"{prefix}.json")
    with open(f"{prefix}.trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        w.writerows(_trace_rows(res, mc))
    if not res.monotone:
        logger.warning("bracket factor not monotone near the crossing")
    print(f"alpha_c = {_fmt(res.alpha_c)} +- {_fmt(res.mc_stderr)}")
    return 0


def cmd_sweep(args) -> int:
    if (args.rho is None) == (args.r is None):
        raise UsageError("give exactly one of --rho (with --r-grid) or --r (with --rho-grid)")
    if args.rho is not None:
        if args.r_grid is None:
            raise UsageError("--rho needs --r-grid")
        _check_rho(args.rho)
        pts = [(args.rho, r) for r in parse_grid(args.r_grid)]
        for _, r in pts:
            _check_r(r)
    else:
        if args.rho_grid is None:
            raise UsageError("--r needs --rho-grid")
        _check_r(args.r)
        pts = [(rho, args.r) for rho in parse_grid(args.rho_grid)]
        for rho, _ in pts:
            _check_rho(rho)
    mc = _mc(args)
    prefix = _out_prefix(args, "sweep")
    rows, failures = [], 0
    for rho, r in pts:
        logger.info("sweep point rho=%s r=%s", rho, r)
        try:
            res = find_threshold(SignalPrior(rho), r, mc, BisectConfig())
            rows.append([SCHEMA_VERSION, _fmt(rho), _fmt(r), _fmt(res.alpha_c), _fmt(res.mc_stderr),
                         _fmt(res.chihat_at_threshold), mc.n_chain, mc.n_samples, mc.seed, "ok"])
        except (ValueError, ReplicaError) as exc:
            failures += 1
            logger.warning("rho=%s r=%s failed: %s", rho, r, exc)
            rows.append([SCHEMA_VERSION, _fmt(rho), _fmt(r), "nan", "nan", "nan",
                         mc.n_chain, mc.n_samples, mc.seed, f"error: {exc}"])
    _write_config(prefix, args)
    if args.format == "json":
        write_json({"schema_version": SCHEMA_VERSION, "columns": SWEEP_COLUMNS, "rows": rows},
                   f"{prefix}.json")
    else:
        with open(f"{prefix}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SWEEP_COLUMNS)
            w.writerows(rows)
    w = csv.writer(sys.stdout)
    w.writerow(SWEEP_COLUMNS)
    w.writerows(rows)
    return 1 if failures == len(pts) else 0


def _params(args, certify: bool) -> BPParams:
    return BPParams(penalty=args.penalty, tol_primal=args.tol, tol_dual=args.tol,
                    max_iters=args.max_iters, certify=certify)


def _resolve_center(args) -> float:
    if args.center is not None:
        return args.center
    mc = MCConfig(n_chain=args.center_n_chain, n_samples=args.center_samples, seed=args.seed)
    logger.info("centering the alpha grid on a replica estimate (n_chain=%d, samples=%d)",
                mc.n_chain, mc.n_samples)
    res = find_threshold(SignalPrior(args.rho), args.r, mc)
    args.center = round(res.alpha_c, 4)
    return args.center


def cmd_experiment(args) -> int:
    ns = parse_int_list(args.n)
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    if args.points < 2:
        raise UsageError("--points must be at least 2")
    _check_rho(args.rho)
    _check_r(args.r)
    if any(n < 10 for n in ns):
        raise UsageError("every N must be at least 10")
    rr = _spec(args.rr, 3)
    if rr.kind == "custom":
        raise UsageError("a custom Rr cannot follow alpha across the grid; use identity or tridiag")
    try:
        center = _resolve_center(args)
        res = run_experiment(ns, args.rho, args.r, rr, center, args.trials, args.seed,
                             points=args.points, step_at_200=args.step, workers=args.workers,
                             params=_params(args, certify=not args.no_certify))
    except ReplicaError as exc:
        logger.error("could not center the grid: %s", exc)
        return 1
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    prefix = _out_prefix(args, f"experiment_rho{args.rho}_r{args.r}")
    _write_config(prefix, args)
    write_curves_csv(res.curves, f"{prefix}.curves.csv")
    write_json(res.to_dict(), f"{prefix}.json")
    for c in res.curves:
        flag = " flagged: " + "; ".join(c.notes) if c.flagged else ""
        print(f"n = {c.n} alpha_c_n = {_fmt(c.alpha_c_n)} +- {_fmt(c.alpha_c_n_stderr)}{flag}")
    ok = False
    for var, fit in res.fits.items():
        if isinstance(fit, str):
            print(f"{var}: fit failed ({fit})")
            continue
        ok = True
        star = " (preferred)" if var == res.preferred else ""
        print(f"{var}: alpha_c_inf = {_fmt(fit.alpha_c_inf)} +- {_fmt(fit.alpha_c_inf_stderr)}"
              f" chi2/dof = {_fmt(fit.chi2_dof)}{star}")
    return 0 if ok else 1


def cmd_rr_check(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    _check_rho(args.rho)
    _check_r(args.r)
    specs = args.rr or ["identity", "tridiag:0.4"]
    if len(specs) < 2:
        raise UsageError("give at least two --rr specs")
    from .model import n_observations
    try:
        p = n_observations(args.n, args.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rrs = [_spec(s, p) for s in specs]
    try:
        rep = rr_independence_check(args.n, args.rho, args.r, rrs, args.alpha, args.trials,
                                    args.seed, workers=args.workers,
                                    params=_params(args, certify=not args.no_certify))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    prefix = _out_prefix(args, "rr_check")
    _write_config(prefix, args)
    write_json(rep.to_dict(), f"{prefix}.json")
    for lab, t, s, f in zip(rep.labels, rep.trials, rep.successes, rep.fractions):
        print(f"{lab} successes = {s}/{t} fraction = {_fmt(f)}")
    for i, j, z in rep.z_scores:
        print(f"z[{i},{j}] = {_fmt(z)}")
    print(f"independent_within_3sigma = {rep.supported}")
    return 0


def cmd_generate(args) -> int:
    _check_rho(args.rho, open_interval=False)
    from .model import n_observations
    try:
        p = n_observations(args.n, args.alpha)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rt = _spec(args.rt, args.n)
    rr = _spec(args.rr, p)
    try:
        inst = make_instance(SignalPrior(args.rho), args.n, args.alpha, rt, rr, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    prefix = _out_prefix(args, f"instance_n{args.n}_seed{args.seed}")
    bin_path, csv_path = save_instance(inst, prefix)
    _write_config(prefix, args)
    print(f"{bin_path}\n{csv_path}")
    return 0


def cmd_reconstruct(args) -> int:
    try:
        inst = load_instance(args.instance)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load instance {args.instance!r}: {exc}") from exc
    try:
        res = basis_pursuit(inst, _params(args, certify=False))
    except np.linalg.LinAlgError as exc:
        logger.error("solver failed: %s", exc)
        return 1
    prefix = _out_prefix(args, Path(args.instance).name + ".recon")
    _write_config(prefix, args)
    with open(f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "x_hat", "x0"])
        for i, (a, b) in enumerate(zip(res.x_hat, inst.x0)):
            w.writerow([i, _fmt(a), _fmt(b)])
    print(f"success = {res.success}")
    print(f"rel_error = {_fmt(res.rel_error)}")
    print(f"iters = {res.iters} converged = {res.converged}")
    print(f"objective = {_fmt(res.objective)}")
    return 0 if res.converged else 1


def cmd_rerun(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config!r}: {exc}") from exc
    argv = config_to_argv(cfg)
    logger.info("rerunning: %s", " ".join(argv))
    return main(argv)


# ---------------------------------------------------------------- wiring

def _add_common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", default=None,
                   help=f"output path prefix (default: ${OUTPUT_DIR_ENV} or the current directory)")
    p.add_argument("--format", choices=["csv", "json"], default="json")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_mc(p):
    p.add_argument("--n-chain", type=int, default=100_000)
    p.add_argument("--samples", type=int, default=50)


def _add_solver(p):
    p.add_argument("--penalty", type=float, default=1.0)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iters", type=int, default=50_000)


def _add_workers(p):
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kroncs", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("threshold", help="replica reconstruction limit for one (rho, r)")
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--r", type=float, required=True)
    _add_mc(p)
    _add_common(p)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("sweep", help="thresholds over a rho grid or an r grid")
    p.add_argument("--rho", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--rho-grid")
    p.add_argument("--r-grid")
    _add_mc(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep, format="csv")

    p = sub.add_parser("experiment", help="empirical transition curves and N -> inf extrapolation")
    p.add_argument("--n", default="100,200,400,800", help="comma-separated N values")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--rr", default="identity")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--points", type=int, default=9)
    p.add_argument("--step", type=float, default=0.02, help="alpha spacing at N=200")
    p.add_argument("--center", type=float, default=None,
                   help="grid center (default: a reduced-size replica estimate)")
    p.add_argument("--center-n-chain", type=int, default=20_000)
    p.add_argument("--center-samples", type=int, default=10)
    p.add_argument("--no-certify", action="store_true",
                   help="run every solve to the residual tolerance")
    _add_solver(p)
    _add_workers(p)
    _add_common(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("rr-check", help="success fractions for several Rr at one alpha")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--r", type=float, default=0.5)
    p.add_argument("--alpha", type=float, default=0.85)
    p.add_argument("--rr", action="append", help="repeat for each Rr (default: identity, tridiag:0.4)")
    p.add_argument("--trials", type=int, default=500)
    p.add_argument("--no-certify", action="store_true")
    _add_solver(p)
    _add_workers(p)
    _add_common(p)
    p.set_defaults(func=cmd_rr_check)

    p = sub.add_parser("generate", help="sample and save one instance (F, x0, y)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--rt", default="identity")
    p.add_argument("--rr", default="identity")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("reconstruct", help="basis pursuit on a saved instance")
    p.add_argument("--instance", required=True, help="path stem of the .bin/.csv pair")
    _add_solver(p)
    _add_common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("rerun", help="replay a run from its .config.json")
    p.add_argument("config")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_rerun)
    return ap


def config_to_argv(cfg: dict) -> list[str]:
    """Turn a saved config back into command-line arguments."""
    cfg = dict(cfg)
    cmd = cfg.pop("command", None)
    if cmd is None:
        raise UsageError("config has no command")
    cfg.pop("schema_version", None)
    cfg.pop("version", None)
    argv = [cmd]
    for key, val in cfg.items():
        if val is None or val is False:
            continue
        flag = "--" + key.replace("_", "-")
        if val is True:
            argv.append(flag)
        elif isinstance(val, list):
            for v in val:
                argv += [flag, str(v)]
        else:
            argv += [flag, repr(val) if isinstance(val, float) else str(val)]
    return argv


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"kroncs {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"kroncs {args.command}: computation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
