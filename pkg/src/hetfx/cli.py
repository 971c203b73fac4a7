"""Command-line front end.

    hetfx simulate --scenario I --method psr --n 1000 --reps 200 --seed 7 --out run/
    hetfx compare  --scenario III --methods psr,ipw,aipw,match --n 2000 --out cmp/
    hetfx estimate data.csv --treatment d --outcome y --xl age --out est/
    hetfx replay   run/manifest.json --out again/

Every run writes ``manifest.json`` next to its results. The manifest holds all
resolved settings; ``replay`` re-runs from it and reproduces the outputs
bit for bit. The thread count is left out of the manifest on purpose,
since it does not affect results.

Exit codes: 0 ok, 2 finished with a warning, 64 usage error, 65 data error,
1 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import (
    EvaluationGrid,
    _fmt,
    atomic_write_text,
    default_grid,
    read_csv,
    results_to_text,
)
from .errors import (
    ConfigurationError,
    DataError,
    HetfxError,
    InvalidArgumentError,
    ReliabilityWarning,
    SchemaError,
    SeparationWarning,
    SparseOverlapWarning,
)
from .kernel import KernelKind
from .simbench import (
    CANONICAL,
    METHODS,
    SIMULATIONS,
    MethodSettings,
    ScenarioConfig,
    estimate_method,
    run_comparison,
)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_WARNING = 2
EXIT_USAGE = 64
EXIT_DATA = 65

SCORE_CHOICES = {"logit": "fit_logit", "probit": "fit_probit", "external": "external"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_estimator_flags(p, methods_flag=True):
    if methods_flag:
        p.add_argument("--method", choices=METHODS, default="psr")
    p.add_argument("--kernel", choices=[k.value for k in KernelKind], default="gauss")
    p.add_argument("--bandwidth", choices=("ref", "rot", "lscv"), default="ref")
    p.add_argument("--score", choices=tuple(SCORE_CHOICES), default="logit")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--bootstrap", type=int, default=100, help="bootstrap resamples for the matching variant")
    p.add_argument("--grid-size", type=_positive_int, default=25)
    p.add_argument("--seed", type=int, default=None, help="master seed (falls back to $HETFX_SEED, then 0)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default="csv")


def _add_sim_flags(p):
    p.add_argument("--scenario", required=True, choices=tuple(SIMULATIONS))
    p.add_argument("--mechanism", choices=("A", "B", "C", "D"))
    p.add_argument("--n", type=_positive_int, default=1000)
    p.add_argument("--p", type=int, default=5)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--threads", type=_positive_int, default=_cpu_count())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hetfx", description="Heterogeneous treatment effects by propensity score regression.")
    parser.add_argument("--version", action="version", version=f"hetfx {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="Monte Carlo metrics for one method")
    _add_sim_flags(sim)
    _add_estimator_flags(sim)

    cmp_ = sub.add_parser("compare", help="paired Monte Carlo comparison of several methods")
    _add_sim_flags(cmp_)
    cmp_.add_argument("--methods", default=",".join(METHODS), help="comma-separated subset of " + ",".join(METHODS))
    _add_estimator_flags(cmp_, methods_flag=False)

    est = sub.add_parser("estimate", help="estimate tau(x) on a CSV file")
    est.add_argument("csv")
    est.add_argument("--treatment", default="d")
    est.add_argument("--outcome", default="y")
    est.add_argument("--xl", required=True, help="column of the effect modifier X^l")
    est.add_argument("--score-col", default=None, help="column of known propensity scores")
    est.add_argument("--covariates", default="all", help="comma-separated covariate columns, or 'all'")
    _add_estimator_flags(est)

    rep = sub.add_parser("replay", help="re-run from a manifest")
    rep.add_argument("manifest")
    rep.add_argument("--out", default=".")
    rep.add_argument("--threads", type=_positive_int, default=_cpu_count())
    return parser


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

MANIFEST_KEYS = {
    "simulate": ("scenario", "mechanism", "method", "n", "p", "reps", "seed", "grid_size", "kernel", "bandwidth", "score", "level", "bootstrap", "format"),
    "compare": ("scenario", "mechanism", "methods", "n", "p", "reps", "seed", "grid_size", "kernel", "bandwidth", "score", "level", "bootstrap", "format"),
    "estimate": ("csv", "treatment", "outcome", "xl", "score_col", "covariates", "method", "seed", "grid_size", "kernel", "bandwidth", "score", "level", "bootstrap", "format"),
}


def _manifest(args) -> dict:
    settings = {k: getattr(args, k) for k in MANIFEST_KEYS[args.command]}
    return {
        "command": args.command,
        "settings": settings,
        "versions": {
            "hetfx": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }


def _resolve(args):
    """Fill seed and mechanism defaults and check flag combinations."""
    if args.seed is None:
        env = os.environ.get("HETFX_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"HETFX_SEED must be an integer, got {env!r}") from None
    if not 0 < args.level < 1:
        raise UsageError("--level must lie in (0, 1)")
    if args.bootstrap < 0:
        raise UsageError("--bootstrap must be non-negative")
    if args.command in ("simulate", "compare"):
        if args.reps < 2:
            raise UsageError("--reps must be at least 2")
        if args.p < 5:
            raise UsageError("--p must be at least 5")
        model, mech = SIMULATIONS[args.scenario]
        if args.mechanism is not None and args.mechanism != mech:
            if args.scenario not in CANONICAL:
                raise UsageError(f"--mechanism conflicts with Simulation {args.scenario} (uses {mech})")
            mech = args.mechanism
        args.mechanism = mech
        if args.command == "compare":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            bad = [m for m in methods if m not in METHODS]
            if bad or not methods:
                raise UsageError(f"unknown method(s) in --methods: {', '.join(bad) or '(empty)'}")
            args.methods = ",".join(methods)
    if args.command == "estimate":
        if args.score == "external" and args.score_col is None:
            raise UsageError("--score external needs --score-col")
        if args.score_col is not None:
            args.score = "external"
    return args


def _settings(args) -> MethodSettings:
    return MethodSettings(SCORE_CHOICES[args.score], args.kernel, args.bandwidth, args.level, args.bootstrap)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def _grid_diagnostics_csv(reports) -> str:
    lines = ["method,x,bias,mse,cp95,missing"]
    for rep in reports:
        d = rep.diagnostics
        for g, x in enumerate(rep.grid.points):
            vals = (x, d["bias"][g], d["mse"][g], d["cp95"][g], d["missing"][g])
            lines.append(rep.method + "," + ",".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def _write_outputs(out: Path, files: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        atomic_write_text(out / name, text)


def _run_mc(args, out: Path) -> int:
    model, _ = SIMULATIONS[args.scenario]
    config = ScenarioConfig(model, args.mechanism, args.n, args.p)
    methods = (args.method,) if args.command == "simulate" else tuple(args.methods.split(","))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ReliabilityWarning)
        reports = run_comparison(config, methods, args.reps, args.grid_size, args.seed, _settings(args), args.threads)
    payload = reports[0] if args.command == "simulate" else reports
    files = {
        f"results.{args.format}": results_to_text(payload, args.format),
        "grid_diagnostics.csv": _grid_diagnostics_csv(reports),
        "manifest.json": json.dumps(_manifest(args), indent=2, sort_keys=True) + "\n",
    }
    _write_outputs(out, files)
    print(results_to_text(payload, "csv"), end="")
    if config.experimental:
        print(f"note: {config.outcome_model}/{config.mechanism} is a non-canonical pairing", file=sys.stderr)
    flagged = [r for r in reports if r.warning]
    for r in flagged:
        print(f"warning: {r.method}: {r.warning}", file=sys.stderr)
    return EXIT_WARNING if flagged or any(issubclass(w.category, ReliabilityWarning) for w in caught) else EXIT_OK


def _plot_csv(est) -> str:
    lines = ["x,estimate,lo,hi,method"]
    for g, x in enumerate(est.grid.points):
        lo = None if est.ci_lo is None else est.ci_lo[g]
        hi = None if est.ci_hi is None else est.ci_hi[g]
        lines.append(",".join(_fmt(v) for v in (x, est.tau_hat[g], lo, hi)) + f",{est.method}")
    return "\n".join(lines) + "\n"


def _run_estimate(args, out: Path) -> int:
    cov = "all" if args.covariates == "all" else [c.strip() for c in args.covariates.split(",") if c.strip()]
    ds = read_csv(args.csv, args.treatment, args.outcome, args.xl, args.score_col, cov)
    grid = default_grid(ds, args.grid_size) if args.grid_size >= 2 else EvaluationGrid(np.array([float(np.median(ds.xl))]))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        est = estimate_method(args.method, ds, grid, _settings(args), seed=args.seed)
    files = {
        f"results.{args.format}": results_to_text(est, args.format),
        "plot.csv": _plot_csv(est),
        "manifest.json": json.dumps(_manifest(args), indent=2, sort_keys=True) + "\n",
    }
    _write_outputs(out, files)
    diag = est.diagnostics
    lo, hi = diag.get("score_range", (float("nan"), float("nan")))
    print(f"rows used: {ds.n} (dropped {ds.dropped_rows})", file=sys.stderr)
    print(f"score range: [{lo:.4g}, {hi:.4g}]", file=sys.stderr)
    if "regularized_fraction" in diag:
        print(f"regularized fraction: {diag['regularized_fraction']:.3f}", file=sys.stderr)
    print(f"bandwidths: {', '.join(f'{k}={v:.4g}' for k, v in sorted(est.bandwidths.items()))}", file=sys.stderr)
    serious = [w for w in caught if issubclass(w.category, (SparseOverlapWarning, SeparationWarning))]
    for w in serious:
        print(f"warning: {w.message}", file=sys.stderr)
    return EXIT_WARNING if serious else EXIT_OK


def _load_manifest(path) -> argparse.Namespace:
    try:
        m = json.loads(Path(path).read_text(encoding="utf-8"))
        command = m["command"]
        settings = m["settings"]
        if command not in MANIFEST_KEYS or set(settings) != set(MANIFEST_KEYS[command]):
            raise KeyError(command)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"not a usable manifest: {path} ({exc})") from None
    return argparse.Namespace(command=command, **settings)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        out = Path(args.out)
        if args.command == "replay":
            threads = args.threads
            args = _load_manifest(args.manifest)
            args.threads = threads
        _resolve(args)
        if args.command == "estimate":
            return _run_estimate(args, out)
        return _run_mc(args, out)
    except UsageError as exc:
        print(f"hetfx: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, DataError) as exc:
        row = getattr(exc, "row", None)
        where = f" (row {row})" if row is not None else ""
        print(f"hetfx: data error{where}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidArgumentError, ConfigurationError) as exc:
        print(f"hetfx: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HetfxError as exc:
        print(f"hetfx: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"hetfx: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
