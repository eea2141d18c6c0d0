"""Command-line entry points: ``attribute`` and ``simulate``.

Exit codes: 0 on success, 2 for invalid input or flags, 3 for failures while running.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mechshift.attribution import AttributionConfig, AttributionReport, Functional, attribute_joint, attribute_marginal
from mechshift.errors import MechShiftError, ValidationError
from mechshift.graph import parse_graph_file
from mechshift.shapley import EXACT, PERMUTATION_SAMPLED
from mechshift.simulate import SimConfig, SimResult, parse_sim_config, run_simulation
from mechshift.tabular import load_csv

logger = logging.getLogger("mechshift")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
FORMATS = ("json", "csv")
CSV_COLUMNS = ("node", "phi", "ci_lo", "ci_hi", "p_value", "gated", "schema_version")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, frozenset, set)):
        return list(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def report_to_text(report: AttributionReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, default=_json_default) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for node in report.to_dict()["nodes"]:
            lo, hi = (node["ci"][0], node["ci"][1]) if node["ci"] else ("", "")
            p = "" if node["p_value"] is None else repr(node["p_value"])
            writer.writerow([node["name"], repr(node["phi"]), lo, hi, p, int(node["gated"]), 1])
        return buf.getvalue()
    raise ValidationError(f"unknown report format {fmt!r}; expected one of {', '.join(FORMATS)}")


def write_report(report: AttributionReport, path, fmt: str = "json") -> None:
    """Serialise ``report`` to ``path`` (``-`` for stdout) as json or csv."""
    text = report_to_text(report, fmt)
    if str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def read_report(path) -> AttributionReport:
    return AttributionReport.from_dict(json.loads(Path(path).read_text()))


def sim_result_to_text(result: SimResult, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(result.to_dict(), indent=2, default=_json_default) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["regressor", "lambda", "sample_size", "mean_l1", "std_error", "std", "n_trials"])
        for c in result.cells:
            lam = "uniform" if c.lam is None else repr(c.lam)
            writer.writerow([c.regressor, lam, c.sample_size, repr(c.mean_l1), repr(c.std_error), repr(c.std), c.n_trials])
        return buf.getvalue()
    raise ValidationError(f"unknown format {fmt!r}")


def _parse_shapley(text: str) -> tuple[str, int]:
    if text == "exact":
        return EXACT, 1000
    if text.startswith("sampled:"):
        try:
            n = int(text.split(":", 1)[1])
        except ValueError:
            raise ValidationError(f"bad permutation count in {text!r}") from None
        if n < 2:
            raise ValidationError("sampled Shapley needs at least 2 permutations")
        return PERMUTATION_SAMPLED, n
    raise ValidationError(f"--shapley must be 'exact' or 'sampled:N', got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mechshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    att = sub.add_parser("attribute", help="attribute a change between two samples to graph nodes")
    att.add_argument("--graph", required=True, help="graph description file")
    att.add_argument("--old", required=True, help="CSV sample before the change")
    att.add_argument("--new", required=True, help="CSV sample after the change")
    att.add_argument("--mode", choices=("joint", "marginal"), required=True)
    att.add_argument("--target", help="target node (marginal mode)")
    att.add_argument("--functional", default="mean", help="mean, variance, median, quantile:Q or kl")
    att.add_argument("--shapley", default="exact", help="exact or sampled:N")
    att.add_argument("--alpha", type=float, default=0.05, help="significance level of the change tests")
    att.add_argument("--permutations", type=int, default=500, help="permutations per change test")
    att.add_argument("--no-gating", action="store_true", help="treat every node as a candidate")
    att.add_argument("--regressor", choices=("linear", "nearest_neighbor"), default="linear")
    att.add_argument("--draws", type=int, default=100_000, help="Monte-Carlo draws per change set")
    att.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples (0 disables)")
    att.add_argument("--level", type=float, default=0.95, help="confidence level of bootstrap intervals")
    att.add_argument("--seed", type=int, default=0)
    att.add_argument("--workers", type=int, default=1)
    att.add_argument("--output", default="-", help="report path, '-' for stdout")
    att.add_argument("--format", choices=FORMATS, default="json")
    att.set_defaults(func=cmd_attribute)

    sim = sub.add_parser("simulate", help="run the star-graph simulation with known ground truth")
    sim.add_argument("--config", help="key=value file with simulation settings")
    sim.add_argument("--lambdas", help="comma-separated fixed change magnitudes")
    sim.add_argument("--lambda-range", help="lo,hi: draw the magnitude per SCM pair uniformly")
    sim.add_argument("--sizes", help="comma-separated sample sizes")
    sim.add_argument("--pairs", type=int, help="number of SCM pairs")
    sim.add_argument("--samples", type=int, help="datasets per SCM pair")
    sim.add_argument("--regressors", help="comma-separated: linear, nearest_neighbor")
    sim.add_argument("--p-change", type=float, help="probability that a node's mechanism changes")
    sim.add_argument("--draws", type=int, help="Monte-Carlo draws per change set")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--workers", type=int)
    sim.add_argument("--output", default="-")
    sim.add_argument("--format", choices=FORMATS, default="json")
    sim.set_defaults(func=cmd_simulate)
    return parser


def cmd_attribute(args: argparse.Namespace) -> int:
    if args.mode == "marginal" and not args.target:
        raise ValidationError("--target is required in marginal mode")
    psi = Functional.parse(args.functional)
    method, n_perm = _parse_shapley(args.shapley)
    dag = parse_graph_file(Path(args.graph).read_text())
    old = load_csv(args.old, dag)
    new = load_csv(args.new, dag)
    config = AttributionConfig(
        regressor=args.regressor,
        gating=not args.no_gating,
        alpha=args.alpha,
        n_permutations=args.permutations,
        shapley=method,
        shapley_permutations=n_perm,
        n_draws=args.draws,
        bootstrap=args.bootstrap,
        level=args.level,
        seed=args.seed,
        workers=args.workers,
    )
    if args.mode == "joint":
        report = attribute_joint(old, new, dag, config)
    else:
        report = attribute_marginal(old, new, dag, args.target, psi, config)
    write_report(report, args.output, args.format)
    return EXIT_OK


def sim_config_from_args(args: argparse.Namespace) -> SimConfig:
    values: dict[str, str] = {}
    if args.config:
        base = parse_sim_config(Path(args.config).read_text())
        values = {}
        for key, val in base.__dict__.items():
            if val is None:
                values[key] = "none"
            elif isinstance(val, tuple):
                values[key] = ",".join(str(v) for v in val)
            else:
                values[key] = str(val)
    overrides = {
        "lambdas": args.lambdas,
        "lambda_range": args.lambda_range,
        "sample_sizes": args.sizes,
        "n_pairs": args.pairs,
        "n_samples": args.samples,
        "regressors": args.regressors,
        "p_change": args.p_change,
        "n_draws": args.draws,
        "seed": args.seed,
        "workers": args.workers,
    }
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    return SimConfig.from_mapping(values)


def cmd_simulate(args: argparse.Namespace) -> int:
    config = sim_config_from_args(args)
    result = run_simulation(config)
    text = sim_result_to_text(result, args.format)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        Path(args.output).write_text(text)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (MechShiftError, OSError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
