"""Command-line front end.

Subcommands cover the pipeline stages individually (simulate, train,
estimate, bounds, plotdata, eval) plus the coupled report run (full-run) and
replication study (monte-carlo).  Exit codes: 0 success, 1 I/O failure,
2 invalid configuration or usage, 3 numerical failure, 4 malformed data file.

Environment: SEATORQUE_OUTDIR overrides the default output directory,
SEATORQUE_JOBS the default worker count for monte-carlo.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import gp, harness, reporting
from .config import ScenarioSpec, bundled_scenario_names, parse_scenario, resolve_scenario
from .errors import (
    ConfigError,
    FactorizationError,
    InnovationSingularError,
    MalformedCsvError,
    NonFiniteStateError,
    SingularInertiaError,
)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DATA = 4

NUMERICAL_ERRORS = (
    NonFiniteStateError,
    FactorizationError,
    InnovationSingularError,
    SingularInertiaError,
    np.linalg.LinAlgError,
    ArithmeticError,
)


def _default_outdir() -> str:
    return os.environ.get("SEATORQUE_OUTDIR", "seatorque_out")


def _default_jobs() -> int:
    raw = os.environ.get("SEATORQUE_JOBS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_common(sub: argparse.ArgumentParser):
    sub.add_argument("scenario", help="bundled scenario name or path to a .toy file")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the scenario noise seed")
    sub.add_argument("--outdir", default=None,
                     help=f"output directory (default: $SEATORQUE_OUTDIR or {_default_outdir()!r})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seatorque",
        description="Simulated series-elastic rig with learned-residual torque "
                    "estimation and guaranteed error bounds.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="roll out the true plant trajectories")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("train", help="run the training phases and save the dataset")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("estimate", help="run all estimators over a noisy replay")
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = subs.add_parser("bounds", help="propagate the guaranteed confidence sets")
    _add_common(p)
    p.set_defaults(func=cmd_bounds)

    p = subs.add_parser("plotdata", help="write compact per-step series for plotting")
    _add_common(p)
    p.set_defaults(func=cmd_plotdata)

    p = subs.add_parser("full-run", help="all outputs of one run, with figures")
    _add_common(p)
    p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    p.set_defaults(func=cmd_full_run)

    p = subs.add_parser("monte-carlo", help="replicate the noisy estimation many times")
    _add_common(p)
    p.add_argument("--runs", type=int, default=100, help="number of replications")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: $SEATORQUE_JOBS or 1)")
    p.set_defaults(func=cmd_monte_carlo)

    p = subs.add_parser("eval", help="recompute summary metrics from output files")
    p.add_argument("files", nargs="+", help="estimator or bounds CSV files")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenarios)
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _load_spec(args) -> tuple:
    spec = parse_scenario(resolve_scenario(args.scenario))
    seed = spec.noise.seed if args.seed is None else args.seed
    if seed < 0:
        raise ConfigError("--seed must be >= 0")
    outdir = Path(args.outdir if args.outdir is not None else _default_outdir())
    return spec, seed, outdir


def _phase_stem(spec: ScenarioSpec, phase_name: str) -> str:
    est_phases = [p for p in spec.phases if p.kind == "estimation"]
    if len(est_phases) <= 1:
        return spec.name
    return f"{spec.name}_{phase_name}"


def _print_metrics(result):
    m = result.metrics
    print(f"phase {result.phase}: steps={m.steps}")
    for name in reporting.ESTIMATOR_NAMES:
        print(f"  rmse[{name}] = {m.rmse[name]:.6f} Nm")
    print(f"  state coverage  = {m.state_coverage:.4f}")
    print(f"  torque coverage = {m.torque_coverage:.4f}")
    print(f"  mean radius     = {m.mean_radius:.4f} Nm")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec, seed, outdir = _load_spec(args)
    built, model, truths, training = harness.prepare_truth(spec, seed)
    del built, model
    for data in training:
        print(f"training phase {data.phase}: {len(data.times)} samples")
    import csv

    outdir.mkdir(parents=True, exist_ok=True)
    for truth in truths:
        n = truth.u.shape[1]
        path = outdir / f"{_phase_stem(spec, truth.phase)}_truth.csv"
        header = ["t"] + [f"xtrue_{j + 1}" for j in range(5 * n)] + [
            f"u_{j + 1}" for j in range(n)
        ]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            for k in range(truth.times.size):
                writer.writerow([repr(float(v)) for v in
                                 (truth.times[k], *truth.x_true[k], *truth.u[k])])
        print(f"wrote {path} ({truth.times.size} samples)")
    return EXIT_OK


def cmd_train(args) -> int:
    spec, seed, outdir = _load_spec(args)
    built, model, _, training = harness.prepare_truth(spec, seed)
    del built
    outdir.mkdir(parents=True, exist_ok=True)
    for data in training:
        stem = spec.name if len(training) == 1 else f"{spec.name}_{data.phase}"
        path = outdir / f"{stem}_training_{seed}.csv"
        gp.save_training_csv(path, data.times, data.inputs, data.targets)
        print(f"wrote {path} ({data.inputs.shape[0]} samples)")
    print(f"retained points after budgeting: {model.size}")
    for j, single in enumerate(model.models):
        h = single.hyper
        scales = ", ".join(f"{v:.4f}" for v in h.lengthscales)
        print(f"output {j + 1}: sigma_f={h.sigma_f:.4f} lengthscales=[{scales}] "
              f"sigma_noise={h.sigma_noise:.6f}")
    return EXIT_OK


def _run_and_write(args, writers, figures: bool = False):
    """Shared body of the estimation-producing subcommands."""
    spec, seed, outdir = _load_spec(args)
    scenario_result = harness.run_scenario(spec, seed)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for result in scenario_result.estimations:
        stem = _phase_stem(spec, result.phase)
        for suffix, writer in writers:
            path = outdir / f"{stem}_{suffix}_{seed}.csv"
            writer(path, result)
            written.append(path)
        if figures:
            written += reporting.render_figures(outdir, f"{stem}_{seed}", result)
        _print_metrics(result)
    for path in written:
        print(f"wrote {path}")
    return scenario_result, spec, seed, outdir


def cmd_estimate(args) -> int:
    writers = [
        ("gpakf", lambda p, r: reporting.write_estimator_csv(p, r, "gpakf")),
        ("akf", lambda p, r: reporting.write_estimator_csv(p, r, "akf")),
        ("spring", reporting.write_spring_csv),
        ("metrics", reporting.write_metrics_csv),
    ]
    _run_and_write(args, writers)
    return EXIT_OK


def cmd_bounds(args) -> int:
    _run_and_write(args, [("bounds", reporting.write_bounds_csv)])
    return EXIT_OK


def cmd_plotdata(args) -> int:
    _run_and_write(args, [("plotdata", reporting.write_plotdata_csv)])
    return EXIT_OK


def cmd_full_run(args) -> int:
    writers = [
        ("gpakf", lambda p, r: reporting.write_estimator_csv(p, r, "gpakf")),
        ("akf", lambda p, r: reporting.write_estimator_csv(p, r, "akf")),
        ("spring", reporting.write_spring_csv),
        ("bounds", reporting.write_bounds_csv),
        ("metrics", reporting.write_metrics_csv),
        ("plotdata", reporting.write_plotdata_csv),
    ]
    scenario_result, spec, seed, outdir = _run_and_write(
        args, writers, figures=not args.no_figures
    )
    for data in scenario_result.training:
        stem = spec.name if len(scenario_result.training) == 1 else f"{spec.name}_{data.phase}"
        path = outdir / f"{stem}_training_{seed}.csv"
        gp.save_training_csv(path, data.times, data.inputs, data.targets)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_monte_carlo(args) -> int:
    spec, seed, outdir = _load_spec(args)
    jobs = args.jobs if args.jobs is not None else _default_jobs()
    if args.runs < 1:
        raise ConfigError("--runs must be >= 1")
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    mc = harness.monte_carlo(spec, args.runs, seed=seed, jobs=jobs)
    outdir.mkdir(parents=True, exist_ok=True)
    runs_path = outdir / f"{spec.name}_mc_{seed}.csv"
    summary_path = outdir / f"{spec.name}_mc_summary_{seed}.csv"
    reporting.write_mc_csv(runs_path, mc)
    reporting.write_mc_summary_csv(summary_path, mc)
    print(f"runs={mc.runs} seed={mc.seed}")
    for name in sorted(mc.rmse_mean):
        print(f"  rmse_mean[{name}] = {mc.rmse_mean[name]:.6f} Nm "
              f"(max {mc.rmse_max[name]:.6f})")
    print(f"  state coverage  = {mc.state_coverage:.5f} "
          f"({mc.covered_states}/{mc.total_rows})")
    print(f"  torque coverage = {mc.torque_coverage:.5f} "
          f"({mc.covered_torques}/{mc.total_rows})")
    print(f"  mean radius     = {mc.mean_radius:.4f} Nm")
    print(f"wrote {runs_path}")
    print(f"wrote {summary_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    for file in args.files:
        header, _ = reporting._read_table(file)
        if any(name.startswith("tau_hat_") for name in header):
            stats = reporting.evaluate_estimator_csv(file)
            print(f"{file}: rmse = {stats['rmse']!r} Nm over {stats['rows']} rows")
        elif "state_covered" in header:
            stats = reporting.evaluate_bounds_csv(file)
            print(f"{file}: state coverage = {stats['state_coverage']:.5f}, "
                  f"torque coverage = {stats['torque_coverage']:.5f}, "
                  f"mean radius = {stats['mean_radius']!r} Nm over {stats['rows']} rows")
        else:
            raise MalformedCsvError(
                f"{file}: header matches neither an estimator log (tau_hat_*) "
                "nor a bounds log (state_covered)"
            )
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for name in bundled_scenario_names():
        print(name)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MalformedCsvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
