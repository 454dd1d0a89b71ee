"""Command-line front end.

Subcommands run one experiment campaign each and write a CSV table, a JSON
summary, gnuplot-ready .dat files, and a run manifest into the output
directory.  One line per audit check is printed; the exit status is 0 when
every audit passes, 1 when any audit fails, and 2 for configuration or usage
errors.  All result files except the manifest (wall-clock timestamps) are
byte-identical across re-runs with the same config and seed.
"""

from __future__ import annotations

import argparse
import datetime
import os
import sys

from . import __version__
from .config import DEFAULT_CONFIG_TEXT, validate_text
from .experiments import EXPERIMENT_RUNNERS
from .reporting import RunManifest, emit_plotdata, write_csv, write_summary

EXPERIMENTS = ("sweep", "contraction", "moments", "ergodicity", "invariant",
               "validate-oracles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volterra-spde",
        description="Spectral simulator and experiment harness for a "
                    "reaction-diffusion equation with fading memory.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} campaign")
        p.add_argument("--config", metavar="PATH",
                       help="config file (defaults to the built-in config)")
        p.add_argument("--seed", type=int, metavar="U64",
                       help="master seed override")
        p.add_argument("--out", metavar="DIR",
                       help="output directory (default: $VOLTERRA_SPDE_OUT or '.')")
        p.add_argument("--workers", type=int, metavar="N",
                       help="worker threads for ensemble sharding")
        p.add_argument("--dt", type=float, metavar="DT", help="time step override")
        p.add_argument("--epsilon", metavar="LIST",
                       help="comma-separated memory-scale list override")
        p.add_argument("--validate-only", action="store_true",
                       help="validate the config against the standing "
                            "assumptions and exit without simulating")
    return parser


def _collect_overrides(args) -> dict:
    overrides = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ValueError(f"--seed {args.seed} outside [0, 2^64)")
        overrides["seed"] = args.seed % (2**63)
    if args.dt is not None:
        overrides["dt"] = args.dt
    if args.epsilon is not None:
        overrides["epsilons"] = tuple(
            float(v) for v in args.epsilon.replace(",", " ").split())
    if args.workers is not None:
        overrides["workers"] = args.workers
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _collect_overrides(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.config:
        try:
            with open(args.config) as fh:
                config_text = fh.read()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
    else:
        config_text = DEFAULT_CONFIG_TEXT

    out_dir = args.out or os.environ.get("VOLTERRA_SPDE_OUT") or "."
    overrides["out_dir"] = out_dir
    cfg, diagnostics = validate_text(config_text, experiment=args.experiment,
                                     overrides=overrides)
    if diagnostics:
        for aid, message in diagnostics:
            print(f"invalid {aid}: {message}", file=sys.stderr)
        return 2
    if args.validate_only:
        print("config valid: assumptions (M1) (M2) (Q1) (Q3) (P0)-(P3) hold")
        return 0

    os.makedirs(out_dir, exist_ok=True)
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    report = EXPERIMENT_RUNNERS[args.experiment](cfg)
    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()

    prefix = os.path.join(out_dir, args.experiment)
    files = [
        write_csv(f"{prefix}_results.csv", report.rows),
        write_summary(f"{prefix}_summary.json",
                      {"experiment": report.experiment, "passed": report.passed,
                       "passes": report.passes, **report.summary}),
    ]
    files += emit_plotdata(out_dir, args.experiment, report.summary)
    # Hash only the scientific settings: where results land is not part of
    # the run identity and must not break cross-directory comparisons.
    hashed = {k: v for k, v in overrides.items() if k != "out_dir"}
    manifest = RunManifest(
        experiment=args.experiment,
        config_hash=RunManifest.hash_config(config_text, hashed),
        master_seed=cfg.solver.seed,
        package_version=__version__,
        started_at=started,
        finished_at=finished,
        files=[os.path.basename(f) for f in files],
    )
    manifest.write(f"{prefix}_manifest.json")

    for name, ok in report.passes.items():
        print(f"[{'PASS' if ok else 'FAIL'}] {name}")
    print(f"{args.experiment}: {'PASSED' if report.passed else 'FAILED'} "
          f"({len(files)} result files in {out_dir})")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
