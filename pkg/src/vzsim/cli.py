"""Command-line entry point.

    vzsim run --scenario test2 --out runs/test2 [--seed N] [--mode networked]
    vzsim compare runs/test0 runs/test1 runs/test2

``run`` is the default command, so ``vzsim --scenario test0`` also works.
Exit status: 0 success, 2 invalid scenario or arguments, 3 invariant
violation during the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import report, scenario
from .simkernel.kernel import InvariantViolation, SimulationHalted
from .simulation import FAULTS, Simulation

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INVARIANT = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vzsim", description="Container memory-management simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command")

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("--scenario", required=True, help="scenario file or bundled name")
    run.add_argument("--out", help="output directory (default: runs/<scenario>)")
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=scenario.MODES)
    run.add_argument("--manager", choices=("on", "off"))
    run.add_argument("--horizon", type=float, help="simulated seconds")
    run.add_argument("--inject-fault", choices=FAULTS, help=argparse.SUPPRESS)

    cmp_ = sub.add_parser("compare", help="order completed runs by throughput and failures")
    cmp_.add_argument("run_dirs", nargs="+")

    sub.add_parser("list", help="list bundled scenarios")
    return p


def _run(args) -> int:
    try:
        spec = scenario.load(args.scenario)
        spec = spec.with_overrides(
            seed=args.seed, mode=args.mode, horizon=args.horizon,
            manager=None if args.manager is None else args.manager == "on")
    except scenario.ScenarioError as e:
        print(f"vzsim: invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = Simulation(spec, inject_fault=args.inject_fault).run()
    except (InvariantViolation, SimulationHalted) as e:
        print(f"vzsim: invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    out = Path(args.out or Path("runs") / spec.name)
    summary = report.write_run(result, out)
    print(report.format_summary(summary), end="")
    print(f"artifacts in {out}")
    return EXIT_OK


def _compare(args) -> int:
    try:
        lines, checks = report.compare(args.run_dirs)
    except (report.MissingArtifacts, ValueError) as e:
        print(f"vzsim: {e}", file=sys.stderr)
        return EXIT_INVALID
    for line in lines:
        print(line)
    for c in checks:
        print(c)
    return EXIT_OK if all(c.passed for c in checks) else 1


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0].startswith("--") and argv[0] not in ("--help", "--verbose"):
        argv.insert(0, "run")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INVALID if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return _run(args)
    if args.command == "compare":
        return _compare(args)
    if args.command == "list":
        for name, path in sorted(scenario.bundled_scenarios().items()):
            print(f"{name}\t{path}")
        return EXIT_OK
    parser.print_help()
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
