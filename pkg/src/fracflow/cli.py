"""Command line entry point: ``fracflow run | gen-paper-scenarios | check``."""

from __future__ import annotations

import argparse
import logging
import sys

from .experiments import ConfigError, load_scenario, make_paper_scenarios, run_scenario
from .linalg import SolverError

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fracflow", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--out", help="output directory (default: the scenario's)")
    r.add_argument("--schemes", help="comma-separated subset of coupled,l,d,u")
    r.add_argument("--coarse", action="store_true", help="also run the NLMC coarse levels")
    r.add_argument("--dump-every", type=int, default=None, metavar="N",
                   help="write field dumps every N steps")

    g = sub.add_parser("gen-paper-scenarios", help="write the 2C/3C scenario files")
    g.add_argument("dir")

    sub.add_parser("check", help="run invariant checks on built-in micro-cases")
    return ap


def _print_summary(report):
    rows = report.summary_rows()
    for r in rows:
        iters = " ".join(f"{k[9:]}={v:.2f}" for k, v in r.items() if k.startswith("avg_iter_"))
        print(f"{r['level']:>14} {r['scheme']:>8}  dofs={r['dofs']:<7} "
              f"e={r['final_error_pct']:.4f}%  N_it: {iters}")


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    schemes = None
    if args.schemes:
        schemes = [s for s in args.schemes.split(",") if s.strip()]
        if not schemes:
            raise ConfigError("--schemes is empty")
        sc.schemes = schemes
        sc.__post_init__()
    if args.dump_every is not None and args.dump_every < 0:
        raise ConfigError("--dump-every must be nonnegative")
    if args.coarse and not sc.coarse.grids:
        raise ConfigError(f"{args.scenario}: --coarse given but the scenario lists no coarse grids")
    report = run_scenario(sc, out=args.out, coarse=args.coarse, dump_every=args.dump_every)
    _print_summary(report)
    return EXIT_OK


def _cmd_check() -> int:
    from .checks import run_checks

    ok = True
    for res in run_checks():
        print(f"[{'PASS' if res.ok else 'FAIL'}] {res.name}: {res.detail}")
        ok &= res.ok
    return EXIT_OK if ok else EXIT_SOLVER


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "gen-paper-scenarios":
            for path in make_paper_scenarios(args.dir):
                print(path)
            return EXIT_OK
        return _cmd_check()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
