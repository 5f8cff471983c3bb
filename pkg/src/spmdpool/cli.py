"""Command line: ``spmdpool {master,worker,bench,eval,report}``.

Exit codes: 0 ok, 1 usage, 2 expression/spec parse error, 3 worker or run
failure, 4 timeout.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from spmdpool.expr import WORKLOAD, ExprError, evaluate_scalar, parse
from spmdpool.metrics import BenchBase, bench_sweep, parse_csv, render_table, round2, speedup_report, to_csv
from spmdpool.partition import InvalidParams
from spmdpool.protocol import IoError
from spmdpool.runtime import RunConfig, RunError, RunTimeout, run_master, run_worker

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_PARSE = 2
EXIT_FAILURE = 3
EXIT_TIMEOUT = 4

log = logging.getLogger("spmdpool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return value


def _int_list(text: str) -> list[int]:
    try:
        values = [_positive_int(part) for part in text.split(",") if part.strip()]
    except argparse.ArgumentTypeError as exc:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {exc}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--step", type=_positive_float, default=0.001, help="range spacing (default 0.001)")
    p.add_argument("--compute", default=WORKLOAD, help="expression y = f(x) (default: the benchmark workload)")
    p.add_argument(
        "--workdir",
        type=Path,
        default=None,
        help="shared directory for locks, specs and results (default $SPMD_WORKDIR or cwd)",
    )
    p.add_argument("--no-store", action="store_true", help="workers keep only timings, not values")
    p.add_argument("--poll-ms", type=_positive_float, default=100.0, help="lock polling interval (default 100)")
    p.add_argument("--timeout-s", type=_positive_float, default=600.0, help="run timeout (default 600)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spmdpool", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("master", help="run one experiment", allow_abbrev=False)
    p.add_argument("--nproc", type=_positive_int, required=True)
    p.add_argument("--maxvalue", type=_positive_float, required=True)
    _add_run_flags(p)

    p = sub.add_parser("worker", help="compute one rank (spawned by master)", allow_abbrev=False)
    p.add_argument("--spec", type=Path, required=True)

    p = sub.add_parser("bench", help="sweep the m x nproc grid", allow_abbrev=False)
    p.add_argument("--m-list", type=_int_list, default=[1, 2, 3])
    p.add_argument("--nproc-list", type=_int_list, default=list(range(1, 9)))
    p.add_argument("--reps", type=_positive_int, default=4)
    p.add_argument("--base-maxvalue", type=_positive_float, default=10000.0)
    p.add_argument("--csv", type=Path, default=None, help="write CSV here (default stdout)")
    p.add_argument("--tables", action="store_true", help="also print two-decimal tables")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate the expression at one point", allow_abbrev=False)
    p.add_argument("--compute", default=WORKLOAD)
    p.add_argument("--x", type=float, required=True)

    p = sub.add_parser("report", help="render a bench CSV as tables", allow_abbrev=False)
    p.add_argument("--csv", required=True, help="bench CSV file, or - for stdin")
    p.add_argument("--speedup", action="store_true", help="append speedups against nproc=1")
    return parser


def _workdir(args: argparse.Namespace) -> Path:
    if args.workdir is not None:
        return args.workdir
    env = os.environ.get("SPMD_WORKDIR")
    return Path(env) if env else Path.cwd()


def _speedup_lines(grid) -> list[str]:
    lines = []
    for m in sorted(grid.rows):
        try:
            rep = speedup_report(grid.rows[m])
        except ValueError:
            continue
        cells = " ".join(f"{p}:{round2(r)}" for p, r in rep.per_nproc.items())
        lines.append(f"speedup m={m}: {cells} (best nproc={rep.best_nproc}, {round2(rep.best_ratio)})")
    return lines


def _cmd_master(args: argparse.Namespace) -> int:
    config = RunConfig(
        nproc=args.nproc,
        maxvalue=args.maxvalue,
        step=args.step,
        compute=args.compute,
        store=not args.no_store,
        workdir=_workdir(args),
        poll_interval=args.poll_ms / 1000.0,
        timeout=args.timeout_s,
    )
    report = run_master(config)
    print(f"elapsedtime {report.elapsedtime:.6f}")
    print(f"totaltime {report.totaltime:.6f}")
    print(f"executiontime {report.executiontime:.6f}")
    log.info("worker_cpu %s, %d values", report.worker_cpu, report.result_count)
    return EXIT_OK


def _cmd_bench(args: argparse.Namespace) -> int:
    parse(args.compute)
    base = BenchBase(
        base_maxvalue=args.base_maxvalue,
        step=args.step,
        compute=args.compute,
        workdir=_workdir(args),
        poll_interval=args.poll_ms / 1000.0,
        timeout=args.timeout_s,
    )
    grids = bench_sweep(args.m_list, args.nproc_list, args.reps, not args.no_store, base)
    text = to_csv(grids.values())
    if args.csv is None:
        sys.stdout.write(text)
    else:
        args.csv.write_text(text)
    if args.tables:
        for g in grids.values():
            print()
            sys.stdout.write(render_table(g))
    failed = False
    for g in grids.values():
        for (m, nproc), note in sorted(g.notes.items()):
            failed = True
            print(f"{g.metric} m={m} nproc={nproc}: {note}", file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    print(repr(evaluate_scalar(parse(args.compute), args.x)))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    text = sys.stdin.read() if args.csv == "-" else Path(args.csv).read_text()
    try:
        grids = parse_csv(text)
    except ValueError as exc:
        raise UsageError(f"report: {exc}") from None
    for i, g in enumerate(grids):
        if i:
            print()
        sys.stdout.write(render_table(g))
        if args.speedup:
            print("\n".join(_speedup_lines(g)))
    return EXIT_OK


_COMMANDS = {
    "master": _cmd_master,
    "bench": _cmd_bench,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    if args.command == "worker":
        return run_worker(args.spec)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except RunTimeout as exc:
        print(f"spmdpool: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (InvalidParams, IoError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"spmdpool: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExprError as exc:
        print(f"spmdpool: expression error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (RunError, OSError) as exc:
        print(f"spmdpool: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main() -> None:
    sys.exit(dispatch())
