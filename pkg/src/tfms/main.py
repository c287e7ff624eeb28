"""Command-line entry point: ``tfms gen``, ``tfms run`` and ``tfms compare``."""

from __future__ import annotations

import argparse
import atexit
import faulthandler
import logging
import os
import signal
import sys
from dataclasses import replace
from pathlib import Path
from typing import IO, Optional, Sequence

from .config import RunConfig, load_workload_spec
from .errors import ConfigError, TfmsError
from .events import read_events, read_visits, write_events, write_visits
from .harness import MATCHERS, run
from .report import SimReport, compare, format_table
from .workload import generate, workload_checksum

EVENTS_FILE = "events.jsonl"
TRAFFIC_FILE = "traffic.jsonl"
LOG_FORMAT = "%(asctime)s %(levelname)s: %(message)s"

_log_fh: Optional[IO[str]] = None


def setup_logging(verbose: bool = False) -> None:
    """Log to the file named by TFMS_LOG, or stderr when unset or unwritable."""
    global _log_fh
    if _log_fh is not None:
        faulthandler.disable()
        _log_fh.close()
        _log_fh = None
    level = logging.DEBUG if verbose else logging.INFO
    path = os.environ.get("TFMS_LOG")
    if not path:
        logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
        return
    try:
        _log_fh = open(path, "a", encoding="utf-8")
    except OSError:
        logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
        logging.warning("Could not open log file %s, falling back to stderr", path)
        return
    atexit.register(_log_fh.close)
    logging.basicConfig(stream=_log_fh, level=level, format=LOG_FORMAT, force=True)
    try:
        faulthandler.enable(file=_log_fh)
    except Exception:
        logging.exception("faulthandler.enable failed")
    if hasattr(faulthandler, "register"):
        try:
            faulthandler.register(signal.SIGABRT, file=_log_fh, all_threads=True)
        except Exception:
            logging.exception("faulthandler.register failed")


def _bound(raw: str) -> Optional[int]:
    if raw.lower() == "unbounded":
        return None
    try:
        return int(raw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'unbounded', got {raw!r}")


def _matcher_list(raw: str) -> tuple[str, ...]:
    names = tuple(m.strip() for m in raw.split(",") if m.strip())
    bad = [m for m in names if m not in MATCHERS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown matcher(s) {', '.join(bad) or '(none)'}; choose from {', '.join(MATCHERS)}"
        )
    return names


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    p = argparse.ArgumentParser(prog="tfms", description="Truncation-free matching simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="Generate a synthetic workload (event and traffic logs)")
    g.add_argument("--spec", type=Path, required=True, help="Workload spec INI file")
    g.add_argument("--out", type=Path, required=True, help="Output directory for the logs")
    g.add_argument("--seed", type=int, help="Override the spec seed")

    r = sub.add_parser("run", help="Replay a workload and write report.json/report.csv")
    r.add_argument("--config", type=Path, help="Run config INI file")
    r.add_argument("--workload", type=Path, help="Directory holding the workload logs")
    r.add_argument("--out", type=Path, help="Report output directory")
    r.add_argument("--seed", type=int, help="Scoring seed")
    r.add_argument("--matchers", type=_matcher_list, help="Comma-separated matcher names")
    r.add_argument("--window-mins", type=int, help="Delta window length in minutes (0 = per event)")
    r.add_argument("--topn", type=int, help="Cached top-n per user")
    r.add_argument("--m", type=_bound, default=argparse.SUPPRESS, help="Crowds kept per channel, or 'unbounded'")
    r.add_argument("--k", type=_bound, default=argparse.SUPPRESS, help="Ads kept per crowd, or 'unbounded'")

    c = sub.add_parser("compare", help="Relative deltas of report B against report A")
    c.add_argument("a", type=Path, help="report.json A")
    c.add_argument("b", type=Path, help="report.json B")
    return p.parse_args(argv)


def cmd_gen(args: argparse.Namespace) -> int:
    spec = load_workload_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
        spec.validate()
    events, visits = generate(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    write_events(args.out / EVENTS_FILE, events)
    write_visits(args.out / TRAFFIC_FILE, visits)
    checksum = workload_checksum(events, visits)
    logging.info("workload %s written to %s", checksum, args.out)
    print(f"{checksum}  {len(events)} events  {len(visits)} visits  {args.out}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.load(args.config) if args.config is not None else RunConfig()
    overrides = {
        "workload": args.workload,
        "out": args.out,
        "seed": args.seed,
        "matchers": args.matchers,
        "window_mins": args.window_mins,
        "topn": args.topn,
    }
    # --m/--k may legitimately be None (unbounded), so they are only
    # present on the namespace when given
    bounds = {key: getattr(args, key) for key in ("m", "k") if hasattr(args, key)}
    try:
        config = replace(config.with_overrides(**overrides), **bounds)
    except TfmsError as e:
        raise ConfigError(str(e)) from e

    events = read_events(config.workload / EVENTS_FILE)
    visits = read_visits(config.workload / TRAFFIC_FILE)
    report = run(
        events,
        visits,
        config.matchers,
        config.truncation(),
        config.tfms(),
        seed=config.seed,
        workload=workload_checksum(events, visits),
    )
    report.write(config.out)
    table = report.comparison()
    print(format_table(table) if table else _summary(report), end="")
    return 0


def _summary(report: SimReport) -> str:
    lines = ["matcher\trpm\tpctr\tppc\tpairs_scored\trecall_at_n"]
    for name, m in sorted(report.matchers.items()):
        lines.append(
            f"{name}\t{m.rpm:.4f}\t{m.pctr:.5f}\t{m.ppc:.4f}\t{m.pairs_scored}\t{m.recall_at_n:.4f}"
        )
    return "\n".join(lines) + "\n"


def cmd_compare(args: argparse.Namespace) -> int:
    a = SimReport.read(args.a)
    b = SimReport.read(args.b)
    print(format_table(compare(a, b)), end="")
    return 0


def _log_error(msg: str, *args: object) -> None:
    # stderr already gets the message; only mirror it into a log file
    if _log_fh is not None:
        logging.error(msg, *args)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    setup_logging(args.verbose)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "run":
            return cmd_run(args)
        return cmd_compare(args)
    except FileNotFoundError as e:
        _log_error("file not found: %s", e.filename)
        sys.stderr.write(f"tfms: file not found: {e.filename}\n")
        return 2
    except TfmsError as e:
        _log_error("%s", e)
        sys.stderr.write(f"tfms: {e}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
