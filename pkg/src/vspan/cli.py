"""``vspan`` command line: simulate, analyze, render, stats, verify.

Exit codes: 0 ok, 1 usage error, 2 bad input data, 3 verification mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .analysis import forest_stats
from .errors import VspanError
from .microsim import Noise, Workload, load_topology, parse_skew, simulate, write_experiment
from .reconstruct import forest_from_dict, forest_to_dict
from .render import render
from .verify import analyze_experiment, compare, load_ground_truth

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("vspan")

_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO,
           "warn": logging.WARNING, "warning": logging.WARNING, "error": logging.ERROR}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which collides with the data-error code
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: str | Path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _read_spans(path: str):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return forest_from_dict(doc)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VspanError(f"{path}: not a span document ({exc})") from None


def cmd_simulate(args) -> int:
    topo = load_topology(args.topology)
    wl = Workload(args.requests, mean_ns=round(args.mean_ms * 1e6),
                  stddev_ns=round(args.stddev_ms * 1e6), seed=args.seed)
    noise = Noise(decoys=True) if args.noise else Noise(gap_max=0)
    try:
        skew = parse_skew(args.skew)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = simulate(topo, wl, noise)
    paths = write_experiment(result, args.out, skew)
    print(f"wrote {len(paths)} trace files, {result.emitted} events to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rec = analyze_experiment(args.experiment, merged_out=args.dump_merged)
    _write_json(args.out, forest_to_dict(rec.forest))
    if args.orphans:
        _write_json(args.orphans, rec.orphans_doc())
    if args.dump_sht:
        rec.sht.dump(args.dump_sht)
    for o in rec.orphans[:20]:
        log.warning("orphan %s: %s %s", o.reason, o.event.service, o.event.name)
    print(f"{len(rec.forest)} root spans, {len(rec.orphans)} orphans")
    return EXIT_OK


def cmd_render(args) -> int:
    forest = _read_spans(args.spans)
    doc = render(forest, args.format, include_client=args.include_client)
    if args.out == "-":
        sys.stdout.write(doc)
    else:
        Path(args.out).write_text(doc, encoding="utf-8")
    return EXIT_OK


def cmd_stats(args) -> int:
    forest = _read_spans(args.spans)
    print(json.dumps(forest_stats(forest), indent=2))
    return EXIT_OK


def cmd_verify(args) -> int:
    gt = load_ground_truth(args.experiment)
    rec = analyze_experiment(args.experiment)
    report = compare(rec.forest, gt, orphans=len(rec.orphans))
    print(report.summary())
    if not report.ok:
        for canon in report.unmatched[:5]:
            log.warning("unmatched: %s %s start=%d", canon[0], canon[3], canon[4])
        return EXIT_MISMATCH
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vspan", description="Rebuild request spans from runtime traces.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a synthetic experiment")
    s.add_argument("--topology", required=True, help="topology JSON file or uc1/uc2/uc3")
    s.add_argument("--requests", type=int, required=True)
    s.add_argument("--mean-ms", type=float, default=5.0)
    s.add_argument("--stddev-ms", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--noise", action="store_true", help="allocator gaps and decoy async records")
    s.add_argument("--skew", help='per-service clock skew, e.g. "user=+3ms,auth=-500us"')
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="merge traces and reconstruct spans")
    a.add_argument("--experiment", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--orphans")
    a.add_argument("--dump-sht")
    a.add_argument("--dump-merged")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("render", help="draw a span document")
    r.add_argument("--spans", required=True)
    r.add_argument("--format", choices=("text", "svg", "json"), default="text")
    r.add_argument("--out", default="-")
    r.add_argument("--include-client", action="store_true", help="show client spans as rows")
    r.set_defaults(func=cmd_render)

    st = sub.add_parser("stats", help="latency breakdown, service graph, critical path")
    st.add_argument("--spans", required=True)
    st.set_defaults(func=cmd_stats)

    v = sub.add_parser("verify", help="compare reconstruction with ground truth")
    v.add_argument("--experiment", required=True)
    v.set_defaults(func=cmd_verify)
    return p


def _setup_logging() -> None:
    level = _LEVELS.get(os.environ.get("VSPAN_LOG", "warn").lower(), logging.WARNING)
    logging.basicConfig(level=level, stream=sys.stderr, format="vspan: %(levelname)s: %(message)s")


def run(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"vspan: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VspanError, OSError) as exc:
        print(f"vspan: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
