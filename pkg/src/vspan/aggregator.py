"""Collect per-container trace files into one time-ordered experiment."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

from .errors import EmptyExperiment, OverflowedTimestamp, TraceFormatError, UnsortedFile
from .events import INT64_MAX, TraceEvent, TraceHeader, format_event, read_trace_file

TRACE_SUFFIX = ".trace"


@dataclass
class TraceFile:
    header: TraceHeader
    events: list[TraceEvent]
    path: str = ""


@dataclass
class Experiment:
    """Parsed trace files with clock offsets already applied.

    ``traces`` is ordered by (header service, path) so that merges are
    reproducible regardless of directory listing order.
    """

    traces: list[TraceFile] = field(default_factory=list)
    epoch_ns: int = 0
    merged_count: int = 0

    @property
    def services(self) -> list[str]:
        return [t.header.service for t in self.traces]


def apply_clock_offset(ev: TraceEvent, offset_ns: int) -> TraceEvent:
    """Shift *ev* onto the experiment clock.

    Adjusted timestamps must stay in ``[0, 2**63 - 1]``; anything else is
    reported as :class:`OverflowedTimestamp`.
    """
    if offset_ns == 0:
        return ev
    ts = ev.ts + offset_ns
    if not 0 <= ts <= INT64_MAX:
        raise OverflowedTimestamp(
            f"{ev.service}: ts {ev.ts} + offset {offset_ns} leaves the representable range")
    return replace(ev, ts=ts)


def trace_paths(directory: str | Path) -> list[Path]:
    return sorted(Path(directory).glob(f"*{TRACE_SUFFIX}"))


def load_trace(path: str | Path) -> TraceFile:
    header, events = read_trace_file(path)
    offset = header.clock_offset_ns
    if offset:
        try:
            events = [apply_clock_offset(ev, offset) for ev in events]
        except OverflowedTimestamp as exc:
            raise OverflowedTimestamp(f"{path}: {exc}") from None
    return TraceFile(header=header, events=events, path=str(path))


def load_experiment(directory: str | Path) -> Experiment:
    directory = Path(directory)
    if not directory.is_dir():
        raise EmptyExperiment(f"{directory} is not a directory")
    paths = trace_paths(directory)
    if not paths:
        raise EmptyExperiment(f"no *{TRACE_SUFFIX} files in {directory}")
    traces = []
    for p in paths:
        try:
            traces.append(load_trace(p))
        except TraceFormatError as exc:
            if exc.path is None:
                exc.path = str(p)
            raise
    return build_experiment(traces)


def build_experiment(traces: Iterable[TraceFile]) -> Experiment:
    traces = sorted(traces, key=lambda t: (t.header.service, t.path))
    firsts = [t.events[0].ts for t in traces if t.events]
    return Experiment(
        traces=traces,
        epoch_ns=min(firsts) if firsts else 0,
        merged_count=sum(len(t.events) for t in traces),
    )


def _checked(trace: TraceFile) -> Iterator[TraceEvent]:
    prev = -1
    for lineno, ev in enumerate(trace.events, start=2):
        if ev.ts < prev:
            raise UnsortedFile(f"timestamp {ev.ts} precedes {prev}", line=lineno, path=trace.path)
        prev = ev.ts
        yield ev


def _merge_key(ev: TraceEvent) -> tuple[int, str]:
    return ev.ts, ev.service


def iter_merged(exp: Experiment) -> Iterator[TraceEvent]:
    """Lazily k-way merge the experiment's streams.

    Ties on (ts, service) fall back to file order, then to line order, since
    ``heapq.merge`` is stable with respect to its input iterables.
    """
    streams = [_checked(t) for t in exp.traces]
    if len(streams) == 1:
        return streams[0]
    return heapq.merge(*streams, key=_merge_key)


def merge_streams(exp: Experiment) -> list[TraceEvent]:
    return list(iter_merged(exp))


def dump_merged(events: Iterable[TraceEvent], path: str | Path) -> int:
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for ev in events:
            fh.write(format_event(ev))
            fh.write("\n")
            n += 1
    return n
