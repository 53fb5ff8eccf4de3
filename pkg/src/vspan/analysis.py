"""Latency breakdown, critical path and service graph over span trees."""
from __future__ import annotations

from array import array
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from . import kernels
from .errors import IncompleteSpan
from .reconstruct import SpanNode

Segments = list[tuple[int, int]]  # disjoint, sorted, half-open


def _length(segs: Segments) -> int:
    if not segs:
        return 0
    starts = array("q", (s for s, _ in segs))
    ends = array("q", (e for _, e in segs))
    return kernels.covered_length(starts, ends, segs[0][0], segs[-1][1])


def _clip(segs: Segments, lo: int, hi: int) -> Segments:
    out = []
    for s, e in segs:
        s, e = max(s, lo), min(e, hi)
        if s < e:
            out.append((s, e))
    return out


def _subtract(segs: Segments, taken: Segments) -> Segments:
    out: Segments = []
    j = 0
    for s, e in segs:
        cur = s
        while j < len(taken) and taken[j][1] <= cur:
            j += 1
        k = j
        while k < len(taken) and taken[k][0] < e:
            ts, te = taken[k]
            if ts > cur:
                out.append((cur, ts))
            cur = max(cur, te)
            k += 1
        if cur < e:
            out.append((cur, e))
    return out


def _union(a: Segments, b: Segments) -> Segments:
    merged: Segments = []
    for s, e in sorted(a + b):
        if merged and s <= merged[-1][1]:
            if e > merged[-1][1]:
                merged[-1] = (merged[-1][0], e)
        else:
            merged.append((s, e))
    return merged


def _require_complete(root: SpanNode) -> None:
    for span in root.walk():
        if not span.complete:
            raise IncompleteSpan(f"{span.service} {span.operation} is incomplete")


def exclusive_times(root: SpanNode) -> dict[int, int]:
    """Self time of every span, keyed by ``id(span)``.

    Each instant of the root interval is charged to exactly one span: a
    parent hands the parts of its time covered by a child to that child,
    giving overlapping stretches to the earliest-starting child. Without
    overlap this is simply duration minus the union of child intervals, and
    the self times always add up to the root duration.
    """
    out: dict[int, int] = {}
    stack: list[tuple[SpanNode, Segments]] = [(root, [(root.start_ns, root.end_ns)]
                                                if root.end_ns > root.start_ns else [])]
    while stack:
        span, assigned = stack.pop()
        taken: Segments = []
        for child in span.children:
            mine = _clip(assigned, child.start_ns, child.end_ns)
            if taken:
                mine = _subtract(mine, taken)
            stack.append((child, mine))
            if mine:
                taken = _union(taken, mine)
        out[id(span)] = _length(assigned) - _length(taken)
    return out


@dataclass
class LatencyBreakdown:
    root: SpanNode
    total_ns: int
    per_service: dict[str, int] = field(default_factory=dict)
    inter_service_ns: int = 0
    leaf_times: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "service": self.root.service,
            "operation": self.root.operation,
            "start_ns": self.root.start_ns,
            "total_ns": self.total_ns,
            "per_service": dict(sorted(self.per_service.items())),
            "inter_service_ns": self.inter_service_ns,
            "leaf_times": dict(sorted(self.leaf_times.items())),
        }


def latency_breakdown(root: SpanNode) -> LatencyBreakdown:
    """Split the root duration into per-service self time and time spent
    between services (client span time not covered by the callee)."""
    _require_complete(root)
    selfs = exclusive_times(root)
    bd = LatencyBreakdown(root=root, total_ns=root.duration_ns)
    for span in root.walk():
        t = selfs[id(span)]
        if span.kind == "client":
            bd.inter_service_ns += t
        else:
            bd.per_service[span.service] = bd.per_service.get(span.service, 0) + t
        if not span.children:
            bd.leaf_times[span.operation] = bd.leaf_times.get(span.operation, 0) + span.duration_ns
    return bd


def critical_path(root: SpanNode) -> list[SpanNode]:
    """Root-to-leaf chain with the largest summed self time."""
    _require_complete(root)
    selfs = exclusive_times(root)
    best: dict[int, int] = {}
    # post-order without recursion
    order = list(root.walk())
    for span in reversed(order):
        tail = max((best[id(c)] for c in span.children), default=0)
        best[id(span)] = selfs[id(span)] + tail
    path = [root]
    node = root
    while node.children:
        top = max(best[id(c)] for c in node.children)
        node = next(c for c in node.children if best[id(c)] == top)  # earliest on ties
        path.append(node)
    return path


def path_weight(path: Iterable[SpanNode], root: SpanNode) -> int:
    selfs = exclusive_times(root)
    return sum(selfs[id(s)] for s in path)


@dataclass
class ServiceGraph:
    nodes: set[str] = field(default_factory=set)
    edges: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict:
        return {
            "nodes": sorted(self.nodes),
            "edges": [{"caller": a, "callee": b, "count": n}
                      for (a, b), n in sorted(self.edges.items())],
        }


def service_graph(forest: Iterable[SpanNode]) -> ServiceGraph:
    g = ServiceGraph()
    for root in forest:
        for span in root.walk():
            g.nodes.add(span.service)
            if span.kind == "client":
                for child in span.children:
                    if child.kind == "server":
                        g.edges[(span.service, child.service)] += 1
    return g


def forest_stats(forest: list[SpanNode]) -> dict:
    """Everything the ``stats`` subcommand prints."""
    requests = []
    skipped = 0
    for root in forest:
        try:
            bd = latency_breakdown(root)
        except IncompleteSpan:
            skipped += 1
            continue
        row = bd.to_dict()
        row["critical_path"] = [f"{s.service}:{s.kind}:{s.operation}" for s in critical_path(root)]
        requests.append(row)
    return {"service_graph": service_graph(forest).to_dict(),
            "requests": requests, "incomplete_roots": skipped}
