"""State history tree: an interval store with logarithmic point queries.

Attributes live in a slash-separated namespace (``/requests/gateway/3/state``)
and are mapped to integer quarks on first use. Each attribute holds one
ongoing state at a time; setting a new value seals the previous one as the
closed interval ``[prev_start, t - 1]``.

Sealed intervals are placed in the nodes of a time-partitioned tree. Every
node covers a time span, siblings partition their parent's span, and new
intervals go into the deepest node of the latest branch whose start does not
exceed the interval start. Leaves hold at most ``node_capacity`` intervals;
a full leaf is sealed and a sibling opened, and when a parent already has
``fanout`` children the split moves up, growing a new root if needed.
Interior nodes take whatever intervals cross their children's boundaries
without a size limit, which keeps every root-to-leaf path the same length
and the depth logarithmic in the node count.
"""
from __future__ import annotations

import json
from array import array
from bisect import bisect_right
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence, Union

from . import kernels
from .errors import (
    BackwardsTime,
    HistoryError,
    InvalidAttributePath,
    OutOfRange,
    TreeNotClosed,
    UnknownAttribute,
)

Scalar = Union[int, str, None]
AttributePath = tuple  # tuple[str, ...]
PathLike = Union[str, Sequence[str]]

SEPARATOR = "/"


def attr_path(path: PathLike) -> AttributePath:
    """Normalise ``"/a/b"`` or ``["a", "b"]`` to a validated segment tuple."""
    if isinstance(path, str):
        segments = tuple(path.strip(SEPARATOR).split(SEPARATOR)) if path.strip(SEPARATOR) else ()
    else:
        segments = tuple(path)
    if not segments:
        raise InvalidAttributePath("attribute path must have at least one segment")
    for seg in segments:
        if not isinstance(seg, str) or not seg or SEPARATOR in seg:
            raise InvalidAttributePath(f"bad attribute path segment {seg!r}")
    return segments


def format_path(path: Sequence[str]) -> str:
    return SEPARATOR + SEPARATOR.join(path)


@dataclass(frozen=True)
class Interval:
    start_ns: int
    end_ns: int
    attr: AttributePath
    value: Scalar

    def contains(self, t: int) -> bool:
        return self.start_ns <= t <= self.end_ns


class _Node:
    __slots__ = ("seq", "start", "end", "max_end", "children", "child_starts",
                 "starts", "ends", "quarks", "values")

    def __init__(self, seq: int, start: int):
        self.seq = seq
        self.start = start
        self.end: int | None = None
        self.max_end = start - 1
        self.children: list[_Node] = []
        self.child_starts = array("q")
        self.starts = array("q")
        self.ends = array("q")
        self.quarks = array("q")
        self.values: list[Scalar] = []

    def __len__(self) -> int:
        return len(self.starts)

    def add_child(self, child: "_Node") -> None:
        self.children.append(child)
        self.child_starts.append(child.start)


class HistoryTree:
    """Single-writer interval tree; read-only and thread-safe once closed."""

    def __init__(self, node_capacity: int = 64, fanout: int = 16, start: int = 0):
        if node_capacity < 1:
            raise ValueError("node_capacity must be >= 1")
        if fanout < 2:
            raise ValueError("fanout must be >= 2")
        self.node_capacity = node_capacity
        self.fanout = fanout
        self.start = start
        self.end: int | None = None
        self.current_end = start
        self.closed = False
        self._node_seq = 0
        self.root = self._new_node(start)
        self._latest: list[_Node] = [self.root]
        self._quarks: dict[AttributePath, int] = {}
        self._paths: list[AttributePath] = []
        self._on_start: list[int | None] = []
        self._on_value: list[Scalar] = []
        self._history_index: dict[int, list[tuple[int, int, Scalar]]] | None = None
        self.interval_count = 0

    # -- attribute namespace ----------------------------------------------

    def quark(self, attr: PathLike) -> int:
        key = attr if type(attr) is tuple else attr_path(attr)
        q = self._quarks.get(key)
        if q is None:
            key = attr_path(key)
            q = len(self._paths)
            self._quarks[key] = q
            self._paths.append(key)
            self._on_start.append(None)
            self._on_value.append(None)
        return q

    @property
    def attributes(self) -> list[AttributePath]:
        return list(self._paths)

    @property
    def ongoing(self) -> dict[AttributePath, tuple[int, Scalar]]:
        return {self._paths[q]: (s, self._on_value[q])
                for q, s in enumerate(self._on_start) if s is not None}

    # -- writing ----------------------------------------------------------

    def set_attribute(self, t: int, attr: PathLike, value: Scalar) -> None:
        if self.closed:
            raise HistoryError("history is closed; no further writes")
        if t < self.start:
            raise BackwardsTime(f"t={t} precedes tree start {self.start}")
        q = self.quark(attr)
        prev = self._on_start[q]
        if prev is not None:
            if t < prev:
                raise BackwardsTime(
                    f"{format_path(self._paths[q])}: t={t} precedes ongoing start {prev}")
            if t > prev:
                self._insert(prev, t - 1, q, self._on_value[q])
        self._on_start[q] = t
        self._on_value[q] = value
        if t > self.current_end:
            self.current_end = t

    def close(self, t_end: int) -> None:
        """Seal every ongoing state at *t_end*. A second call is a no-op."""
        if self.closed:
            return
        if t_end < self.current_end:
            raise BackwardsTime(f"close at {t_end} precedes latest time {self.current_end}")
        for q, s in enumerate(self._on_start):
            if s is not None:
                self._insert(s, t_end, q, self._on_value[q])
                self._on_start[q] = None
                self._on_value[q] = None
        self.current_end = t_end
        self._seal_branch(0, t_end)
        self.end = t_end
        self.closed = True

    close_history = close

    def _new_node(self, start: int) -> _Node:
        node = _Node(self._node_seq, start)
        self._node_seq += 1
        return node

    def _insert(self, s: int, e: int, q: int, value: Scalar) -> None:
        while True:
            latest = self._latest
            leaf_level = level = len(latest) - 1
            while latest[level].start > s:
                level -= 1
            node = latest[level]
            if level == leaf_level and len(node.starts) >= self.node_capacity:
                self._split(leaf_level)
                continue
            node.starts.append(s)
            node.ends.append(e)
            node.quarks.append(q)
            node.values.append(value)
            if e > node.max_end:
                node.max_end = e
            self.interval_count += 1
            self._history_index = None
            return

    def _seal_branch(self, level: int, floor: int | None = None) -> int:
        """Seal ``latest[level:]`` at one common end time and return it."""
        branch = self._latest[level:]
        t = max(max(n.max_end for n in branch), branch[-1].start)
        if floor is not None and floor > t:
            t = floor
        for n in branch:
            n.end = t
        return t

    def _split(self, level: int) -> None:
        # Find the shallowest level that can take one more child.
        while level > 0 and len(self._latest[level - 1].children) >= self.fanout:
            level -= 1
        sealed_end = self._seal_branch(level)
        new_start = sealed_end + 1
        if level == 0:
            old_root = self.root
            self.root = self._new_node(old_root.start)
            self.root.add_child(old_root)
            self.root.max_end = sealed_end
            parent = self.root
            depth = len(self._latest)
            self._latest = [self.root]
        else:
            parent = self._latest[level - 1]
            depth = len(self._latest) - level
            del self._latest[level:]
        for _ in range(depth):
            child = self._new_node(new_start)
            parent.add_child(child)
            self._latest.append(child)
            parent = child

    # -- reading ----------------------------------------------------------

    def _require_closed(self) -> None:
        if not self.closed:
            raise TreeNotClosed("query requires a closed history")

    def stab(self, t: int) -> tuple[dict[AttributePath, Scalar], int]:
        """Point query returning ``(values, node_visits)``."""
        self._require_closed()
        if not self.start <= t <= self.end:  # type: ignore[operator]
            raise OutOfRange(f"t={t} outside [{self.start}, {self.end}]")
        paths = self._paths
        stab_node = kernels.stab
        out: dict[AttributePath, Scalar] = {}
        visits = 0
        node = self.root
        while True:
            visits += 1
            if node.starts:
                quarks, values = node.quarks, node.values
                for i in stab_node(node.starts, node.ends, t):
                    out[paths[quarks[i]]] = values[i]
            if not node.children:
                return out, visits
            node = node.children[bisect_right(node.child_starts, t) - 1]

    def query_at(self, t: int) -> dict[AttributePath, Scalar]:
        return self.stab(t)[0]

    def query_value(self, t: int, attr: PathLike) -> Scalar:
        """Value of one attribute at *t* (``UnknownAttribute`` if never set)."""
        key = attr_path(attr) if type(attr) is not tuple else attr
        if key not in self._quarks:
            raise UnknownAttribute(f"unknown attribute {format_path(key)}")
        for iv in self.query_history(key):
            if iv.start_ns <= t <= iv.end_ns:
                return iv.value
        return None

    def _build_history_index(self) -> dict[int, list[tuple[int, int, Scalar]]]:
        index: dict[int, list[tuple[int, int, Scalar]]] = {}
        for node in self.iter_nodes():
            for s, e, q, v in zip(node.starts, node.ends, node.quarks, node.values):
                index.setdefault(q, []).append((s, e, v))
        for rows in index.values():
            rows.sort(key=lambda r: r[0])
        return index

    def query_history(self, attr: PathLike) -> list[Interval]:
        self._require_closed()
        key = attr_path(attr) if type(attr) is not tuple else attr
        q = self._quarks.get(key)
        if self._history_index is None:
            self._history_index = self._build_history_index()
        rows = self._history_index.get(q) if q is not None else None
        if not rows:
            raise UnknownAttribute(f"no interval recorded for {format_path(key)}")
        return [Interval(s, e, key, v) for s, e, v in rows]

    def subtree(self, prefix: PathLike) -> list[AttributePath]:
        key = attr_path(prefix) if type(prefix) is not tuple else prefix
        n = len(key)
        return sorted(p for p in self._paths if p[:n] == key)

    def iter_nodes(self) -> Iterator[_Node]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def iter_intervals(self) -> Iterator[Interval]:
        paths = self._paths
        for node in self.iter_nodes():
            for s, e, q, v in zip(node.starts, node.ends, node.quarks, node.values):
                yield Interval(s, e, paths[q], v)

    # -- structure --------------------------------------------------------

    @property
    def depth(self) -> int:
        return len(self._latest)

    @property
    def node_count(self) -> int:
        return self._node_seq

    def depth_bound(self) -> int:
        """``ceil(log_fanout(node_count)) + 1`` in exact integer arithmetic."""
        n = self.node_count
        k, power = 0, 1
        while power < n:
            power *= self.fanout
            k += 1
        return k + 1

    def check_invariants(self) -> None:
        """Walk the tree and raise :class:`HistoryError` on any broken invariant."""
        self._require_closed()
        if self.depth > self.depth_bound():
            raise HistoryError(f"depth {self.depth} exceeds bound {self.depth_bound()}")
        leaf_depths = set()
        stack = [(self.root, 1)]
        while stack:
            node, d = stack.pop()
            if node.end is None or node.end < node.start:
                raise HistoryError(f"node {node.seq} has bad span [{node.start}, {node.end}]")
            for s, e in zip(node.starts, node.ends):
                if not (node.start <= s <= e <= node.end):
                    raise HistoryError(
                        f"interval [{s}, {e}] outside node {node.seq} [{node.start}, {node.end}]")
            if node.children:
                kids = node.children
                if kids[0].start != node.start or kids[-1].end != node.end:
                    raise HistoryError(f"children of node {node.seq} do not cover it")
                for a, b in zip(kids, kids[1:]):
                    if a.end + 1 != b.start:  # type: ignore[operator]
                        raise HistoryError(f"children of node {node.seq} overlap or leave gaps")
                if len(kids) > self.fanout:
                    raise HistoryError(f"node {node.seq} exceeds fanout")
                stack.extend((c, d + 1) for c in kids)
            else:
                if len(node) > self.node_capacity:
                    raise HistoryError(f"leaf {node.seq} exceeds capacity")
                leaf_depths.add(d)
        if len(leaf_depths) != 1:
            raise HistoryError(f"leaves at uneven depths {sorted(leaf_depths)}")
        per_attr: dict[int, list[tuple[int, int]]] = {}
        for node in self.iter_nodes():
            for s, e, q in zip(node.starts, node.ends, node.quarks):
                per_attr.setdefault(q, []).append((s, e))
        for q, spans in per_attr.items():
            spans.sort()
            for (_, e1), (s2, _) in zip(spans, spans[1:]):
                if s2 <= e1:
                    raise HistoryError(f"overlapping intervals for {format_path(self._paths[q])}")

    # -- export -----------------------------------------------------------

    def dump_rows(self) -> list[dict[str, Any]]:
        rows = sorted(self.iter_intervals(), key=lambda iv: (iv.attr, iv.start_ns))
        return [{"attr": format_path(iv.attr), "start": iv.start_ns,
                 "end": iv.end_ns, "value": iv.value} for iv in rows]

    def dump(self, path: str | Path) -> int:
        rows = self.dump_rows()
        with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write(json.dumps(row, separators=(",", ":")))
                fh.write("\n")
        return len(rows)


def build_tree(changes: Iterable[tuple[int, PathLike, Scalar]], t_end: int,
               **kwargs) -> HistoryTree:
    """Convenience: replay ``(t, attr, value)`` changes and close at *t_end*."""
    tree = HistoryTree(**kwargs)
    for t, attr, value in changes:
        tree.set_attribute(t, attr, value)
    tree.close(t_end)
    return tree
