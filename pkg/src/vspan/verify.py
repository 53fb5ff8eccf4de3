"""Run the full analysis on an experiment directory and check it against the
simulator's ground truth."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .aggregator import dump_merged, iter_merged, load_experiment
from .reconstruct import Reconstruction, Reconstructor, SpanNode
from .sht import HistoryTree

log = logging.getLogger(__name__)

GROUND_TRUTH_FILE = "ground_truth.json"

# service, kind, sockid, operation, start, end, children (sorted)
Canon = tuple


def analyze_experiment(directory: str | Path, *, fanout: bool = False,
                       merged_out: str | Path | None = None,
                       sht: HistoryTree | None = None) -> Reconstruction:
    """Load, merge and reconstruct everything under *directory*."""
    exp = load_experiment(directory)
    log.info("loaded %d trace files, %d events", len(exp.traces), exp.merged_count)
    events: Iterable = iter_merged(exp)
    if merged_out is not None:
        events = list(events)
        dump_merged(events, merged_out)
    rec = Reconstructor(sht, fanout=fanout).feed(events).finish()
    log.info("%d roots, %d orphans", len(rec.forest), len(rec.orphans))
    return rec


def _canon_truth(node: dict[str, Any]) -> Iterator[Canon]:
    # untraced backends leave nothing in the traces, so they drop out
    kids = tuple(sorted(c for child in node.get("children", ()) for c in _canon_truth(child)))
    if node.get("traced", True) is False:
        yield from kids
        return
    yield (node["service"], node["kind"], node.get("sockid"), node["operation"],
           node["start_ns"], node["end_ns"], True, kids)


def _canon_span(span: SpanNode) -> Iterator[Canon]:
    kids = tuple(sorted(c for child in span.children for c in _canon_span(child)))
    if span.kind == "client":
        yield from kids
        return
    yield (span.service, span.kind, span.sockid, span.operation,
           span.start_ns, span.end_ns, span.complete, kids)


def canonical_truth(gt: dict[str, Any]) -> list[Canon]:
    return [c for req in gt["requests"] for c in _canon_truth(req["root"])]


def canonical_forest(forest: Iterable[SpanNode]) -> list[Canon]:
    return [c for root in forest for c in _canon_span(root)]


@dataclass
class VerifyReport:
    matched: int
    total: int
    extra_roots: int
    orphans: int = 0
    unmatched: list[Canon] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.matched == self.total and self.extra_roots == 0

    @property
    def percent(self) -> float:
        return 100.0 * self.matched / self.total if self.total else 100.0

    def summary(self) -> str:
        line = f"{self.matched}/{self.total} requests matched ({self.percent:.1f}%)"
        if self.extra_roots:
            line += f", {self.extra_roots} unexpected roots"
        return line


def compare(forest: Iterable[SpanNode], gt: dict[str, Any], orphans: int = 0) -> VerifyReport:
    """Multiset comparison of reconstructed roots against ground-truth roots.

    Client spans are folded away on the reconstructed side because the
    ground truth records only server and redis work.
    """
    want = Counter(canonical_truth(gt))
    got = Counter(canonical_forest(forest))
    hit = want & got
    matched = sum(hit.values())
    return VerifyReport(
        matched=matched,
        total=sum(want.values()),
        extra_roots=sum((got - want).values()),
        orphans=orphans,
        unmatched=sorted((want - hit).elements()),
    )


def load_ground_truth(directory: str | Path) -> dict[str, Any]:
    with (Path(directory) / GROUND_TRUTH_FILE).open(encoding="utf-8") as fh:
        return json.load(fh)


def verify_experiment(directory: str | Path, *, fanout: bool = False) -> VerifyReport:
    gt = load_ground_truth(directory)
    rec = analyze_experiment(directory, fanout=fanout)
    return compare(rec.forest, gt, orphans=len(rec.orphans))
