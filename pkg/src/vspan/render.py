"""Text, JSON and SVG views of a span forest on a shared time axis."""
from __future__ import annotations

import json
from typing import Iterator
from xml.sax.saxutils import escape

from .errors import UnsupportedFormat
from .reconstruct import SpanNode, forest_to_dict

FORMATS = ("text", "json", "svg")
_ALIASES = {"text_gantt": "text", "gantt": "text"}


def format_duration(ns: int) -> str:
    if ns >= 1_000_000_000:
        return f"{ns / 1e9:.3f}s"
    if ns >= 1_000_000:
        return f"{ns / 1e6:.3f}ms"
    if ns >= 1_000:
        return f"{ns / 1e3:.3f}us"
    return f"{ns}ns"


def visible_rows(forest: list[SpanNode], include_client: bool = False
                 ) -> Iterator[tuple[int, SpanNode]]:
    """(depth, span) in display order. Client spans are folded into their
    callee unless *include_client* is set."""
    def walk(span: SpanNode, depth: int):
        shown = include_client or span.kind != "client"
        if shown:
            yield depth, span
        for child in span.children:
            yield from walk(child, depth + 1 if shown else depth)

    for root in forest:
        yield from walk(root, 0)


def _bounds(forest: list[SpanNode]) -> tuple[int, int]:
    if not forest:
        return 0, 0
    return min(r.start_ns for r in forest), max(s.end_ns for r in forest for s in r.walk())


def render_text(forest: list[SpanNode], *, include_client: bool = False, width: int = 60) -> str:
    t0, t1 = _bounds(forest)
    span_ns = max(t1 - t0, 1)
    rows = list(visible_rows(forest, include_client))
    labels = []
    for depth, s in rows:
        flag = "" if s.complete else " (incomplete)"
        labels.append(f"{'  ' * depth}{s.service} {s.operation} "
                      f"[{s.start_ns - t0}..{s.end_ns - t0}] {format_duration(s.duration_ns)}{flag}")
    pad = max((len(x) for x in labels), default=0)
    lines = []
    for (depth, s), label in zip(rows, labels):
        a = (s.start_ns - t0) * width // span_ns
        b = max(a + 1, -(-(s.end_ns - t0) * width // span_ns))
        bar = " " * a + "#" * (min(b, width) - a)
        lines.append(f"{label.ljust(pad)}  |{bar.ljust(width)}|")
    return "\n".join(lines) + ("\n" if lines else "")


def render_json(forest: list[SpanNode]) -> str:
    return json.dumps(forest_to_dict(forest), indent=2) + "\n"


_LANE_H = 22
_LABEL_W = 140
_PALETTE = {"server": "#4e79a7", "client": "#f28e2b", "redis": "#e15759"}


def render_svg(forest: list[SpanNode], *, include_client: bool = False, width: int = 960) -> str:
    t0, t1 = _bounds(forest)
    span_ns = max(t1 - t0, 1)
    rows = list(visible_rows(forest, include_client))
    lanes: dict[str, int] = {}
    for _, s in rows:
        lanes.setdefault(s.service, len(lanes))
    plot_w = width - _LABEL_W - 10
    height = _LANE_H * len(lanes) + 30
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<style>text{font-family:monospace;font-size:11px}</style>',
    ]
    for name, i in lanes.items():
        y = 10 + i * _LANE_H
        out.append(f'<rect x="0" y="{y}" width="{width}" height="{_LANE_H}" '
                   f'fill="{"#f4f4f4" if i % 2 == 0 else "#ffffff"}"/>')
        out.append(f'<text x="4" y="{y + 15}">{escape(name)}</text>')
    for _, s in rows:
        y = 10 + lanes[s.service] * _LANE_H + 3
        x = _LABEL_W + (s.start_ns - t0) * plot_w / span_ns
        w = max((s.end_ns - s.start_ns) * plot_w / span_ns, 1.0)
        title = f"{s.service} {s.operation} {format_duration(s.duration_ns)}"
        dash = "" if s.complete else ' stroke="#000" stroke-dasharray="3,2"'
        out.append(f'<rect x="{x:.2f}" y="{y}" width="{w:.2f}" height="{_LANE_H - 6}" '
                   f'fill="{_PALETTE.get(s.kind, "#888")}" fill-opacity="0.6"{dash}>'
                   f'<title>{escape(title)}</title></rect>')
    axis_y = 10 + len(lanes) * _LANE_H + 14
    out.append(f'<text x="{_LABEL_W}" y="{axis_y}">0</text>')
    out.append(f'<text x="{width - 10}" y="{axis_y}" text-anchor="end">'
               f'{escape(format_duration(t1 - t0))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render(forest: list[SpanNode], fmt: str, *, include_client: bool = False) -> str:
    fmt = _ALIASES.get(fmt, fmt)
    if fmt == "text":
        return render_text(forest, include_client=include_client)
    if fmt == "json":
        return render_json(forest)
    if fmt == "svg":
        return render_svg(forest, include_client=include_client)
    raise UnsupportedFormat(f"unsupported format {fmt!r}; choose one of {', '.join(FORMATS)}")
