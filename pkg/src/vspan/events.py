"""Trace event vocabulary and the ``vspan-trace/1`` line format.

A trace file is UTF-8 text. The first line is a header object::

    {"format":"vspan-trace/1","service":"gateway","host":"c1","clock_offset_ns":0}

and every following line is one event object with exactly the keys
``ts, service, host, name, fields``. ``ts`` is an integer count of
nanoseconds in the file's local clock. Unknown keys inside ``fields`` are
kept on the event but never interpreted.
"""
from __future__ import annotations

import ipaddress
import json
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Iterator

from .errors import (
    FieldOutOfRange,
    MalformedLine,
    MissingField,
    MissingHeader,
    TraceFormatError,
    UnknownEventName,
    UnsortedFile,
)

FORMAT_ID = "vspan-trace/1"

HTTP_SERVER_REQUEST = "http_server_request"
HTTP_SERVER_RESPONSE = "http_server_response"
HTTP_CLIENT_REQUEST = "http_client_request"
HTTP_CLIENT_RESPONSE = "http_client_response"
ASYNC_CONTEXT = "async_context"
REDIS_COMMAND = "redis_command"

EVENT_NAMES = (
    HTTP_SERVER_REQUEST,
    HTTP_SERVER_RESPONSE,
    HTTP_CLIENT_REQUEST,
    HTTP_CLIENT_RESPONSE,
    ASYNC_CONTEXT,
    REDIS_COMMAND,
)

HTTP_EVENTS = frozenset(EVENT_NAMES[:4])

EVENT_KEYS = ("ts", "service", "host", "name", "fields")
HEADER_KEYS = ("format", "service", "host", "clock_offset_ns")

INT64_MAX = 2**63 - 1


@dataclass(frozen=True, slots=True)
class TraceEvent:
    """One timestamped tracepoint record.

    ``fields`` carries the payload; which keys are required depends on
    ``name`` (see :data:`PAYLOAD_SCHEMAS`).
    """

    ts: int
    service: str
    host: str
    name: str
    fields: dict[str, Any] = field(default_factory=dict, compare=True)

    def __getitem__(self, key: str) -> Any:
        return self.fields[key]

    def with_ts(self, ts: int) -> "TraceEvent":
        return replace(self, ts=ts)

    def to_dict(self) -> dict[str, Any]:
        return {"ts": self.ts, "service": self.service, "host": self.host,
                "name": self.name, "fields": self.fields}


@dataclass(frozen=True)
class TraceHeader:
    service: str
    host: str
    clock_offset_ns: int = 0
    format: str = FORMAT_ID

    def to_dict(self) -> dict[str, Any]:
        return {"format": self.format, "service": self.service,
                "host": self.host, "clock_offset_ns": self.clock_offset_ns}


# -- field checkers --------------------------------------------------------
# Each checker returns None on success or raises with the field name attached.

def _is_int(v: Any) -> bool:
    return type(v) is int


def _text(name: str, v: Any) -> None:
    if not isinstance(v, str):
        raise FieldOutOfRange(f"{name} must be text, got {v!r}", field=name)
    if not v:
        raise MissingField(f"{name} is empty", field=name)


def _url(name: str, v: Any) -> None:
    if not isinstance(v, str):
        raise FieldOutOfRange(f"{name} must be text, got {v!r}", field=name)


@lru_cache(maxsize=4096)
def _valid_ipv4(v: str) -> bool:
    try:
        ipaddress.IPv4Address(v)
    except ValueError:
        return False
    return True


def _ipv4(name: str, v: Any) -> None:
    if not isinstance(v, str) or not _valid_ipv4(v):
        raise FieldOutOfRange(f"{name} is not an IPv4 address: {v!r}", field=name)


def _port(name: str, v: Any) -> None:
    if not _is_int(v) or not 1 <= v <= 65535:
        raise FieldOutOfRange(f"{name} must be a port in [1, 65535], got {v!r}", field=name)


def _positive(name: str, v: Any) -> None:
    if not _is_int(v) or v <= 0:
        raise FieldOutOfRange(f"{name} must be a positive integer, got {v!r}", field=name)


def _non_negative(name: str, v: Any) -> None:
    if not _is_int(v) or v < 0:
        raise FieldOutOfRange(f"{name} must be a non-negative integer, got {v!r}", field=name)


def _status(name: str, v: Any) -> None:
    if not _is_int(v) or not 100 <= v <= 599:
        raise FieldOutOfRange(f"{name} must be an HTTP status in [100, 599], got {v!r}", field=name)


Checker = Callable[[str, Any], None]

_HTTP_SCHEMA: tuple[tuple[str, Checker], ...] = (
    ("method", _text),
    ("url", _url),
    ("src_addr", _ipv4),
    ("src_port", _port),
    ("dst_addr", _ipv4),
    ("dst_port", _port),
    ("sockid", _positive),
)
_HTTP_RESPONSE_SCHEMA = _HTTP_SCHEMA + (("status", _status),)

PAYLOAD_SCHEMAS: dict[str, tuple[tuple[str, Checker], ...]] = {
    HTTP_SERVER_REQUEST: _HTTP_SCHEMA,
    HTTP_CLIENT_REQUEST: _HTTP_SCHEMA,
    HTTP_SERVER_RESPONSE: _HTTP_RESPONSE_SCHEMA,
    HTTP_CLIENT_RESPONSE: _HTTP_RESPONSE_SCHEMA,
    ASYNC_CONTEXT: (
        ("async_id", _positive),
        ("ctx_id", _non_negative),
        ("kind", _text),
    ),
    REDIS_COMMAND: (
        ("cmd", _text),
        ("key", _url),
        ("duration_us", _non_negative),
    ),
}


def validate_event(ev: TraceEvent) -> None:
    """Raise a :class:`TraceFormatError` subclass unless *ev* is well formed."""
    if not _is_int(ev.ts):
        raise FieldOutOfRange(f"ts must be an integer, got {ev.ts!r}", field="ts")
    if not 0 <= ev.ts <= INT64_MAX:
        raise FieldOutOfRange(f"ts out of range: {ev.ts}", field="ts")
    _text("service", ev.service)
    _text("host", ev.host)
    schema = PAYLOAD_SCHEMAS.get(ev.name)
    if schema is None:
        raise UnknownEventName(f"unknown event name {ev.name!r}", field="name")
    fields = ev.fields
    if not isinstance(fields, dict):
        raise MalformedLine("fields must be an object", field="fields")
    for key, check in schema:
        try:
            value = fields[key]
        except KeyError:
            raise MissingField(f"{ev.name} requires field {key!r}", field=key) from None
        check(key, value)


def parse_event_line(line: str) -> TraceEvent:
    """Decode and validate one event line."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedLine(f"not a JSON object: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise MalformedLine("event record must be a JSON object")
    if len(obj) != 5 or obj.keys() != _EVENT_KEYSET:
        missing = [k for k in EVENT_KEYS if k not in obj]
        if missing:
            raise MissingField(f"event record lacks {missing[0]!r}", field=missing[0])
        extra = sorted(set(obj) - _EVENT_KEYSET)
        raise MalformedLine(f"unexpected event keys {extra}")
    ev = TraceEvent(obj["ts"], obj["service"], obj["host"], obj["name"], obj["fields"])
    validate_event(ev)
    return ev


_EVENT_KEYSET = frozenset(EVENT_KEYS)


def format_event(ev: TraceEvent) -> str:
    """Serialize *ev* as one line (no trailing newline)."""
    return json.dumps(
        {"ts": ev.ts, "service": ev.service, "host": ev.host, "name": ev.name, "fields": ev.fields},
        separators=(",", ":"),
    )


def format_header(header: TraceHeader) -> str:
    return json.dumps(header.to_dict(), separators=(",", ":"))


def parse_header_line(line: str) -> TraceHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        raise MissingHeader("first line is not a trace header", line=1) from None
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_ID:
        raise MissingHeader(f"first line is not a {FORMAT_ID} header", line=1)
    service, host, offset = obj.get("service"), obj.get("host"), obj.get("clock_offset_ns", 0)
    if not isinstance(service, str) or not service:
        raise MissingField("header lacks service", field="service", line=1)
    if not isinstance(host, str) or not host:
        raise MissingField("header lacks host", field="host", line=1)
    if not _is_int(offset):
        raise FieldOutOfRange("clock_offset_ns must be an integer", field="clock_offset_ns", line=1)
    return TraceHeader(service=service, host=host, clock_offset_ns=offset)


def iter_trace_file(path: str | Path) -> Iterator[TraceHeader | TraceEvent]:
    """Yield the header, then every event, checking local sortedness lazily."""
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise MissingHeader("file is empty or lacks a header", line=1, path=str(path))
        try:
            yield parse_header_line(first)
        except TraceFormatError as exc:
            exc.path = str(path)
            raise
        prev_ts = -1
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                ev = parse_event_line(line)
            except TraceFormatError as exc:
                exc.line, exc.path = lineno, str(path)
                raise
            if ev.ts < prev_ts:
                raise UnsortedFile(
                    f"timestamp {ev.ts} precedes {prev_ts}", line=lineno, path=str(path))
            prev_ts = ev.ts
            yield ev


def read_trace_file(path: str | Path) -> tuple[TraceHeader, list[TraceEvent]]:
    """Read a whole trace file into memory, in file order."""
    it = iter_trace_file(path)
    header = next(it)
    assert isinstance(header, TraceHeader)
    return header, list(it)  # type: ignore[arg-type]


def write_trace_file(path: str | Path, header: TraceHeader, events) -> int:
    """Write *header* and *events*; returns the number of events written."""
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_header(header))
        fh.write("\n")
        for ev in events:
            fh.write(format_event(ev))
            fh.write("\n")
            n += 1
    return n
