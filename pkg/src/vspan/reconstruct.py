"""Request-context reconstruction over a merged trace stream.

Every ``http_server_request`` starts one concurrent state machine (a
*subsystem*) that follows the asynchronous resources the runtime creates
while handling the request::

    S1  http_server_request             remembers sockid
    S2  async_context kind=after        ctx_id == sockid            -> a2
    S3  async_context kind=constructor  ctx_id == a2                -> a3
    S4  async_context kind=TCPWRAP      ctx_id == a3                -> a4 (outbound socket)
    S5  async_context GETADDRINFOREQWRAP ctx_id == a4               -> a5
    S6  async_context HTTPCLIENTREQUEST async_id == a5 + 1          -> a6

An ``http_client_request`` / ``http_client_response`` whose sockid equals a4
belongs to that subsystem, and ``http_server_response`` on the original
sockid closes it from whatever state it reached. Outgoing calls are linked to
the downstream server request with the same destination address, port,
method and url, earliest first. No identifiers are ever injected into the
traffic; all correlation comes from the runtime's own resource ids.
"""
from __future__ import annotations

import logging
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional

from .errors import DuplicateOpenSocket, NoMatchingSubsystem, UnlinkedCall
from .events import (
    ASYNC_CONTEXT,
    HTTP_CLIENT_REQUEST,
    HTTP_CLIENT_RESPONSE,
    HTTP_SERVER_REQUEST,
    HTTP_SERVER_RESPONSE,
    REDIS_COMMAND,
    TraceEvent,
)
from .fsm import MachineRun, Rule, StateMachineDef
from .sht import HistoryTree

log = logging.getLogger(__name__)

S1, S2, S3, S4, S5, S6, CLOSED = "S1", "S2", "S3", "S4", "S5", "S6", "CLOSED"
STATES = (S1, S2, S3, S4, S5, S6, CLOSED)
STATE_INDEX = {s: i for i, s in enumerate(STATES)}

AFTER = "after"
CONSTRUCTOR = "constructor"
TCPWRAP = "TCPWRAP"
GETADDRINFOREQWRAP = "GETADDRINFOREQWRAP"
HTTPCLIENTREQUEST = "HTTPCLIENTREQUEST"


def _async_kind(kind: str, ctx_key: str):
    def pred(b, ev) -> bool:
        f = ev.fields
        return ev.name == ASYNC_CONTEXT and f["kind"] == kind and f["ctx_id"] == b.get(ctx_key)
    return pred


def _client_request_resource(b, ev) -> bool:
    f = ev.fields
    return (ev.name == ASYNC_CONTEXT and f["kind"] == HTTPCLIENTREQUEST
            and "a5" in b and f["async_id"] == b["a5"] + 1)


def _server_response(b, ev) -> bool:
    return ev.name == HTTP_SERVER_RESPONSE and ev.fields["sockid"] == b["sockid"]


def _bind(name: str):
    return lambda b, ev: {name: ev.fields["async_id"]}


def _new_call(b, ev):
    return {"a3": ev.fields["async_id"], "calls": b.get("calls", 1) + 1}


def ittcr_machine(fanout: bool = False) -> StateMachineDef:
    """The S1..S6 socket-communication pattern as a machine definition.

    With *fanout* an extra S6 -> S3 transition lets one request issue more
    than one downstream call, each call re-running the S3..S6 cycle.
    """
    classes = {
        "after": _async_kind(AFTER, "sockid"),
        "constructor": _async_kind(CONSTRUCTOR, "a2"),
        "tcpwrap": _async_kind(TCPWRAP, "a3"),
        "getaddrinfo": _async_kind(GETADDRINFOREQWRAP, "a4"),
        "httpclientrequest": _client_request_resource,
        "server_response": _server_response,
    }
    table = {
        (S1, "after"): Rule(S2, "bind_a2", _bind("a2")),
        (S2, "constructor"): Rule(S3, "bind_a3", _bind("a3")),
        (S3, "tcpwrap"): Rule(S4, "bind_a4", _bind("a4")),
        (S4, "getaddrinfo"): Rule(S5, "bind_a5", _bind("a5")),
        (S5, "httpclientrequest"): Rule(S6, "bind_a6", _bind("a6")),
    }
    for s in (S1, S2, S3, S4, S5, S6):
        table[(s, "server_response")] = Rule(CLOSED, "close")
    if fanout:
        table[(S6, "constructor")] = Rule(S3, "new_call", _new_call)
    return StateMachineDef.build(
        initial=S1, transitions=table, event_classes=classes,
        states=set(STATES), accepting={S6, CLOSED})


# What each state waits for: (async kind, binding compared, compared field).
_WAITING = {
    S1: (AFTER, "sockid", "ctx_id"),
    S2: (CONSTRUCTOR, "a2", "ctx_id"),
    S3: (TCPWRAP, "a3", "ctx_id"),
    S4: (GETADDRINFOREQWRAP, "a4", "ctx_id"),
    S5: (HTTPCLIENTREQUEST, "a5", "async_id"),
}


# -- spans -----------------------------------------------------------------

@dataclass
class SpanNode:
    service: str
    operation: str
    kind: str
    start_ns: int
    end_ns: int
    children: list["SpanNode"] = field(default_factory=list)
    complete: bool = True
    sockid: Optional[int] = None

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "service": self.service,
            "operation": self.operation,
            "kind": self.kind,
            "start_ns": self.start_ns,
            "end_ns": self.end_ns,
            "complete": self.complete,
        }
        if self.sockid is not None:
            d["sockid"] = self.sockid
        d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SpanNode":
        return cls(
            service=d["service"], operation=d["operation"], kind=d["kind"],
            start_ns=int(d["start_ns"]), end_ns=int(d["end_ns"]),
            children=[cls.from_dict(c) for c in d.get("children", [])],
            complete=bool(d.get("complete", True)), sockid=d.get("sockid"))


def forest_to_dict(forest: list[SpanNode]) -> dict[str, Any]:
    return {"spans": [s.to_dict() for s in forest]}


def forest_from_dict(doc: dict[str, Any]) -> list[SpanNode]:
    return [SpanNode.from_dict(s) for s in doc["spans"]]


# -- subsystems ------------------------------------------------------------

def _operation(ev: TraceEvent) -> str:
    return f"{ev.fields['method']} {ev.fields['url']}"


def _route_key(ev: TraceEvent) -> tuple:
    f = ev.fields
    return (f["dst_addr"], f["dst_port"], f["method"], f["url"])


@dataclass(eq=False)
class ClientCall:
    owner: "RequestSubsystem"
    index: int
    request: TraceEvent
    response: TraceEvent | None = None
    child: "RequestSubsystem | None" = None

    @property
    def sockid(self) -> int:
        return self.request.fields["sockid"]

    @property
    def start_ns(self) -> int:
        return self.request.ts


@dataclass(eq=False)
class RequestSubsystem:
    id: int
    service: str
    run: MachineRun
    server_req: TraceEvent
    anchor: tuple
    start_ns: int
    end_ns: int | None = None
    server_resp: TraceEvent | None = None
    calls: list[ClientCall] = field(default_factory=list)
    parent: ClientCall | None = None
    redis: list[TraceEvent] = field(default_factory=list)

    @property
    def state(self) -> str:
        return self.run.current

    @property
    def sockid(self) -> int:
        return self.run.bindings["sockid"]

    def bound(self, name: str) -> int | None:
        return self.run.bindings.get(name)

    @property
    def a2(self): return self.run.bindings.get("a2")  # noqa: E704

    @property
    def a3(self): return self.run.bindings.get("a3")  # noqa: E704

    @property
    def a4(self): return self.run.bindings.get("a4")  # noqa: E704

    @property
    def a5(self): return self.run.bindings.get("a5")  # noqa: E704

    @property
    def a6(self): return self.run.bindings.get("a6")  # noqa: E704

    @property
    def closed(self) -> bool:
        return self.run.current == CLOSED

    @property
    def client_req(self) -> TraceEvent | None:
        return self.calls[-1].request if self.calls else None


@dataclass
class Orphan:
    event: TraceEvent
    reason: str

    def to_dict(self) -> dict[str, Any]:
        return {"event": self.event.to_dict(), "reason": self.reason}


@dataclass
class Reconstruction:
    forest: list[SpanNode]
    orphans: list[Orphan]
    subsystems: list[RequestSubsystem]
    sht: HistoryTree

    def orphans_doc(self) -> dict[str, Any]:
        return {"orphans": [o.to_dict() for o in self.orphans]}


class _FreeList:
    """Earliest-unclaimed lookup over a sorted list (disjoint-set skip)."""

    def __init__(self, times: list[int]):
        self.times = times
        self._next = list(range(len(times) + 1))

    def find(self, i: int) -> int:
        nxt = self._next
        root = i
        while nxt[root] != root:
            root = nxt[root]
        while nxt[i] != root:
            nxt[i], i = root, nxt[i]
        return root

    def claim_from(self, t: int) -> int | None:
        i = self.find(bisect_left(self.times, t))
        if i >= len(self.times):
            return None
        self._next[i] = i + 1
        return i


class Reconstructor:
    """Consumes a merged event stream and rebuilds per-request span trees.

    Correlation failures never abort the analysis; they are collected in
    :attr:`orphans`.
    """

    def __init__(self, sht: HistoryTree | None = None, *, fanout: bool = False):
        self.sht = sht if sht is not None else HistoryTree()
        self.fanout = fanout
        self.machine = ittcr_machine(fanout)
        self.subsystems: list[RequestSubsystem] = []
        self.orphans: list[Orphan] = []
        self.last_ts = 0
        self._open_by_sock: dict[tuple[str, int], RequestSubsystem] = {}
        self._waiting: dict[tuple[str, str, int], list[RequestSubsystem]] = {}
        self._awaiting_client: dict[tuple[str, int], RequestSubsystem] = {}
        self._open_calls: dict[tuple[str, int], ClientCall] = {}
        self._open_by_service: dict[str, dict[int, RequestSubsystem]] = {}
        self._calls: list[ClientCall] = []
        self._routes: dict[tuple, list[RequestSubsystem]] | None = None
        self._free: dict[tuple, _FreeList] = {}
        self._dispatch = {
            HTTP_SERVER_REQUEST: self._on_server_request,
            ASYNC_CONTEXT: self._on_async,
            HTTP_CLIENT_REQUEST: self._on_client_request,
            HTTP_CLIENT_RESPONSE: self._on_client_response,
            HTTP_SERVER_RESPONSE: self._on_server_response,
            REDIS_COMMAND: self._on_redis,
        }
        self._finished = False

    # -- index maintenance -------------------------------------------------

    def _wait_key(self, sub: RequestSubsystem) -> tuple | None:
        state = sub.run.current
        spec = _WAITING.get(state)
        if spec is None:
            if state == S6 and self.fanout:
                return (sub.service, CONSTRUCTOR, sub.run.bindings["a2"])
            return None
        kind, bound, _ = spec
        value = sub.run.bindings[bound]
        if kind == HTTPCLIENTREQUEST:
            value += 1
        return (sub.service, kind, value)

    def _unwait(self, sub: RequestSubsystem, key: tuple | None) -> None:
        if key is None:
            return
        subs = self._waiting.get(key)
        if subs:
            try:
                subs.remove(sub)
            except ValueError:
                pass
            if not subs:
                del self._waiting[key]

    def _wait(self, sub: RequestSubsystem) -> None:
        key = self._wait_key(sub)
        if key is not None:
            self._waiting.setdefault(key, []).append(sub)

    # -- operations --------------------------------------------------------

    def start_subsystem(self, ev: TraceEvent) -> RequestSubsystem:
        sockid = ev.fields["sockid"]
        sock_key = (ev.service, sockid)
        if sock_key in self._open_by_sock:
            raise DuplicateOpenSocket(
                f"{ev.service}: socket {sockid} already owned by an open request")
        sid = len(self.subsystems)
        anchor = ("requests", ev.service, str(sid))
        sub = RequestSubsystem(
            id=sid, service=ev.service, run=self.machine.start(sockid=sockid),
            server_req=ev, anchor=anchor, start_ns=ev.ts)
        self.subsystems.append(sub)
        self._open_by_sock[sock_key] = sub
        self._open_by_service.setdefault(ev.service, {})[sid] = sub
        self._wait(sub)
        sht, t = self.sht, ev.ts
        sht.set_attribute(t, anchor + ("state",), S1)
        sht.set_attribute(t, anchor + ("sockid",), sockid)
        sht.set_attribute(t, anchor + ("method",), ev.fields["method"])
        sht.set_attribute(t, anchor + ("url",), ev.fields["url"])
        return sub

    def try_advance(self, sub: RequestSubsystem, ev: TraceEvent) -> bool:
        """Apply the matching async_context rule to *sub*; False if none fits."""
        if ev.name != ASYNC_CONTEXT or ev.service != sub.service or sub.closed:
            return False
        old_key = self._wait_key(sub)
        moved = sub.run.step(ev)
        if moved is None:
            return False
        self._unwait(sub, old_key)
        self._wait(sub)
        self.sht.set_attribute(ev.ts, sub.anchor + ("state",), moved.state)
        if moved.state == S6:
            self._awaiting_client[(sub.service, sub.run.bindings["a4"])] = sub
        return True

    def attach_client_request(self, ev: TraceEvent) -> ClientCall:
        key = (ev.service, ev.fields["sockid"])
        sub = self._awaiting_client.pop(key, None)
        if sub is None or sub.state != S6:
            raise NoMatchingSubsystem(
                f"{ev.service}: no subsystem in S6 owns socket {ev.fields['sockid']}")
        call = ClientCall(owner=sub, index=len(sub.calls), request=ev)
        sub.calls.append(call)
        self._calls.append(call)
        self._open_calls[key] = call
        self.sht.set_attribute(ev.ts, sub.anchor + ("client", str(call.index)), "OPEN")
        return call

    def correlate_client_response(self, ev: TraceEvent) -> RequestSubsystem:
        key = (ev.service, ev.fields["sockid"])
        call = self._open_calls.pop(key, None)
        if call is None:
            raise NoMatchingSubsystem(
                f"{ev.service}: no open client call on socket {ev.fields['sockid']}")
        call.response = ev
        self.sht.set_attribute(ev.ts, call.owner.anchor + ("client", str(call.index)), "CLOSED")
        return call.owner

    def correlate_server_response(self, ev: TraceEvent) -> RequestSubsystem:
        key = (ev.service, ev.fields["sockid"])
        sub = self._open_by_sock.get(key)
        if sub is None:
            raise NoMatchingSubsystem(
                f"{ev.service}: no open request on socket {ev.fields['sockid']}")
        old_key = self._wait_key(sub)
        moved = sub.run.step(ev)
        assert moved is not None and moved.state == CLOSED
        self._unwait(sub, old_key)
        del self._open_by_sock[key]
        del self._open_by_service[sub.service][sub.id]
        a4 = sub.run.bindings.get("a4")
        if a4 is not None and self._awaiting_client.get((sub.service, a4)) is sub:
            del self._awaiting_client[(sub.service, a4)]
        sub.end_ns = ev.ts
        sub.server_resp = ev
        self.sht.set_attribute(ev.ts, sub.anchor + ("state",), CLOSED)
        return sub

    def attach_redis(self, ev: TraceEvent) -> RequestSubsystem:
        """Give a redis command to the open request on its service that
        encloses it: the earliest-started one without a command yet,
        otherwise the earliest-started one."""
        open_subs = self._open_by_service.get(ev.service)
        if not open_subs:
            raise NoMatchingSubsystem(f"{ev.service}: redis command outside any request")
        chosen = None
        for sub in open_subs.values():
            if sub.start_ns > ev.ts:
                break
            if not sub.redis:
                chosen = sub
                break
            if chosen is None:
                chosen = sub
        if chosen is None:
            raise NoMatchingSubsystem(f"{ev.service}: redis command precedes every open request")
        k = len(chosen.redis)
        chosen.redis.append(ev)
        path = chosen.anchor + ("redis", str(k))
        self.sht.set_attribute(ev.ts, path, ev.fields["cmd"])
        self.sht.set_attribute(ev.ts + ev.fields["duration_us"] * 1000, path, None)
        return chosen

    # -- cross-service linking --------------------------------------------

    def _route_index(self) -> dict[tuple, list[RequestSubsystem]]:
        if self._routes is None:
            routes: dict[tuple, list[RequestSubsystem]] = {}
            for sub in self.subsystems:
                routes.setdefault(_route_key(sub.server_req), []).append(sub)
            for subs in routes.values():
                subs.sort(key=lambda s: (s.start_ns, s.id))
            self._routes = routes
        return self._routes

    def link_cross_service(self, call: ClientCall) -> RequestSubsystem:
        """Parent the earliest unclaimed server request that has the call's
        (address, port, method, url) and starts no earlier than the call."""
        if call.child is not None:
            return call.child
        key = _route_key(call.request)
        candidates = self._route_index().get(key)
        if not candidates:
            raise UnlinkedCall(f"{call.owner.service}: no server received {key}")
        free = self._free.get(key)
        if free is None:
            free = self._free[key] = _FreeList([s.start_ns for s in candidates])
        i = free.claim_from(call.start_ns)
        if i is None:
            raise UnlinkedCall(f"{call.owner.service}: every server for {key} is already claimed")
        child = candidates[i]
        call.child = child
        child.parent = call
        return child

    # -- stream driver -----------------------------------------------------

    def process_event(self, ev: TraceEvent) -> None:
        if ev.ts > self.last_ts:
            self.last_ts = ev.ts
        handler = self._dispatch.get(ev.name)
        if handler is None:
            self.orphans.append(Orphan(ev, "unknown_event"))
            return
        handler(ev)

    def feed(self, events: Iterable[TraceEvent]) -> "Reconstructor":
        process = self.process_event
        for ev in events:
            process(ev)
        return self

    def _on_server_request(self, ev: TraceEvent) -> None:
        try:
            self.start_subsystem(ev)
        except DuplicateOpenSocket:
            self.orphans.append(Orphan(ev, "duplicate_open_socket"))

    def _on_async(self, ev: TraceEvent) -> None:
        f = ev.fields
        kind = f["kind"]
        value = f["async_id"] if kind == HTTPCLIENTREQUEST else f["ctx_id"]
        subs = self._waiting.get((ev.service, kind, value))
        if not subs:
            return
        for sub in list(subs):
            if self.try_advance(sub, ev):
                return

    def _on_client_request(self, ev: TraceEvent) -> None:
        try:
            self.attach_client_request(ev)
        except NoMatchingSubsystem:
            self.orphans.append(Orphan(ev, "no_matching_subsystem"))

    def _on_client_response(self, ev: TraceEvent) -> None:
        try:
            self.correlate_client_response(ev)
        except NoMatchingSubsystem:
            self.orphans.append(Orphan(ev, "no_matching_subsystem"))

    def _on_server_response(self, ev: TraceEvent) -> None:
        try:
            self.correlate_server_response(ev)
        except NoMatchingSubsystem:
            self.orphans.append(Orphan(ev, "no_matching_subsystem"))

    def _on_redis(self, ev: TraceEvent) -> None:
        try:
            self.attach_redis(ev)
        except NoMatchingSubsystem:
            self.orphans.append(Orphan(ev, "no_matching_subsystem"))

    # -- output ------------------------------------------------------------

    def finish(self, t_end: int | None = None) -> Reconstruction:
        """Link calls, close the history and build the span forest."""
        if not self._finished:
            for call in sorted(self._calls, key=lambda c: (c.start_ns, c.owner.id, c.index)):
                try:
                    self.link_cross_service(call)
                except UnlinkedCall:
                    self.orphans.append(Orphan(call.request, "unlinked_call"))
            end = max(self.last_ts, self.sht.current_end) if t_end is None else t_end
            self.sht.close(end)
            self._finished = True
        return Reconstruction(self.build_span_forest(), list(self.orphans),
                              self.subsystems, self.sht)

    def _server_span(self, sub: RequestSubsystem) -> SpanNode:
        end = sub.end_ns if sub.end_ns is not None else max(self.last_ts, sub.start_ns)
        span = SpanNode(service=sub.service, operation=_operation(sub.server_req),
                        kind="server", start_ns=sub.start_ns, end_ns=end,
                        complete=sub.closed, sockid=sub.sockid)
        children = []
        for call in sub.calls:
            resp = call.response
            c_end = resp.ts if resp is not None else end
            cspan = SpanNode(service=sub.service, operation=_operation(call.request),
                             kind="client", start_ns=call.start_ns, end_ns=max(c_end, call.start_ns),
                             complete=resp is not None, sockid=call.sockid)
            if call.child is not None:
                cspan.children.append(self._server_span(call.child))
            children.append(cspan)
        for rev in sub.redis:
            f = rev.fields
            children.append(SpanNode(service="redis", operation=f"redis:{f['cmd']}", kind="redis",
                                     start_ns=rev.ts, end_ns=rev.ts + f["duration_us"] * 1000))
        children.sort(key=lambda s: s.start_ns)
        span.children = children
        return span

    def build_span_forest(self) -> list[SpanNode]:
        roots = [s for s in self.subsystems if s.parent is None]
        roots.sort(key=lambda s: (s.start_ns, s.id))
        return [self._server_span(s) for s in roots]


def reconstruct(events: Iterable[TraceEvent], *, fanout: bool = False,
                sht: HistoryTree | None = None) -> Reconstruction:
    return Reconstructor(sht, fanout=fanout).feed(events).finish()
