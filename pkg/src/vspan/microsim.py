"""Discrete-event simulator that writes instrumented-runtime style traces.

Each simulated Node.js-like service allocates asynchronous resource ids from
its own monotonic counter and emits the same tracepoints a patched runtime
would: the four HTTP events, ``async_context`` records for the resources it
creates while issuing an outgoing call, and ``redis_command`` for services
that talk to Redis. Alongside the traces the simulator records the true
request trees, which the verifier uses as an oracle.

Time is virtual (integer nanoseconds); nothing sleeps.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

from .errors import (
    CycleDetected,
    InvalidWorkload,
    MalformedTopology,
    UnresolvedService,
)
from .events import (
    ASYNC_CONTEXT,
    HTTP_CLIENT_REQUEST,
    HTTP_CLIENT_RESPONSE,
    HTTP_SERVER_REQUEST,
    HTTP_SERVER_RESPONSE,
    REDIS_COMMAND,
    TraceEvent,
    TraceHeader,
    write_trace_file,
)
from .reconstruct import AFTER, CONSTRUCTOR, GETADDRINFOREQWRAP, HTTPCLIENTREQUEST, TCPWRAP

EPOCH_NS = 1_000_000_000
DECOY_ID_BASE = 1 << 40
GROUND_TRUTH_FILE = "ground_truth.json"
BUILTIN_TOPOLOGIES = ("uc1", "uc2", "uc3")

_DECOY_KINDS = (AFTER, CONSTRUCTOR, TCPWRAP, GETADDRINFOREQWRAP, HTTPCLIENTREQUEST,
                "PROMISE", "Timeout", "TickObject")


# -- topology --------------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """Gaussian duration in nanoseconds, truncated at zero."""

    mean_ns: int
    stddev_ns: int = 0

    def sample(self, rng: random.Random) -> int:
        if self.stddev_ns == 0:
            return self.mean_ns
        return max(0, round(rng.gauss(self.mean_ns, self.stddev_ns)))


@dataclass(frozen=True)
class Handler:
    type: str                                   # forward | terminal | redis
    downstream: tuple[str, ...] = ()
    method: str | None = None
    url: str | None = None
    pre: Dist = Dist(0)
    post: Dist = Dist(0)
    service_time: Dist = Dist(0)
    backend: str | None = None
    cmd: str = "get"
    key: str = "{id}"
    duration_us: int = 0


@dataclass(frozen=True)
class Service:
    name: str
    addr: str
    port: int
    handler: Handler
    host: str = ""
    traced: bool = True


@dataclass
class Topology:
    services: dict[str, Service]
    entry: str
    name: str = ""
    network_ns: int = 150_000
    async_step_ns: int = 15_000
    client_addr: str = "10.0.0.250"
    method: str = "GET"
    url_template: str = "/user/{id}"

    def edges(self) -> list[tuple[str, str]]:
        out = []
        for svc in self.services.values():
            for d in svc.handler.downstream:
                out.append((svc.name, d))
            if svc.handler.backend:
                out.append((svc.name, svc.handler.backend))
        return out

    def chain(self) -> list[str]:
        """Services visited from the entry, depth first."""
        seen: list[str] = []

        def visit(name: str) -> None:
            seen.append(name)
            h = self.services[name].handler
            for d in h.downstream:
                visit(d)
            if h.backend:
                visit(h.backend)

        visit(self.entry)
        return seen

    @property
    def traced_services(self) -> list[str]:
        return [s.name for s in self.services.values() if s.traced]


def _dist(raw: Any, unit_ns: int, where: str) -> Dist:
    if raw is None:
        return Dist(0)
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        if raw < 0:
            raise MalformedTopology(f"{where}: negative duration")
        return Dist(round(raw * unit_ns))
    if isinstance(raw, dict) and "mean" in raw:
        mean, std = raw["mean"], raw.get("stddev", 0)
        if mean < 0 or std < 0:
            raise MalformedTopology(f"{where}: negative mean or stddev")
        return Dist(round(mean * unit_ns), round(std * unit_ns))
    raise MalformedTopology(f"{where}: expected a number or {{mean, stddev}}, got {raw!r}")


def _handler(raw: Any, where: str) -> Handler:
    if not isinstance(raw, dict) or "type" not in raw:
        raise MalformedTopology(f"{where}: handler needs a type")
    kind = raw["type"]
    if kind == "forward":
        down = raw.get("downstream")
        if isinstance(down, str):
            down = (down,)
        if not down or not all(isinstance(d, str) for d in down):
            raise MalformedTopology(f"{where}: forward handler needs a downstream service")
        return Handler("forward", downstream=tuple(down), method=raw.get("method"),
                       url=raw.get("url"), pre=_dist(raw.get("pre_ms"), 1_000_000, where),
                       post=_dist(raw.get("post_ms"), 1_000_000, where))
    if kind == "terminal":
        return Handler("terminal", service_time=_dist(raw.get("service_ms"), 1_000_000, where))
    if kind == "redis":
        duration = raw.get("duration_us", 0)
        pre_us = raw.get("pre_us", 0)
        if not isinstance(duration, int) or duration < 0:
            raise MalformedTopology(f"{where}: duration_us must be a non-negative integer")
        if not isinstance(pre_us, (int, float)) or pre_us < 0:
            raise MalformedTopology(f"{where}: pre_us must be a non-negative constant")
        return Handler("redis", backend=raw.get("backend"), cmd=raw.get("cmd", "get"),
                       key=raw.get("key", "{id}"), duration_us=duration,
                       pre=Dist(round(pre_us * 1000)),
                       post=_dist(raw.get("post_ms"), 1_000_000, where))
    raise MalformedTopology(f"{where}: unknown handler type {kind!r}")


def parse_topology(doc: Any) -> Topology:
    if not isinstance(doc, dict) or not isinstance(doc.get("services"), list) or not doc["services"]:
        raise MalformedTopology("topology needs a non-empty services list")
    services: dict[str, Service] = {}
    for i, raw in enumerate(doc["services"]):
        where = f"services[{i}]"
        if not isinstance(raw, dict):
            raise MalformedTopology(f"{where}: expected an object")
        try:
            name, addr, port = raw["name"], raw["addr"], raw["port"]
        except KeyError as exc:
            raise MalformedTopology(f"{where}: missing {exc.args[0]!r}") from None
        if not isinstance(name, str) or not name or "/" in name:
            raise MalformedTopology(f"{where}: bad service name {name!r}")
        if name in services:
            raise MalformedTopology(f"duplicate service {name!r}")
        if not isinstance(port, int) or not 1 <= port <= 65535:
            raise MalformedTopology(f"{where}: bad port {port!r}")
        services[name] = Service(
            name=name, addr=addr, port=port,
            handler=_handler(raw.get("handler"), f"{where} ({name})"),
            host=raw.get("host") or f"ctr-{name}", traced=bool(raw.get("traced", True)))
    entry = doc.get("entry", doc["services"][0]["name"])
    topo = Topology(
        services=services, entry=entry, name=doc.get("name", ""),
        network_ns=round(doc.get("network_us", 150) * 1000),
        async_step_ns=round(doc.get("async_step_us", 15) * 1000),
        client_addr=doc.get("client_addr", "10.0.0.250"),
        method=doc.get("method", "GET"), url_template=doc.get("url", "/user/{id}"))
    validate_topology(topo)
    return topo


def validate_topology(topo: Topology) -> None:
    if topo.entry not in topo.services:
        raise UnresolvedService(f"entry service {topo.entry!r} is not defined")
    for src, dst in topo.edges():
        if dst not in topo.services:
            raise UnresolvedService(f"{src} refers to undefined service {dst!r}")
    for svc in topo.services.values():
        if not svc.traced and any(svc.name in s.handler.downstream for s in topo.services.values()):
            raise MalformedTopology(f"untraced service {svc.name!r} may only be a redis backend")
    colour: dict[str, int] = {}
    adj: dict[str, list[str]] = {}
    for src, dst in topo.edges():
        adj.setdefault(src, []).append(dst)

    def dfs(node: str, path: list[str]) -> None:
        colour[node] = 1
        for nxt in adj.get(node, ()):
            if colour.get(nxt) == 1:
                raise CycleDetected(" -> ".join(path + [node, nxt]))
            if colour.get(nxt) is None:
                dfs(nxt, path + [node])
        colour[node] = 2

    for name in topo.services:
        if name not in colour:
            dfs(name, [])
    if not topo.services[topo.entry].traced:
        raise MalformedTopology("entry service must be traced")


def load_topology(path: str | Path) -> Topology:
    """Load a topology file, or one of the bundled ``uc1``/``uc2``/``uc3``."""
    p = Path(path)
    if not p.exists() and str(path) in BUILTIN_TOPOLOGIES:
        text = resources.files("vspan.topologies").joinpath(f"{path}.json").read_text("utf-8")
    else:
        text = p.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedTopology(f"{path}: {exc}") from None
    return parse_topology(doc)


# -- workload --------------------------------------------------------------

@dataclass(frozen=True)
class Workload:
    n_requests: int
    mean_ns: int = 5_000_000
    stddev_ns: int = 1_000_000
    method: str | None = None  # None: the topology's entry request
    url_template: str | None = None
    seed: int = 0
    id_range: int = 8

    def __post_init__(self) -> None:
        if not isinstance(self.n_requests, int) or self.n_requests < 1:
            raise InvalidWorkload("n_requests must be >= 1")
        if self.mean_ns < 0 or self.stddev_ns < 0:
            raise InvalidWorkload("inter-arrival mean and stddev must be >= 0")
        if self.id_range < 1:
            raise InvalidWorkload("id_range must be >= 1")


@dataclass(frozen=True)
class Noise:
    """Runtime activity unrelated to the traced requests.

    ``gap_max`` makes the id allocator skip up to that many ids between
    allocations; ``decoys`` adds async_context records whose ids come from a
    range no real resource uses, so they can never satisfy a correlation rule.
    """

    gap_max: int = 6
    decoys: bool = False
    decoy_rate: float = 0.5


# -- simulation ------------------------------------------------------------

@dataclass
class SimulationResult:
    topology: Topology
    events: dict[str, list[TraceEvent]]
    ground_truth: dict[str, Any]

    @property
    def emitted(self) -> int:
        return sum(len(v) for v in self.events.values())


@dataclass
class _Incoming:
    request_id: int
    ident: int
    method: str
    url: str
    src_addr: str
    src_port: int
    node: dict[str, Any]                 # ground-truth node being filled in
    reply: Callable[[int], None]


@dataclass
class _Allocator:
    next_id: int
    gap_max: int
    rng: random.Random

    def alloc(self) -> int:
        if self.gap_max:
            self.next_id += self.rng.randint(0, self.gap_max)
        value = self.next_id
        self.next_id += 1
        return value

    def alloc_pair(self) -> tuple[int, int]:
        first = self.alloc()
        self.next_id = first + 2
        return first, first + 1


class _Sim:
    def __init__(self, topo: Topology, wl: Workload, noise: Noise):
        self.topo = topo
        self.wl = wl
        self.noise = noise
        self.rng = random.Random(wl.seed)
        self.queue: list[tuple[int, int, Callable, tuple]] = []
        self.seq = 0
        self.now = 0
        self.events: dict[str, list[TraceEvent]] = {
            s.name: [] for s in topo.services.values() if s.traced}
        self.alloc = {name: _Allocator(self.rng.randint(1000, 40000), noise.gap_max, self.rng)
                      for name in topo.services}
        self.ports = {name: 32768 + self.rng.randint(0, 8000) for name in topo.services}
        self.client_port = 40000
        self.decoy_next = DECOY_ID_BASE
        self.requests: list[dict[str, Any]] = []

    # scheduling
    def at(self, t: int, fn: Callable, *args) -> None:
        heapq.heappush(self.queue, (t, self.seq, fn, args))
        self.seq += 1

    def run(self) -> None:
        while self.queue:
            t, _, fn, args = heapq.heappop(self.queue)
            self.now = t
            fn(*args)

    # emission
    def emit(self, svc: Service, name: str, fields: dict[str, Any]) -> None:
        self.events[svc.name].append(TraceEvent(self.now, svc.name, svc.host, name, fields))

    def emit_async(self, svc: Service, kind: str, async_id: int, ctx_id: int) -> None:
        self.maybe_decoy(svc)
        self.emit(svc, ASYNC_CONTEXT, {"async_id": async_id, "ctx_id": ctx_id, "kind": kind})

    def maybe_decoy(self, svc: Service) -> None:
        if not self.noise.decoys or self.rng.random() >= self.noise.decoy_rate:
            return
        ctx = self.decoy_next
        self.decoy_next += 1 + self.rng.randint(0, 3)
        aid = self.decoy_next
        self.decoy_next += 1
        kind = self.rng.choice(_DECOY_KINDS)
        self.emit(svc, ASYNC_CONTEXT, {"async_id": aid, "ctx_id": ctx, "kind": kind})

    def next_port(self, name: str) -> int:
        p = self.ports[name]
        self.ports[name] = 32768 + (p - 32768 + 1) % 28000
        return p

    # request life cycle
    def start_request(self, rid: int) -> None:
        ident = self.rng.randint(1, self.wl.id_range)
        method = self.wl.method or self.topo.method
        url = (self.wl.url_template or self.topo.url_template).format(id=ident)
        root: dict[str, Any] = {}
        self.requests.append({"id": rid, "root": root})
        port = self.client_port
        self.client_port = 40000 + (port - 40000 + 1) % 20000
        inc = _Incoming(rid, ident, method, url, self.topo.client_addr, port,
                        root, lambda t: None)
        self.arrive(self.topo.services[self.topo.entry], inc)

    def arrive(self, svc: Service, inc: _Incoming) -> None:
        h = svc.handler
        node = inc.node
        node.update(service=svc.name, kind="server", operation=f"{inc.method} {inc.url}",
                    start_ns=self.now, end_ns=None, children=[])
        if not svc.traced:
            node["traced"] = False
            self.at(self.now + h.service_time.sample(self.rng), self.respond, svc, inc, 0)
            return
        sockid = self.alloc[svc.name].alloc()
        node["sockid"] = sockid
        self.emit(svc, HTTP_SERVER_REQUEST, {
            "method": inc.method, "url": inc.url,
            "src_addr": inc.src_addr, "src_port": inc.src_port,
            "dst_addr": svc.addr, "dst_port": svc.port, "sockid": sockid})
        if h.type == "forward":
            self.at(self.now + h.pre.sample(self.rng), self.after, svc, inc, sockid)
        elif h.type == "terminal":
            self.at(self.now + h.service_time.sample(self.rng), self.respond, svc, inc, sockid)
        else:
            self.at(self.now + h.pre.sample(self.rng), self.redis_command, svc, inc, sockid)

    def after(self, svc: Service, inc: _Incoming, sockid: int) -> None:
        a2 = self.alloc[svc.name].alloc()
        self.emit_async(svc, AFTER, a2, sockid)
        self.at(self.now + self.topo.async_step_ns, self.constructor, svc, inc, sockid, a2, 0)

    def constructor(self, svc: Service, inc: _Incoming, sockid: int, a2: int, k: int) -> None:
        a3 = self.alloc[svc.name].alloc()
        self.emit_async(svc, CONSTRUCTOR, a3, a2)
        self.at(self.now + self.topo.async_step_ns, self.tcpwrap, svc, inc, sockid, a2, a3, k)

    def tcpwrap(self, svc, inc, sockid, a2, a3, k) -> None:
        a4 = self.alloc[svc.name].alloc()
        self.emit_async(svc, TCPWRAP, a4, a3)
        self.at(self.now + self.topo.async_step_ns, self.getaddrinfo, svc, inc, sockid, a2, a4, k)

    def getaddrinfo(self, svc, inc, sockid, a2, a4, k) -> None:
        a5, a6 = self.alloc[svc.name].alloc_pair()
        self.emit_async(svc, GETADDRINFOREQWRAP, a5, a4)
        # ids are reserved together, the request object shows up a moment later
        self.at(self.now + self.topo.async_step_ns // 3, self.emit_async,
                svc, HTTPCLIENTREQUEST, a6, a4)
        self.at(self.now + self.topo.async_step_ns, self.client_request, svc, inc, sockid, a2, a4, k)

    def client_request(self, svc, inc, sockid, a2, a4, k) -> None:
        h = svc.handler
        target = self.topo.services[h.downstream[k]]
        method = h.method or inc.method
        url = (h.url or inc.url).format(id=inc.ident)
        port = self.next_port(svc.name)
        self.emit(svc, HTTP_CLIENT_REQUEST, {
            "method": method, "url": url, "src_addr": svc.addr, "src_port": port,
            "dst_addr": target.addr, "dst_port": target.port, "sockid": a4})
        child: dict[str, Any] = {}
        inc.node["children"].append(child)

        def on_reply(t_reply: int) -> None:
            self.at(t_reply + self.topo.network_ns, self.client_response,
                    svc, inc, sockid, a2, a4, k, target, method, url, port)

        sub = _Incoming(inc.request_id, inc.ident, method, url, svc.addr, port, child, on_reply)
        self.at(self.now + self.topo.network_ns, self.arrive, target, sub)

    def client_response(self, svc, inc, sockid, a2, a4, k, target, method, url, port) -> None:
        self.emit(svc, HTTP_CLIENT_RESPONSE, {
            "method": method, "url": url, "src_addr": svc.addr, "src_port": port,
            "dst_addr": target.addr, "dst_port": target.port, "sockid": a4, "status": 200})
        h = svc.handler
        if k + 1 < len(h.downstream):
            self.at(self.now + self.topo.async_step_ns, self.constructor, svc, inc, sockid, a2, k + 1)
        else:
            self.at(self.now + h.post.sample(self.rng), self.respond, svc, inc, sockid)

    def redis_command(self, svc: Service, inc: _Incoming, sockid: int) -> None:
        h = svc.handler
        key = h.key.format(id=inc.ident)
        self.emit(svc, REDIS_COMMAND, {"cmd": h.cmd, "key": key, "duration_us": h.duration_us})
        dur = h.duration_us * 1000
        inc.node["children"].append({
            "service": "redis", "kind": "redis", "operation": f"redis:{h.cmd}",
            "start_ns": self.now, "end_ns": self.now + dur, "children": []})
        self.at(self.now + dur + h.post.sample(self.rng), self.respond, svc, inc, sockid)

    def respond(self, svc: Service, inc: _Incoming, sockid: int) -> None:
        if svc.traced:
            self.emit(svc, HTTP_SERVER_RESPONSE, {
                "method": inc.method, "url": inc.url,
                "src_addr": inc.src_addr, "src_port": inc.src_port,
                "dst_addr": svc.addr, "dst_port": svc.port, "sockid": sockid, "status": 200})
        inc.node["end_ns"] = self.now
        inc.reply(self.now)


def simulate(topo: Topology, wl: Workload, noise: Noise | None = None) -> SimulationResult:
    sim = _Sim(topo, wl, noise or Noise())
    t = EPOCH_NS
    for rid in range(wl.n_requests):
        sim.at(t, sim.start_request, rid)
        t += Dist(wl.mean_ns, wl.stddev_ns).sample(sim.rng)
    sim.run()
    gt = {
        "topology": topo.name,
        "seed": wl.seed,
        "n_requests": wl.n_requests,
        "requests": sim.requests,
        "emitted": {k: len(v) for k, v in sim.events.items()},
    }
    return SimulationResult(topology=topo, events=sim.events, ground_truth=gt)


def expected_event_count(topo: Topology, *, requests: int = 1) -> int:
    """Closed-form per-request emission count with decoys disabled."""

    def count(name: str) -> int:
        svc = topo.services[name]
        h = svc.handler
        own = 0
        if svc.traced:
            if h.type == "forward":
                # request/response + per call: 5 async records + client request/response
                own = 2 + 1 + len(h.downstream) * 6
            elif h.type == "redis":
                own = 3
            else:
                own = 2
        return own + sum(count(d) for d in h.downstream) + (count(h.backend) if h.backend else 0)

    return requests * count(topo.entry)


def parse_skew(spec: str | None) -> dict[str, int]:
    """``"user=+3ms,auth=-500us"`` -> ``{"user": 3000000, "auth": -500000}``."""
    out: dict[str, int] = {}
    if not spec:
        return out
    units = (("ns", 1), ("us", 1_000), ("ms", 1_000_000), ("s", 1_000_000_000))
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        name, sep, value = part.partition("=")
        if not sep or not name:
            raise ValueError(f"bad skew entry {part!r}; expected service=<offset><unit>")
        value = value.strip()
        for suffix, scale in units:
            if value.endswith(suffix) and value[: -len(suffix)].lstrip("+-").replace(".", "", 1).isdigit():
                out[name.strip()] = round(float(value[: -len(suffix)]) * scale)
                break
        else:
            raise ValueError(f"bad skew value {value!r}; use ns, us, ms or s")
    return out


def write_experiment(result: SimulationResult, directory: str | Path,
                     skew: dict[str, int] | None = None) -> list[Path]:
    """Write ``<service>.trace`` for every traced service plus ground truth.

    A skew of ``+d`` shifts that service's recorded clock forward by ``d``
    and declares ``clock_offset_ns = -d`` so the aggregator can undo it.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    skew = skew or {}
    unknown = set(skew) - set(result.events)
    if unknown:
        raise UnresolvedService(f"skew names unknown services {sorted(unknown)}")
    written = []
    for name in sorted(result.events):
        svc = result.topology.services[name]
        d = skew.get(name, 0)
        events = result.events[name]
        if d:
            if events and events[0].ts + d < 0:
                raise InvalidWorkload(f"skew {d} for {name} pushes timestamps below zero")
            events = [ev.with_ts(ev.ts + d) for ev in events]
        path = directory / f"{name}.trace"
        write_trace_file(path, TraceHeader(service=name, host=svc.host, clock_offset_ns=-d), events)
        written.append(path)
    gt_path = directory / GROUND_TRUTH_FILE
    gt_path.write_text(json.dumps(result.ground_truth, sort_keys=True, separators=(",", ":")) + "\n",
                       encoding="utf-8")
    return written
