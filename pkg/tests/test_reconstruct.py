import random

import pytest

from vspan.aggregator import build_experiment, load_experiment, merge_streams, TraceFile
from vspan.errors import DuplicateOpenSocket, NoMatchingSubsystem
from vspan.events import TraceHeader
from vspan.microsim import Noise, Workload, load_topology, simulate, write_experiment
from vspan.reconstruct import (
    CLOSED,
    STATE_INDEX,
    S1,
    S2,
    S6,
    Reconstructor,
    forest_from_dict,
    forest_to_dict,
    reconstruct,
)
from vspan.verify import canonical_forest, compare

from conftest import actx, gateway_chain, http, random_interleaving

USER = ("10.0.0.2", 3002)


def merged(result):
    return merge_streams(build_experiment(
        TraceFile(TraceHeader(k, "h", 0), v, k) for k, v in result.events.items()))


def shape(span):
    return (span.service, span.kind, [shape(c) for c in span.children])


# -- the worked socket chain -----------------------------------------------

def test_chain_bindings(chain_events):
    r = Reconstructor()
    sub = r.start_subsystem(chain_events[0])
    assert (sub.state, sub.sockid) == (S1, 48517)
    assert r.try_advance(sub, chain_events[1])
    assert (sub.state, sub.a2) == (S2, 48518)
    for ev in chain_events[2:]:
        assert r.try_advance(sub, ev)
    assert (sub.a3, sub.a4, sub.a5, sub.a6) == (48694, 48696, 48697, 48698)
    assert sub.state == S6
    assert sub.run.is_accepting()


def test_foreign_context_ignored(chain_events):
    r = Reconstructor()
    sub = r.start_subsystem(chain_events[0])
    assert not r.try_advance(sub, actx(1010, "gateway", 48518, 99999, "after"))
    assert sub.state == S1
    # right ids, wrong service
    assert not r.try_advance(sub, actx(1010, "user", 48518, 48517, "after"))
    # the +1 rule is exact
    for ev in chain_events[1:5]:
        r.try_advance(sub, ev)
    assert not r.try_advance(sub, actx(1050, "gateway", 48699, 48696, "HTTPCLIENTREQUEST"))
    assert sub.state == "S5"


def test_state_attrs_in_history(chain_events):
    r = Reconstructor()
    sub = r.start_subsystem(chain_events[0])
    r.sht.close(2000)
    anchor = "/requests/gateway/0"
    assert r.sht.query_value(1000, anchor + "/state") == S1
    assert r.sht.query_value(1000, anchor + "/sockid") == 48517
    assert r.sht.query_value(1000, anchor + "/method") == "GET"
    assert sub.anchor == ("requests", "gateway", "0")


def test_two_sockets_independent():
    r = Reconstructor()
    a = r.start_subsystem(http("http_server_request", 1, "gateway", 48517))
    b = r.start_subsystem(http("http_server_request", 2, "gateway", 48519))
    assert a.id != b.id
    r.try_advance(a, actx(3, "gateway", 48520, 48517, "after"))
    assert (a.state, b.state) == (S2, S1)


def test_duplicate_socket():
    r = Reconstructor()
    r.start_subsystem(http("http_server_request", 1, "gateway", 48517))
    with pytest.raises(DuplicateOpenSocket):
        r.start_subsystem(http("http_server_request", 2, "gateway", 48517))
    rec = reconstruct([http("http_server_request", 1, "gateway", 48517),
                       http("http_server_request", 2, "gateway", 48517)])
    assert [o.reason for o in rec.orphans] == ["duplicate_open_socket"]
    # once closed the socket id may be reused
    rec = reconstruct([http("http_server_request", 1, "gateway", 48517),
                       http("http_server_response", 2, "gateway", 48517, status=200),
                       http("http_server_request", 3, "gateway", 48517)])
    assert not rec.orphans and len(rec.forest) == 2


# -- client side ------------------------------------------------------------

def test_client_request_attach(chain_events):
    r = Reconstructor().feed(chain_events)
    call = r.attach_client_request(http("http_client_request", 1060, "gateway", 48696, dst=USER))
    assert call.owner.sockid == 48517
    with pytest.raises(NoMatchingSubsystem):
        r.attach_client_request(http("http_client_request", 1070, "gateway", 77777, dst=USER))


def test_client_request_orphan(chain_events):
    rec = reconstruct(chain_events + [http("http_client_request", 1060, "gateway", 77777, dst=USER)])
    assert [o.reason for o in rec.orphans] == ["no_matching_subsystem"]
    assert len(rec.forest) == 1


def test_two_s6_distinct_sockets():
    r = Reconstructor()
    a = gateway_chain(1000, 48517)
    b = [http("http_server_request", 1001, "gateway", 48519),
         actx(1011, "gateway", 48700, 48519, "after"),
         actx(1021, "gateway", 48702, 48700, "constructor"),
         actx(1031, "gateway", 48703, 48702, "TCPWRAP"),
         actx(1041, "gateway", 48705, 48703, "GETADDRINFOREQWRAP"),
         actx(1046, "gateway", 48706, 48703, "HTTPCLIENTREQUEST")]
    r.feed(sorted(a + b, key=lambda e: e.ts))
    cb = r.attach_client_request(http("http_client_request", 1060, "gateway", 48703, dst=USER))
    ca = r.attach_client_request(http("http_client_request", 1061, "gateway", 48696, dst=USER))
    assert (ca.owner.sockid, cb.owner.sockid) == (48517, 48519)


def test_client_response_correlation(chain_events):
    r = Reconstructor().feed(chain_events)
    r.process_event(http("http_client_request", 1060, "gateway", 48696, dst=USER))
    owner = r.correlate_client_response(http("http_client_response", 1900, "gateway", 48696,
                                             dst=USER, status=200))
    assert owner.sockid == 48517
    assert owner.calls[0].response.ts == 1900
    with pytest.raises(NoMatchingSubsystem):
        r.correlate_client_response(http("http_client_response", 1901, "gateway", 48696,
                                         dst=USER, status=200))


def test_server_response():
    r = Reconstructor()
    r.process_event(http("http_server_request", 1, "redis-gateway", 48517))
    sub = r.correlate_server_response(http("http_server_response", 9, "redis-gateway", 48517,
                                           status=200))
    assert (sub.state, sub.end_ns) == (CLOSED, 9)
    with pytest.raises(NoMatchingSubsystem):
        r.correlate_server_response(http("http_server_response", 10, "redis-gateway", 48517,
                                         status=200))
    rec = reconstruct([http("http_server_response", 10, "gateway", 5, status=200)])
    assert rec.orphans[0].reason == "no_matching_subsystem"


def test_terminal_from_s2():
    rec = reconstruct([http("http_server_request", 1, "orders", 10),
                       actx(2, "orders", 11, 10, "after"),
                       http("http_server_response", 9, "orders", 10, status=200)])
    (root,) = rec.forest
    assert root.complete and root.duration_ns == 8


# -- linking ------------------------------------------------------------------

def _forward(t, svc, sock, base, dst, url="/user/1"):
    """Full forwarding handler for one call, returning (events, a4)."""
    a2, a3, a4, a5 = base, base + 3, base + 5, base + 7
    return [http("http_server_request", t, svc, sock, url=url),
            actx(t + 1, svc, a2, sock, "after"),
            actx(t + 2, svc, a3, a2, "constructor"),
            actx(t + 3, svc, a4, a3, "TCPWRAP"),
            actx(t + 4, svc, a5, a4, "GETADDRINFOREQWRAP"),
            actx(t + 5, svc, a5 + 1, a4, "HTTPCLIENTREQUEST"),
            http("http_client_request", t + 6, svc, a4, dst=dst, url=url)], a4


def test_link_child():
    up, a4 = _forward(0, "gateway", 100, 200, USER)
    down = [http("http_server_request", 8, "user", 300, dst=USER),
            http("http_server_response", 20, "user", 300, dst=USER, status=200)]
    tail = [http("http_client_response", 22, "gateway", a4, dst=USER, status=200),
            http("http_server_response", 25, "gateway", 100, status=200)]
    rec = reconstruct(sorted(up + down + tail, key=lambda e: e.ts))
    assert not rec.orphans
    (root,) = rec.forest
    assert shape(root) == ("gateway", "server", [("gateway", "client", [("user", "server", [])])])


def test_racing_identical_calls_fifo():
    a, a4a = _forward(0, "gateway", 100, 200, USER)
    b, a4b = _forward(1, "gateway", 101, 300, USER)
    down = [http("http_server_request", 10, "user", 500, dst=USER),
            http("http_server_request", 11, "user", 501, dst=USER),
            http("http_server_response", 30, "user", 500, dst=USER, status=200),
            http("http_server_response", 31, "user", 501, dst=USER, status=200),
            http("http_client_response", 32, "gateway", a4a, dst=USER, status=200),
            http("http_client_response", 33, "gateway", a4b, dst=USER, status=200)]
    rec = reconstruct(sorted(a + b + down, key=lambda e: e.ts))
    kids = {r.sockid: r.children[0].children[0].sockid for r in rec.forest}
    assert kids == {100: 500, 101: 501}


def test_unlinked_call():
    up, a4 = _forward(0, "gateway", 100, 200, USER)
    rec = reconstruct(up + [http("http_client_response", 22, "gateway", a4, dst=USER, status=200),
                            http("http_server_response", 25, "gateway", 100, status=200)])
    assert [o.reason for o in rec.orphans] == ["unlinked_call"]
    (root,) = rec.forest
    assert root.children[0].children == []


def test_empty_stream():
    rec = reconstruct([])
    assert rec.forest == [] and rec.orphans == []


def test_unclosed_root(chain_events):
    rec = reconstruct(chain_events)
    (root,) = rec.forest
    assert not root.complete
    assert root.end_ns == chain_events[-1].ts


def test_forest_json_round_trip():
    res = simulate(load_topology("uc1"), Workload(3, seed=2))
    forest = reconstruct(merged(res)).forest
    doc = forest_to_dict(forest)
    assert set(doc) == {"spans"}
    assert set(doc["spans"][0]) >= {"service", "operation", "kind", "start_ns", "end_ns", "complete",
                                    "children"}
    assert forest_from_dict(doc) == forest


# -- use case shapes ------------------------------------------------------------

def test_uc1_shape():
    rec = reconstruct(merged(simulate(load_topology("uc1"), Workload(1, seed=1))))
    (root,) = rec.forest
    assert shape(root) == (
        "gateway", "server", [("gateway", "client", [
            ("user", "server", [("user", "client", [
                ("redis-gateway", "server", [("redis", "redis", [])])])])])])
    assert [s.operation for s in root.walk() if s.kind == "redis"] == ["redis:get"]


def test_uc2_shape():
    rec = reconstruct(merged(simulate(load_topology("uc2"), Workload(1, seed=1))))
    (root,) = rec.forest
    assert shape(root) == ("gateway", "server", [("gateway", "client", [("orders", "server", [])])])
    assert root.operation.startswith("POST ")


def test_uc3_shape():
    rec = reconstruct(merged(simulate(load_topology("uc3"), Workload(1, seed=1))))
    servers = [s.service for s in rec.forest[0].walk() if s.kind != "client"]
    assert servers == ["gateway", "auth", "user-proxy", "user", "redis-gateway", "redis"]


def test_1200_roots():
    res = simulate(load_topology("uc1"), Workload(1200, seed=42), Noise(decoys=True))
    rec = reconstruct(merged(res))
    assert len(rec.forest) == 1200
    assert compare(rec.forest, res.ground_truth).ok


# -- properties -------------------------------------------------------------

@pytest.mark.parametrize("topo", ["uc1", "uc2", "uc3"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ground_truth_equivalence(topo, seed):
    res = simulate(load_topology(topo), Workload(60, mean_ns=400_000, stddev_ns=300_000, seed=seed),
                   Noise(decoys=True))
    rec = reconstruct(merged(res))
    report = compare(rec.forest, res.ground_truth)
    assert report.ok, report.summary()
    assert rec.orphans == []

    # exactly once: one subsystem per server request, every response used once
    n_req = sum(e.name == "http_server_request" for evs in res.events.values() for e in evs)
    assert len(rec.subsystems) == n_req
    assert all(s.state == CLOSED for s in rec.subsystems)

    for root in rec.forest:
        for span in root.walk():
            assert [c.start_ns for c in span.children] == sorted(c.start_ns for c in span.children)
            for c in span.children:
                assert span.start_ns <= c.start_ns <= c.end_ns <= span.end_ns


def test_monotone_states():
    res = simulate(load_topology("uc3"), Workload(20, mean_ns=50_000, stddev_ns=30_000, seed=4),
                   Noise(decoys=True))
    streams = [res.events[k] for k in sorted(res.events)]
    rng = random.Random(9)
    for _ in range(10):
        rec = reconstruct(random_interleaving(streams, rng))
        for sub in rec.subsystems:
            idx = [STATE_INDEX[s] for _, s, _ in sub.run.trace_positions]
            assert idx == sorted(idx)
            assert idx[-1] == STATE_INDEX[CLOSED]


def test_interleavings_agree():
    res = simulate(load_topology("uc3"), Workload(10, mean_ns=160_000, stddev_ns=0, seed=5),
                   Noise(decoys=True))
    streams = [res.events[k] for k in sorted(res.events)]
    rng = random.Random(2)
    first = canonical_forest(reconstruct(random_interleaving(streams, rng)).forest)
    seen = set()
    for _ in range(20):
        stream = random_interleaving(streams, rng)
        seen.add(tuple(map(id, stream)))
        assert canonical_forest(reconstruct(stream).forest) == first
    assert len(seen) > 10


def test_experiment_with_skew(tmp_path):
    res = simulate(load_topology("uc3"), Workload(40, seed=8), Noise(decoys=True))
    write_experiment(res, tmp_path, {"auth": 3_000_000, "user": -700_000})
    rec = reconstruct(merge_streams(load_experiment(tmp_path)))
    assert compare(rec.forest, res.ground_truth).ok


# -- fan-out extension ----------------------------------------------------------

def _two_call_stream():
    sock = 100
    evs = [http("http_server_request", 0, "gateway", sock),
           actx(1, "gateway", 101, sock, "after")]
    t, nid = 2, 110
    a4s = []
    for _ in range(2):
        a3, a4, a5 = nid, nid + 2, nid + 4
        evs += [actx(t, "gateway", a3, 101, "constructor"),
                actx(t + 1, "gateway", a4, a3, "TCPWRAP"),
                actx(t + 2, "gateway", a5, a4, "GETADDRINFOREQWRAP"),
                actx(t + 3, "gateway", a5 + 1, a4, "HTTPCLIENTREQUEST"),
                http("http_client_request", t + 4, "gateway", a4, dst=USER),
                http("http_server_request", t + 5, "user", 900 + nid, dst=USER),
                http("http_server_response", t + 8, "user", 900 + nid, dst=USER, status=200),
                http("http_client_response", t + 9, "gateway", a4, dst=USER, status=200)]
        a4s.append(a4)
        t, nid = t + 10, nid + 20
    evs.append(http("http_server_response", t, "gateway", sock, status=200))
    return evs


def test_fanout_off_by_default():
    rec = reconstruct(_two_call_stream())
    gw = next(s for s in rec.subsystems if s.service == "gateway")
    assert len(gw.calls) == 1
    assert any(o.reason == "no_matching_subsystem" for o in rec.orphans)


def test_fanout_extension():
    rec = reconstruct(_two_call_stream(), fanout=True)
    assert rec.orphans == []
    (root,) = rec.forest
    assert [c.kind for c in root.children] == ["client", "client"]
    assert all(c.children[0].service == "user" for c in root.children)
