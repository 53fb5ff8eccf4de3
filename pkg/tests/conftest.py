import pytest

from vspan.events import TraceEvent


def http(name, ts, service, sockid, *, method="GET", url="/user/1", src=("10.0.0.9", 41000),
         dst=("10.0.0.1", 80), status=None, host="c1"):
    fields = {"method": method, "url": url, "src_addr": src[0], "src_port": src[1],
              "dst_addr": dst[0], "dst_port": dst[1], "sockid": sockid}
    if status is not None:
        fields["status"] = status
    return TraceEvent(ts, service, host, name, fields)


def actx(ts, service, async_id, ctx_id, kind, host="c1"):
    return TraceEvent(ts, service, host, "async_context",
                      {"async_id": async_id, "ctx_id": ctx_id, "kind": kind})


def gateway_chain(t0=1000, sockid=48517):
    """The worked gateway example: 48517 -> 48518 -> 48694 -> 48696 -> 48697/48698."""
    return [
        http("http_server_request", t0, "gateway", sockid),
        actx(t0 + 10, "gateway", 48518, sockid, "after"),
        actx(t0 + 20, "gateway", 48694, 48518, "constructor"),
        actx(t0 + 30, "gateway", 48696, 48694, "TCPWRAP"),
        actx(t0 + 40, "gateway", 48697, 48696, "GETADDRINFOREQWRAP"),
        actx(t0 + 45, "gateway", 48698, 48696, "HTTPCLIENTREQUEST"),
    ]


@pytest.fixture
def chain_events():
    return gateway_chain()


def random_interleaving(streams, rng):
    """A random merge that keeps every stream's own order and never lets a
    later timestamp overtake an earlier one; only equal-ts events move."""
    heads = [0] * len(streams)
    out = []
    total = sum(map(len, streams))
    while len(out) < total:
        live = [i for i, s in enumerate(streams) if heads[i] < len(s)]
        t = min(streams[i][heads[i]].ts for i in live)
        i = rng.choice([i for i in live if streams[i][heads[i]].ts == t])
        out.append(streams[i][heads[i]])
        heads[i] += 1
    return out
