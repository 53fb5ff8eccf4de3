import random

import pytest
from hypothesis import given, settings, strategies as st

from vspan.errors import (
    BackwardsTime,
    InvalidAttributePath,
    OutOfRange,
    TreeNotClosed,
    UnknownAttribute,
)
from vspan.sht import HistoryTree, attr_path, build_tree


def linear_oracle(changes, t_end):
    """Sealed intervals straight from the change list: a value holds from its
    set time up to one before the next change of the same attribute."""
    per_attr = {}
    for t, a, v in changes:
        seq = per_attr.setdefault(attr_path(a), [])
        if seq and seq[-1][0] == t:
            seq[-1] = (t, v)
        else:
            seq.append((t, v))
    out = []
    for a, seq in per_attr.items():
        for (t, v), nxt in zip(seq, seq[1:] + [(t_end + 1, None)]):
            out.append((t, nxt[0] - 1, a, v))
    return out


def scan(intervals, t):
    return {a: v for s, e, a, v in intervals if s <= t <= e}


def random_changes(rng, n, n_attrs=200, step=7):
    t, out = 0, []
    for _ in range(n):
        t += rng.randrange(step)
        out.append((t, f"/requests/svc{rng.randrange(4)}/{rng.randrange(n_attrs)}/state",
                    rng.choice(["S1", "S2", "S3", "S4", "S5", "S6", None, 3, 17])))
    return out, t


def test_seal_previous():
    tree = HistoryTree()
    tree.set_attribute(10, "/a", "S1")
    tree.set_attribute(20, "/a", "S2")
    assert tree.ongoing == {("a",): (20, "S2")}
    tree.close(50)
    assert [(i.start_ns, i.end_ns, i.value) for i in tree.query_history("/a")] == \
        [(10, 19, "S1"), (20, 50, "S2")]


def test_boundaries():
    tree = build_tree([(10, "/a", "S1"), (20, "/a", "S2")], 50)
    assert tree.query_at(15) == {("a",): "S1"}
    assert tree.query_at(19) == {("a",): "S1"}
    assert tree.query_at(20) == {("a",): "S2"}
    assert tree.query_at(5) == {}


def test_backwards_time():
    tree = HistoryTree()
    tree.set_attribute(10, "/a", 1)
    with pytest.raises(BackwardsTime):
        tree.set_attribute(5, "/a", 2)
    with pytest.raises(BackwardsTime):
        tree.close(9)


def test_close_semantics():
    tree = HistoryTree()
    tree.set_attribute(10, "/x", "x")
    tree.close(50)
    assert [(i.start_ns, i.end_ns) for i in tree.query_history("/x")] == [(10, 50)]
    tree.close(50)
    tree.close(10**9)
    assert tree.end == 50

    empty = HistoryTree()
    empty.close(0)
    assert list(empty.iter_intervals()) == []
    assert empty.query_at(0) == {}


def test_query_preconditions():
    tree = HistoryTree()
    tree.set_attribute(3, "/a", 1)
    with pytest.raises(TreeNotClosed):
        tree.query_at(3)
    tree.close(9)
    with pytest.raises(OutOfRange):
        tree.query_at(10)
    with pytest.raises(UnknownAttribute):
        tree.query_history("/nope")
    assert len(tree.query_history("/a")) == 1


def test_attribute_paths():
    assert attr_path("/requests/gateway/48517/state") == ("requests", "gateway", "48517", "state")
    assert attr_path(["a", "b"]) == ("a", "b")
    for bad in ("", "/", "/a//b", ["a/b"], [], ["a", ""]):
        with pytest.raises(InvalidAttributePath):
            attr_path(bad)


def test_subtree():
    tree = HistoryTree()
    tree.set_attribute(1, "/requests/gateway/48517/state", "S1")
    tree.set_attribute(1, "/requests/gateway/48517/sockid", 48517)
    tree.set_attribute(2, "/requests/gateway/48519/state", "S1")
    tree.set_attribute(2, "/requests/user/7/state", "S1")
    got = tree.subtree("/requests/gateway")
    assert got == sorted(got)
    assert {p[2] for p in got} == {"48517", "48519"}
    assert tree.subtree("/requests/user/7/state") == [("requests", "user", "7", "state")]
    assert tree.subtree("/requests/auth") == []


@pytest.mark.parametrize("cap,fanout", [(64, 16), (4, 2), (3, 3), (1, 2)])
def test_oracle_small_nodes(cap, fanout):
    rng = random.Random(cap * 31 + fanout)
    changes, t_last = random_changes(rng, 3000, n_attrs=40)
    t_end = t_last + 5
    tree = build_tree(changes, t_end, node_capacity=cap, fanout=fanout)
    tree.check_invariants()
    oracle = linear_oracle(changes, t_end)
    for t in [rng.randrange(t_end + 1) for _ in range(300)] + [0, t_end]:
        assert tree.query_at(t) == scan(oracle, t)
    stored = sorted((i.start_ns, i.end_ns, i.attr, repr(i.value)) for i in tree.iter_intervals())
    assert stored == sorted((s, e, a, repr(v)) for s, e, a, v in oracle)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from(["/a", "/b/c", "/b/d", "/e"]),
                          st.integers(0, 3)), max_size=120),
       st.integers(1, 5), st.integers(2, 4))
def test_oracle_property(steps, cap, fanout):
    t, changes = 0, []
    for dt, a, v in steps:
        t += dt
        changes.append((t, a, v))
    t_end = t + 2
    tree = build_tree(changes, t_end, node_capacity=cap, fanout=fanout)
    tree.check_invariants()
    oracle = linear_oracle(changes, t_end)
    for probe in range(t_end + 1):
        values, visits = tree.stab(probe)
        assert values == scan(oracle, probe)
        assert visits == tree.depth


def test_state_timeline_is_contiguous():
    from conftest import gateway_chain, http
    from vspan.reconstruct import reconstruct

    evs = gateway_chain() + [http("http_server_response", 2000, "gateway", 48517, status=200)]
    rec = reconstruct(evs)
    hist = rec.sht.query_history("/requests/gateway/0/state")
    assert [i.value for i in hist] == ["S1", "S2", "S3", "S4", "S5", "S6", "CLOSED"]
    for a, b in zip(hist, hist[1:]):
        assert a.end_ns + 1 == b.start_ns
