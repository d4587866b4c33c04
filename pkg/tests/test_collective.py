import itertools
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bnnkit import collective as C


def run_ring(buffers, op="sum", transport="channel"):
    """ring_allreduce on every rank concurrently; returns the per-rank buffers."""
    W = len(buffers)
    if transport == "channel":
        world = C.channel_world(W, recv_timeout=30)
    else:
        world = [C.TcpTransport(0, W, recv_timeout=30)]
        world += [C.TcpTransport(r, W, world[0].address, recv_timeout=30) for r in range(1, W)]
        ts = [threading.Thread(target=t.connect) for t in world]
        [t.start() for t in ts]
        [t.join() for t in ts]
    out = [np.array(b, copy=True) for b in buffers]
    errors = []

    def body(r):
        try:
            C.ring_allreduce(world[r], out[r], op)
        except Exception as exc:
            errors.append(exc)

    ts = [threading.Thread(target=body, args=(r,)) for r in range(W)]
    [t.start() for t in ts]
    [t.join() for t in ts]
    for t in world:
        t.close()
    if errors:
        raise errors[0]
    return out


def test_ring_hand_sum_and_identity():
    out = run_ring([np.array([1.0]), np.array([2.0]), np.array([3.0])])
    assert [o.tolist() for o in out] == [[6.0]] * 3
    single = run_ring([np.array([4.0, 5.0])], op="average")
    assert single[0].tolist() == [4.0, 5.0]


@pytest.mark.parametrize("W", [1, 2, 3, 4, 8])
@pytest.mark.parametrize("op", ["sum", "average"])
def test_ring_matches_sequential_sum(W, op):
    r = np.random.default_rng(W)
    n = 100_000 if W == 4 else 1003
    bufs = [r.normal(size=n).astype(np.float32) for _ in range(W)]
    seq = np.zeros(n, np.float64)
    for b in bufs:
        seq += b
    if op == "average":
        seq /= W
    out = run_ring(bufs, op)
    ref = C.ring_allreduce_local(bufs, op)
    for o, rl in zip(out, ref):
        np.testing.assert_allclose(o, seq, rtol=1e-5, atol=1e-5)
        assert o.tobytes() == out[0].tobytes() == rl.tobytes()


def test_ring_over_tcp_is_bitwise_equal_to_reference():
    r = np.random.default_rng(0)
    bufs = [r.normal(size=257).astype(np.float32) for _ in range(3)]
    out = run_ring(bufs, "average", transport="tcp")
    assert all(o.tobytes() == x.tobytes() for o, x in zip(out, C.ring_allreduce_local(bufs, "average")))


@settings(max_examples=20)
@given(st.integers(1, 6), st.integers(0, 40), st.integers(0, 2 ** 16))
def test_ring_reference_property(W, n, seed):
    r = np.random.default_rng(seed)
    bufs = [r.normal(size=n) for _ in range(W)]
    out = C.ring_allreduce_local(bufs, "sum")
    for o in out:
        np.testing.assert_allclose(o, np.sum(bufs, axis=0), rtol=1e-12, atol=1e-12)


def test_ring_length_mismatch():
    with pytest.raises(C.ProtocolError):
        C.ring_allreduce_local([np.zeros(3), np.zeros(4)])


def test_peer_disconnect_names_rank():
    a = C.TcpTransport(0, 2, recv_timeout=10)
    b = C.TcpTransport(1, 2, a.address, recv_timeout=10)
    t = threading.Thread(target=b.connect)
    t.start()
    a.connect()
    t.join()
    b.close()
    with pytest.raises(C.TransportError) as info:
        a.recv(1, C.DATA_CHUNK)
    assert info.value.rank == 1
    a.close()


def test_frame_layout():
    import socket
    s1, s2 = socket.socketpair()
    C._send_frame(s1, C.SCHEDULE, b"xyz")
    assert s2.recv(8) == b"\x03\x00\x00\x00\x02xyz"
    s1.close(), s2.close()


# -- negotiation -------------------------------------------------------------

def test_single_rank_keeps_submission_order():
    order, stalls = C.negotiate_order([["z", "a", "m"]])
    assert order == ["z", "a", "m"] and not stalls


@given(st.permutations("abcdef"), st.permutations("abcdef"), st.permutations("abcdef"), st.integers(1, 3))
def test_negotiated_order_only_schedules_complete_names(p0, p1, p2, per_tick):
    orders = [list(p0), list(p1), list(p2)]
    sched, stalls = C.negotiate_order(orders, per_tick)
    assert sorted(sched) == list("abcdef") and not stalls
    # a name is scheduled no earlier than the tick in which its last rank submitted it
    last = {n: max(o.index(n) // per_tick for o in orders) for n in "abcdef"}
    assert [last[n] for n in sched] == sorted(last[n] for n in sched)


def test_negotiation_stall_names_missing_rank():
    sched, stalls = C.negotiate_order([["a", "b", "c"], ["a", "c"], ["c", "a", "b"]], timeout_ticks=5)
    assert "b" not in sched and stalls == {"b": {1}}
    assert str(C.StallError(stalls)) == "collective stall: {b: missing rank 1}"


def test_response_cache_is_stable():
    c = C.ResponseCache()
    assert [c.assign(n) for n in "xyx"] == [0, 1, 0]
    assert c.name(1) == "y" and c.items() == [("x", 0), ("y", 1)]
    assert C.decode_bitmap(C.encode_bitmap([0, 3, 9], 12), 12) == {0, 3, 9}


# -- fusion ------------------------------------------------------------------

def req(name, mb):
    return C.CollectiveRequest(name, int(mb * C.MB) // 4, "<f4")


def test_fusion_examples():
    groups = C.fuse([req("a", 30), req("b", 30), req("c", 30)], 64 * C.MB)
    assert [[m.name for m in g.members] for g in groups] == [["a", "b"], ["c"]]
    assert all(g.total_bytes <= g.capacity for g in groups)
    assert len(C.fuse([req(n, 30) for n in "abcde"], float("inf"))) == 1
    with pytest.raises(C.ConfigError):
        C.fuse([req("big", 65)], 64 * C.MB)


def test_fusion_splits_on_dtype():
    a = C.CollectiveRequest("a", 4, "<f4")
    b = C.CollectiveRequest("b", 4, "<f8")
    assert len(C.fuse([a, b], 1 << 20)) == 2


# -- engine ------------------------------------------------------------------

FAST = C.CommConfig(cycle_ms=1, timeout_ms=20_000)


def test_engine_permutations_execute_in_one_order():
    perms = list(itertools.permutations("abc"))
    for shift in range(len(perms)):
        def fn(eng):
            order = perms[(eng.rank + shift) % len(perms)]
            eng.allreduce_many({n: np.full(3, eng.rank + 1.0, np.float32) for n in order}, "sum", list(order))
            return eng.execution_log
        logs = C.run_ranks(3, fn, config=FAST)
        assert logs[0] == logs[1] == logs[2] and sorted(logs[0]) == ["a", "b", "c"]


def test_engine_allreduce_and_broadcast():
    def fn(eng):
        avg = eng.allreduce("x", np.full(5, float(eng.rank), np.float32))
        bc = eng.broadcast("init", np.full(2, 10.0 + eng.rank), root=2)
        eng.barrier()
        return avg, bc
    for r, (avg, bc) in enumerate(C.run_ranks(4, fn, config=FAST)):
        assert avg.tolist() == [1.5] * 5
        assert bc.tolist() == [12.0, 12.0]


def test_engine_stall_reports_missing_rank():
    cfg = C.CommConfig(cycle_ms=1, timeout_ms=200)

    def fn(eng):
        eng.allreduce("a", np.ones(2, np.float32))
        if eng.rank == 1:
            return eng.execution_log, None
        try:
            eng.allreduce("b", np.ones(2, np.float32))
        except C.StallError as exc:
            return eng.execution_log, exc
    (log0, err), (log1, _) = C.run_ranks(2, fn, config=cfg)
    assert err.missing == {"b": [1]}
    assert "b" not in log0 and "b" not in log1


def test_engine_signature_mismatch_is_protocol_error():
    def fn(eng):
        return eng.allreduce("t", np.zeros(2 + eng.rank, np.float32))
    with pytest.raises(C.ProtocolError):
        C.run_ranks(2, fn, config=FAST)


@pytest.mark.parametrize("transport", ["channel", "tcp"])
def test_fusion_and_cycle_invariance(transport):
    r = np.random.default_rng(3)
    sizes = r.integers(1, 700, 12)
    data = [{f"t{i}": r.normal(size=n).astype(np.float32) for i, n in enumerate(sizes)} for _ in range(3)]

    def run(cfg):
        return C.run_ranks(3, lambda eng: eng.allreduce_many(data[eng.rank], "average"), transport, cfg)
    small = run(C.CommConfig(cycle_ms=1, fusion_mb=4096 / C.MB))
    large = run(C.CommConfig(cycle_ms=20, fusion_mb=1e6))
    for name in data[0]:
        ref = np.mean([d[name] for d in data], axis=0)
        for rank in range(3):
            np.testing.assert_allclose(small[rank][name], large[rank][name], rtol=1e-6, atol=1e-7)
            np.testing.assert_allclose(large[rank][name], ref, rtol=1e-5, atol=1e-6)


def test_cache_indices_never_change():
    def fn(eng):
        snaps = []
        for step in range(3):
            names = ["w", "b", f"extra{step}"]
            eng.allreduce_many({n: np.ones(4, np.float32) for n in names}, order=names)
            snaps.append(dict(eng.cache.items()))
        return snaps
    for snaps in C.run_ranks(2, fn, config=FAST):
        for early, late in zip(snaps, snaps[1:]):
            assert all(late[k] == v for k, v in early.items())


def test_stats_counts_and_reset(tmp_path):
    def fn(eng):
        for i in range(10):
            eng.allreduce(f"g{i}", np.zeros(1024, np.float32))
        return eng.stats.table()
    table = C.run_ranks(2, fn, config=FAST)[0]
    assert table["allreduce"]["count"] == 10 and table["allreduce"]["avg_bytes"] == 4096
    s = C.CommStats()
    s.record("allreduce", 4096, 0.5)
    s.write_csv(tmp_path / "c.csv", rank=0)
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "rank,op,count,avg_bytes,cumulative_seconds"
    s.reset()
    assert all(row["count"] == 0 and row["cumulative_seconds"] == 0 for row in s.table().values())


def test_gather_stats_over_tcp():
    world = [C.TcpTransport(0, 2, recv_timeout=30)]
    world.append(C.TcpTransport(1, 2, world[0].address, recv_timeout=30))
    ts = [threading.Thread(target=t.connect) for t in world]
    [t.start() for t in ts]
    [t.join() for t in ts]
    engines = [C.CommEngine(t, FAST).start() for t in world]
    out = [None, None]

    def body(r):
        engines[r].allreduce("x", np.ones(8, np.float32))
        engines[r].stop()
        out[r] = engines[r].gather_stats()
    ts = [threading.Thread(target=body, args=(r,)) for r in range(2)]
    [t.start() for t in ts]
    [t.join() for t in ts]
    [t.close() for t in world]
    assert out[1] is None
    assert {r: out[0][r]["allreduce"]["count"] for r in (0, 1)} == {0: 1, 1: 1}
