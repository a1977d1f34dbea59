from __future__ import annotations

import itertools

import numpy as np
import pytest

from conftest import make_parts, small_config
from shardjoin.config import HASH_DISTRIBUTION, Predicate
from shardjoin.model import R_TABLE, build_hash_table, hash_key
from shardjoin.node import Faults, LocalBarrier, NodeFailure, categorize, ring_peers, shuffle_schedule
from shardjoin.oracle import oracle_join, same_multiset
from shardjoin.runtime import CoopRuntime
from shardjoin.sim import SimFailure, run_sim
from shardjoin.wire import WireError


def _oracle(parts, cfg):
    return oracle_join([p[0] for p in parts], [p[1] for p in parts], cfg.predicate, cfg.result_payloads)


def _events(trace, node, verb):
    return [e for e in trace.for_node(node) if e.verb == verb]


def test_shuffle_schedule():
    cfg5 = small_config(5)
    assert [r.dest_node for r in shuffle_schedule(0, cfg5)] == [1, 2, 3, 4]
    assert [r.dest_node for r in shuffle_schedule(4, cfg5)] == [0, 1, 2, 3]
    assert shuffle_schedule(0, small_config(1)) == []
    recs = shuffle_schedule(2, cfg5)
    assert [r.dest_sport for r in recs] == [7103, 7104, 7100, 7101]
    assert [r.dest_is_sink for r in recs] == [False, False, True, False]


def test_ring_peers():
    assert ring_peers(0, 1, 5) == (1, 4)
    assert ring_peers(0, 2, 5) == (2, 3)
    for n in range(2, 9):
        for k in range(1, n):
            for i in range(n):
                receiver, _ = ring_peers(i, k, n)
                assert ring_peers(receiver, k, n)[1] == i
    with pytest.raises(ValueError):
        ring_peers(0, 0, 3)


def test_single_node_is_local_join():
    cfg = small_config(1)
    parts = make_parts(1, 800, seed=1)
    out = run_sim(cfg, parts, seed=0)
    assert same_multiset(out.results, _oracle(parts, cfg))
    assert out.violations == []
    rep = out.nodes[0].report
    assert rep.bytes_sent == 0 and rep.bytes_received == 0
    assert _events(out.trace, 0, "schedule")[0].args["d"] == ""


def test_five_nodes_match_oracle():
    cfg = small_config(5, num_buckets=120)
    parts = make_parts(5, 4000, seed=2, domain=8000)
    out = run_sim(cfg, parts, seed=3)
    assert out.violations == []
    assert same_multiset(out.results, _oracle(parts, cfg))
    # sink total is the sum of every node's local results
    assert len(out.results) == sum(r.report.result_entries for r in out.nodes)
    assert out.sink.remote_counts == {r.node_id: r.report.result_entries for r in out.nodes if r.node_id != 0}


def test_transfer_counts_per_node():
    cfg = small_config(5, n_send=2, n_recv=2)
    out = run_sim(cfg, make_parts(5, 300, seed=4), seed=5)
    assert out.violations == []
    for node in range(5):
        kinds = [e.args["kind"] for e in _events(out.trace, node, "send-done")]
        assert kinds.count("partition") == 4
        assert kinds.count("result") == (0 if node == 0 else 1)
        srcs = sorted(int(e.args["src"]) for e in _events(out.trace, node, "htf") if e.args["src"] != str(node))
        assert srcs == [i for i in range(5) if i != node]  # one frame per remote sender


def test_join_exit_follows_all_joins():
    cfg = small_config(5, n_compute=2, n_recv=1)
    out = run_sim(cfg, make_parts(5, 300, seed=6), seed=7)
    for node in range(5):
        ops = [e.event for e in out.trace.for_node(node) if e.event.startswith("push Qc")]
        je = [i for i, op in enumerate(ops) if op == "push Qc JOIN_EXIT"]
        joins = [i for i, op in enumerate(ops) if op.startswith("push Qc JOIN ")]
        assert len(je) == 2 and max(joins) < min(je)


def test_sink_exit_waits_for_partitions_and_results():
    cfg = small_config(5)
    out = run_sim(cfg, make_parts(5, 300, seed=8), seed=9)
    events = out.trace.for_node(0)
    exit_push = next(i for i, e in enumerate(events) if e.event == "push Qr EXIT")
    received = [e.args["kind"] for e in events[:exit_push] if e.verb == "recv-done"]
    assert received.count("partition") == 4 and received.count("result") == 4
    # non-sinks never see result streams; their Qr EXIT comes after RESULT_READY was sent
    for node in range(1, 5):
        assert not [e for e in _events(out.trace, node, "recv-done") if e.args["kind"] == "result"]


def test_two_senders_both_exit():
    cfg = small_config(3, n_send=2)
    out = run_sim(cfg, make_parts(3, 300, seed=10), seed=11)
    assert out.violations == []
    for node in range(3):
        exits = [e for e in out.trace.for_node(node) if e.event == "pop Qs EXIT"]
        assert len(exits) == 2


def test_hash_distribution_matches_oracle():
    cfg = small_config(4, join_mode=HASH_DISTRIBUTION, num_buckets=40)
    parts = make_parts(4, 1500, seed=12)
    out = run_sim(cfg, parts, seed=13)
    assert out.violations == []
    assert same_multiset(out.results, _oracle(parts, cfg))


@pytest.mark.parametrize("predicate", [Predicate("band", 2), Predicate("less-than")])
def test_other_predicates(predicate):
    cfg = small_config(3, predicate=predicate)
    parts = make_parts(3, 200, seed=14, domain=400)
    out = run_sim(cfg, parts, seed=15)
    assert same_multiset(out.results, _oracle(parts, cfg))


def test_payloads_carried_to_sink():
    cfg = small_config(2, result_payloads=True)
    parts = make_parts(2, 300, seed=16, domain=300)
    out = run_sim(cfg, parts, seed=17)
    assert "r_payload" in out.results.dtype.names
    assert same_multiset(out.results, _oracle(parts, cfg))


def test_real_threads_match_oracle():
    cfg = small_config(3, n_compute=2, n_send=2, n_recv=2)
    parts = make_parts(3, 2000, seed=18)
    out = run_sim(cfg, parts, seed=19, mode="threads")
    assert out.violations == []
    assert same_multiset(out.results, _oracle(parts, cfg))


def test_no_cross_node_barrier_in_trace():
    out = run_sim(small_config(4), make_parts(4, 200, seed=20), seed=21)
    assert not [e for e in out.trace.events if e.verb == "cluster-barrier"]


def test_backpressure_blocks_receiver_and_completes():
    cfg = small_config(3, num_buckets=16)
    parts = make_parts(3, 800, seed=22)
    bucket_bytes = 2 * max(int(c) for p in parts for c in _bucket_sizes(p[0], 16)) * cfg.tuple_size
    cfg = cfg.with_(pool_capacity=bucket_bytes)
    out = run_sim(cfg, parts, seed=23, faults=Faults(slow_compute_s=0.005))
    assert same_multiset(out.results, _oracle(parts, cfg))
    assert all(r.report.recv_blocked_ns > 0 for r in out.nodes)
    assert all(r.report.pool_peak_bytes <= bucket_bytes for r in out.nodes)


def _bucket_sizes(part, nb):
    return build_hash_table(part, nb).bucket_sizes()


def test_bucket_larger_than_pool_is_config_error():
    cfg = small_config(2, pool_capacity=16)
    with pytest.raises(SimFailure) as info:
        run_sim(cfg, make_parts(2, 500, seed=24), seed=25)
    assert any(isinstance(f, NodeFailure) and f.category == "config" for f in info.value.failures.values())


def test_dropped_bucket_breaks_result():
    cfg = small_config(2)
    parts = make_parts(2, 500, seed=26)
    b = _matching_bucket(parts, cfg.num_buckets)
    out = run_sim(cfg, parts, seed=27, faults={0: Faults(drop_bucket=(R_TABLE, b))})
    assert not same_multiset(out.results, _oracle(parts, cfg))


def _matching_bucket(parts, nb):
    """An R bucket of node 0 holding a key that node 1's S also holds."""
    shared = np.intersect1d(parts[0][0].keys, parts[1][1].keys)
    return hash_key(int(shared[0]), nb)


def test_skipped_local_barrier_is_detected():
    out = run_sim(small_config(3), make_parts(3, 300, seed=28), seed=29, faults=Faults(skip_local_barrier=True))
    assert any("local barrier" in v for v in out.violations)


def test_local_barrier():
    rt = CoopRuntime(1)
    order = []

    def party(i):
        order.append(("in", i))
        barrier.wait()
        order.append(("out", i))

    def main():
        hs = [rt.spawn(f"p{i}", party, i) for i in range(3)]
        for h in hs:
            h.join()

    barrier = LocalBarrier(3, rt)
    rt.run(main)
    ins = [i for i, (kind, _) in enumerate(order) if kind == "in"]
    outs = [i for i, (kind, _) in enumerate(order) if kind == "out"]
    assert max(ins) < min(outs)


def test_categorize():
    assert categorize(WireError("x")) == "protocol"
    assert categorize(ConnectionRefusedError()) == "transport"
    assert categorize(NodeFailure(1, "timeout", "late")) == "timeout"
    assert categorize(KeyError("x")) == "internal"


def test_thread_count_grid_small():
    parts = make_parts(3, 200, seed=30)
    for nc, ns, nr in itertools.product((1, 3), (1, 2), (1, 2)):
        cfg = small_config(3, n_compute=nc, n_send=ns, n_recv=nr, queue_capacity=2)
        out = run_sim(cfg, parts, seed=nc * 10 + ns * 3 + nr)
        assert out.violations == []
        assert same_multiset(out.results, _oracle(parts, cfg))
