from __future__ import annotations

from fractions import Fraction

import pytest

from conftest import make_parts, small_config
from shardjoin.harness import PointOutcome, summarize
from shardjoin.metrics import (
    ClusterMetrics, LoadReport, expected_send_volume, intra_node_gain, read_reports_csv, speedup,
    write_reports_csv,
)
from shardjoin.sim import run_sim


def test_gain_perfect_overlap():
    rep = LoadReport(0, compute_time_ns=10, send_time_ns=10, recv_time_ns=10, join_span_ns=10)
    assert intra_node_gain(rep) == 3.0


def test_gain_undefined_for_zero_span():
    with pytest.raises(ValueError):
        intra_node_gain(LoadReport(0, compute_time_ns=5))


def test_serial_run_gain_is_one():
    cfg = small_config(1, n_compute=1, num_buckets=256, partition_size_R=60_000, partition_size_S=60_000)
    parts = make_parts(1, 60_000, seed=1, domain=120_000)
    rep = run_sim(cfg, parts, seed=0, mode="threads").nodes[0].report
    assert rep.bytes_sent == 0 and rep.bytes_received == 0
    assert abs(rep.gain - 1.0) <= 0.05


def test_speedup():
    assert speedup(7, 7) == 1.0
    assert speedup(10.0, 2.0) == 5.0
    with pytest.raises(ValueError):
        speedup(0, 1)


def test_expected_send_volume():
    assert expected_send_volume(1_600_000, 2) == 800_000
    assert expected_send_volume(1_600_000, 1) == 0
    assert expected_send_volume(50_000, 3) == Fraction(100_000, 3)
    vols = [expected_send_volume(50_000, n) for n in range(1, 8)]
    assert all(a < b for a, b in zip(vols, vols[1:]))


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_measured_payload_matches_formula(n):
    total = 6000
    cfg = small_config(n, tuple_size=24)
    sizes = [total // n + (i < total % n) for i in range(n)]
    from shardjoin.model import R_TABLE, S_TABLE
    from shardjoin.workload import GenSpec, generate_partition
    spec = GenSpec(seed=n, domain=10_000, tuple_size=24)
    parts = [(generate_partition(spec.with_(tuples_per_partition=sizes[i]), R_TABLE, i),
              generate_partition(spec.with_(tuples_per_partition=sizes[i]), S_TABLE, i)) for i in range(n)]
    out = run_sim(cfg, parts, seed=n)
    payload = [r.report.payload_bytes_sent for r in out.nodes]
    assert payload == [sizes[i] * (n - 1) * 24 for i in range(n)]
    assert Fraction(sum(payload), n) == expected_send_volume(total, n) * 24
    for r in out.nodes:
        assert r.report.bytes_sent == r.report.payload_bytes_sent + r.report.frame_bytes_sent + \
            r.report.result_bytes_sent + _result_framing(r, n)


def _result_framing(result, n):
    # result stream header bytes for non-sinks: preamble + block count + one count per block
    return result.report.bytes_sent - result.report.payload_bytes_sent - result.report.frame_bytes_sent - \
        result.report.result_bytes_sent


def test_compute_load_falls_with_nodes():
    loads = []
    for n in (1, 2, 4):
        size = 8000 // n
        cfg = small_config(n, num_buckets=64)
        out = run_sim(cfg, make_parts(n, size, seed=2, domain=16_000), seed=1)
        loads.append(max(r.report.payload_bytes_sent for r in out.nodes))
    # shipped payload per node grows with n while each partition shrinks
    assert loads[0] == 0 and loads[1] < loads[2] * 2


def test_csv_round_trip(tmp_path):
    reps = [LoadReport(0, 5, 6, 7, 10, cluster_span_ns=12), LoadReport(1, 1, 2, 3, 4)]
    path = tmp_path / "r.csv"
    write_reports_csv(path, reps)
    back, span = read_reports_csv(path)
    assert back == reps and span == 12
    assert ClusterMetrics(back).span_ns == 12


def test_cluster_span_falls_back_to_slowest_node():
    cm = ClusterMetrics([LoadReport(0, join_span_ns=5), LoadReport(1, join_span_ns=9)])
    assert cm.span_ns == 9 and cm.report(1).join_span_ns == 9


def test_summary_rows():
    ok1 = PointOutcome(1, 0, [LoadReport(0, 40, 0, 0, 40, cluster_span_ns=40)], 40)
    ok2 = PointOutcome(2, 0, [LoadReport(0, 10, 5, 5, 10, cluster_span_ns=20), LoadReport(1, 10, 5, 5, 10)], 20)
    bad = PointOutcome(4, 0, error="boom")
    rows = summarize([ok1, ok2, bad], reference=1)
    cluster = {r["sweep_value"]: r for r in rows if r["node"] == "cluster"}
    assert cluster[2]["speedup"] == "2.0000"
    assert cluster[1]["speedup"] == "1.0000"
    assert [r["node"] for r in rows if r["sweep_value"] == 4] == ["FAILED"]
    node_rows = [r for r in rows if r["sweep_value"] == 2 and r["node"] not in ("cluster",)]
    assert [r["gain"] for r in node_rows] == ["2.0000", "2.0000"]
