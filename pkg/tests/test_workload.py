from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st
from scipy import stats

from shardjoin.config import ConfigError, Predicate
from shardjoin.model import R_TABLE, S_TABLE, Partition, make_tuples, result_dtype
from shardjoin.oracle import nested_loop_join
from shardjoin.workload import (
    HEADER_SIZE, GenSpec, PartitionFormatError, generate_cluster, generate_partition, parse_distribution,
    parse_gen_spec, partition_path, read_partition, split_sizes, write_partition,
)

GOLDEN_FILE = bytes.fromhex(
    "534a5054" "01000000" "01000000" "02000000"  # magic, version 1, table S, node 2
    "0200000000000000" "08000000" "6400000000000000"  # 2 tuples, 8-byte tuples, domain 100
    "0700000000000000" "6300000000000000"  # keys 7, 99
)


def test_golden_partition_file(tmp_path):
    part = Partition(S_TABLE, 2, make_tuples([7, 99], 8), 100, 8)
    path = write_partition(tmp_path / "S_2.sjp", part)
    assert path.read_bytes() == GOLDEN_FILE
    back = read_partition(path)
    assert (back.table_id, back.node_id, back.domain) == (S_TABLE, 2, 100)
    assert back.keys.tolist() == [7, 99]


def test_corrupted_magic(tmp_path):
    path = tmp_path / "bad.sjp"
    path.write_bytes(b"XXXX" + GOLDEN_FILE[4:])
    with pytest.raises(PartitionFormatError, match="magic"):
        read_partition(path)
    path.write_bytes(GOLDEN_FILE[:-3])
    with pytest.raises(PartitionFormatError):
        read_partition(path)


def test_reference_scale_file_size(tmp_path):
    part = generate_partition(GenSpec(seed=1), R_TABLE, 0)
    path = write_partition(tmp_path / "R_0.sjp", part)
    assert HEADER_SIZE == 36
    assert path.stat().st_size == 36 + 51_200_000


@st.composite
def partitions(draw):
    tuple_size = draw(st.sampled_from([8, 9, 16, 64]))
    domain = draw(st.integers(1, 2**63))
    keys = draw(st.lists(st.integers(0, domain - 1), max_size=30))
    payloads = [draw(st.binary(min_size=tuple_size - 8, max_size=tuple_size - 8)) for _ in keys]
    return Partition(draw(st.sampled_from([R_TABLE, S_TABLE])), draw(st.integers(0, 1000)),
                     make_tuples(keys, tuple_size, payloads), domain, tuple_size)


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow,
                                                                  HealthCheck.function_scoped_fixture])
@given(partitions())
def test_partition_file_round_trip(tmp_path, part):
    path = write_partition(tmp_path / "p.sjp", part)
    back = read_partition(path)
    assert (back.table_id, back.node_id, back.domain, back.tuple_size) == \
        (part.table_id, part.node_id, part.domain, part.tuple_size)
    assert back.tuples.tobytes() == part.tuples.tobytes()


def test_generation_is_deterministic(tmp_path):
    spec = GenSpec(seed=5, tuples_per_partition=1000, domain=5000, tuple_size=32)
    a = generate_partition(spec, R_TABLE, 3)
    b = generate_partition(spec, R_TABLE, 3)
    assert a.tuples.tobytes() == b.tuples.tobytes()
    assert generate_partition(spec, S_TABLE, 3).tuples.tobytes() != a.tuples.tobytes()
    assert generate_partition(spec, R_TABLE, 4).tuples.tobytes() != a.tuples.tobytes()


@pytest.mark.parametrize("dist", ["uniform", "zipf 1.1", "locality 50 0.8"])
def test_domain_containment(dist):
    spec = GenSpec(seed=1, tuples_per_partition=20_000, domain=3000, **parse_distribution(dist))
    keys = generate_partition(spec, R_TABLE, 0).keys
    assert len(keys) == 20_000
    assert int(keys.max()) < 3000


def test_zipf_zero_is_uniform():
    spec = GenSpec(seed=3, tuples_per_partition=50_000, domain=100, distribution="zipf", theta=0.0)
    keys = generate_partition(spec, R_TABLE, 0).keys
    _, p = stats.chisquare(np.bincount(keys.astype(np.int64), minlength=100))
    assert p > 0.01


def test_zipf_skew_concentrates():
    spec = GenSpec(seed=3, tuples_per_partition=50_000, domain=10_000, distribution="zipf", theta=1.2)
    counts = np.bincount(generate_partition(spec, R_TABLE, 0).keys.astype(np.int64), minlength=10_000)
    assert counts.max() > 20 * counts.mean()
    # hot keys are shared by both relations
    s_counts = np.bincount(generate_partition(spec, S_TABLE, 1).keys.astype(np.int64), minlength=10_000)
    assert int(np.argmax(counts)) == int(np.argmax(s_counts))


def test_locality_runs():
    spec = GenSpec(seed=3, tuples_per_partition=10_000, domain=1_000_000, distribution="locality",
                   block_size=100, p_stay=0.95)
    blocks = generate_partition(spec, R_TABLE, 0).keys // 100
    changes = int(np.count_nonzero(np.diff(blocks.astype(np.int64))))
    assert changes < 0.1 * len(blocks)


def test_uniform_join_cardinality():
    # expected matches per R tuple against one S partition is |S_i| / D
    spec = GenSpec(seed=9, tuples_per_partition=20_000, domain=40_000, tuple_size=8)
    (r, s), = generate_cluster(spec, spec, 1)
    n = len(nested_loop_join(r.tuples, s.tuples, Predicate(), 0, result_dtype(8)))
    assert abs(n / len(r) - 0.5) < 0.05
    r_keys, s_keys = np.unique(r.keys), np.unique(s.keys)
    assert len(np.intersect1d(r_keys, s_keys)) > 0


def test_parse_gen_spec():
    nodes, r, s = parse_gen_spec("""
        nodes = 3
        seed = 4
        tuples_per_partition = 100
        S.distribution = zipf 0.8
        R.domain = 500
    """)
    assert nodes == 3
    assert r.domain == 500 and s.domain == 800_000
    assert s.distribution == "zipf" and s.theta == 0.8 and r.distribution == "uniform"
    for bad in ("colour = red", "distribution = zipf", "nodes = 0", "seed = x"):
        with pytest.raises(ConfigError):
            parse_gen_spec(bad)


def test_split_sizes():
    assert split_sizes(1_600_000, 1) == [1_600_000]
    assert split_sizes(1_600_000, 2) == [800_000, 800_000]
    assert split_sizes(1_600_000, 5) == [320_000] * 5
    assert split_sizes(10, 3) == [4, 3, 3]


def test_partition_path():
    assert partition_path("d", R_TABLE, 3).name == "R_3.sjp"
    assert partition_path("d", S_TABLE, 0).name == "S_0.sjp"
