from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from shardjoin.config import BROADCAST, HASH_DISTRIBUTION
from shardjoin.model import R_TABLE, S_TABLE, HashTable, Partition, build_hash_table, make_tuples, result_dtype
from shardjoin.wire import (
    ACK, FRAME_HEADER_SIZE, KIND_PARTITION, KIND_RESULT, NO_TABLE, PARTITION_PREAMBLE_SIZE, RESULT_PREAMBLE_SIZE,
    BufferConnection, Section, StreamPreamble, WireError, decode_partition_stream, decode_preamble,
    decode_result_stream, encode_partition_stream, encode_result_stream, recv_partition_section, select_content,
    send_partition_stream,
)

# hand-assembled fixtures; each line is one field, little-endian
GOLDEN_PARTITION = bytes.fromhex(
    "534a5731" "01"                      # magic, kind = partition
    "02000000" "00000000" "04000000" "10000000"  # sender 2, table R, 4 buckets, 16-byte tuples
    "03000000" "03000000"                # bucket 3, 3 tuples
    "0100000000000000" "4141414141414141"
    "0200000000000000" "4242424242424242"
    "0300000000000000" "4343434343434343"
    "ffffffff" "00000000"                # terminator
)
GOLDEN_RESULT = bytes.fromhex(
    "534a5731" "02"                      # magic, kind = result
    "01000000" "ffffffff" "14000000"     # sender 1, no table, 20-byte entries
    "01000000"                           # one block
    "02000000"                           # two entries
    "0500000000000000" "0500000000000000" "03000000"
    "0700000000000000" "0800000000000000" "00000000"
)


def _golden_table() -> HashTable:
    tuples = make_tuples([1, 2, 3], 16, [b"A" * 8, b"B" * 8, b"C" * 8])
    return HashTable(R_TABLE, 4, tuples, np.array([0, 0, 0, 0, 3]))


def test_golden_partition_stream():
    data = encode_partition_stream([Section(R_TABLE, _golden_table(), range(4))], sender_node=2)
    assert data == GOLDEN_PARTITION
    ((pre, buckets),) = decode_partition_stream(GOLDEN_PARTITION)
    assert pre == StreamPreamble(KIND_PARTITION, 2, R_TABLE, 4, 16)
    assert list(buckets) == [3]
    assert buckets[3].tobytes() == _golden_table().tuples.tobytes()


def test_golden_result_stream():
    dt = result_dtype(16)
    block = np.zeros(2, dtype=dt)
    block["r_key"], block["s_key"], block["source_node"] = [5, 7], [5, 8], [3, 0]
    assert encode_result_stream([block], sender_node=1, entry_size=dt.itemsize) == GOLDEN_RESULT
    pre, blocks = decode_result_stream(GOLDEN_RESULT, dt)
    assert pre.kind == KIND_RESULT and pre.sender_node == 1 and pre.table_id == NO_TABLE
    assert blocks[0].tobytes() == block.tobytes()


def test_sizes():
    assert PARTITION_PREAMBLE_SIZE == 21
    assert RESULT_PREAMBLE_SIZE == 17
    assert FRAME_HEADER_SIZE == 8


def test_empty_table_is_preamble_plus_terminator():
    table = HashTable(R_TABLE, 8, make_tuples([], 16), np.zeros(9, dtype=np.int64))
    data = encode_partition_stream([Section(R_TABLE, table, range(8))], 0)
    assert len(data) == PARTITION_PREAMBLE_SIZE + FRAME_HEADER_SIZE
    assert data.endswith(bytes.fromhex("ffffffff00000000"))


def test_empty_result_stream():
    dt = result_dtype(16)
    data = encode_result_stream([], 4, dt.itemsize)
    assert len(data) == RESULT_PREAMBLE_SIZE + 4
    assert decode_result_stream(data, dt)[1] == []


def test_reference_scale_payload_arithmetic():
    keys = np.random.default_rng(0).integers(0, 800_000, 400_000)
    part = Partition(R_TABLE, 0, make_tuples(keys, 128), 800_000, 128)
    table = build_hash_table(part, 1200)
    conn = BufferConnection(ACK)
    stats = send_partition_stream(conn, select_content(BROADCAST, 1, table, table, 2), 0)
    nonempty = int(np.count_nonzero(table.bucket_sizes()))
    assert stats.payload_bytes == 51_200_000
    assert stats.frame_bytes == PARTITION_PREAMBLE_SIZE + FRAME_HEADER_SIZE * (nonempty + 1)
    assert len(conn.out) == stats.total


@pytest.mark.parametrize("data, message", [
    (b"XXXX\x01" + bytes(16), "magic"),
    (b"SJW1\x09" + bytes(16), "kind"),
])
def test_bad_preamble(data, message):
    with pytest.raises(WireError, match=message):
        decode_preamble(data)


def _section_stream(frames: bytes) -> BufferConnection:
    return BufferConnection(frames)


def test_recv_rejects_bad_frames():
    pre = StreamPreamble(KIND_PARTITION, 0, R_TABLE, 4, 8)
    key = (1).to_bytes(8, "little")
    cases = {
        "out of order": bytes.fromhex("0200000001000000") + key + bytes.fromhex("0100000001000000") + key,
        ">=": bytes.fromhex("0400000001000000") + key,
        "empty frame": bytes.fromhex("0100000000000000"),
        "non-zero": bytes.fromhex("ffffffff01000000"),
        "truncated": bytes.fromhex("0100000002000000") + key,
    }
    for message, frames in cases.items():
        with pytest.raises(WireError, match=message):
            recv_partition_section(_section_stream(frames), pre, lambda *a: None)


def test_select_content():
    keys = np.arange(1000)
    r = build_hash_table(Partition(R_TABLE, 0, make_tuples(keys, 8), 1000, 8), 10)
    s = build_hash_table(Partition(S_TABLE, 0, make_tuples(keys, 8), 1000, 8), 10)
    (only,) = select_content(BROADCAST, 3, r, s, 5)
    assert only.table_id == R_TABLE and list(only.buckets) == list(range(10))
    hashed = select_content(HASH_DISTRIBUTION, 2, r, s, 5)
    assert [sec.table_id for sec in hashed] == [R_TABLE, S_TABLE]
    assert list(hashed[0].buckets) == [2, 7]
    covered = sorted(b for recv in range(5) for b in select_content(HASH_DISTRIBUTION, recv, r, s, 5)[0].buckets)
    assert covered == list(range(10))


@st.composite
def tables(draw):
    tuple_size = draw(st.sampled_from([8, 12, 16, 40]))
    nb = draw(st.integers(1, 16))
    keys = draw(st.lists(st.integers(0, 2**64 - 1), max_size=40))
    payloads = [draw(st.binary(min_size=tuple_size - 8, max_size=tuple_size - 8)) for _ in keys]
    tuples = make_tuples(keys, tuple_size, payloads)
    part = Partition(draw(st.sampled_from([R_TABLE, S_TABLE])), 0, tuples, 2**64, tuple_size)
    return build_hash_table(part, nb)


@settings(max_examples=1000, suppress_health_check=[HealthCheck.too_slow], deadline=None)
@given(tables(), st.integers(0, 2**32 - 2))
def test_partition_stream_round_trip(table, sender):
    data = encode_partition_stream([Section(table.table_id, table, range(table.num_buckets))], sender)
    ((pre, buckets),) = decode_partition_stream(data)
    assert (pre.sender_node, pre.table_id, pre.num_buckets) == (sender, table.table_id, table.num_buckets)
    expected = {b: table.bucket(b) for b in range(table.num_buckets) if len(table.bucket(b))}
    assert sorted(buckets) == sorted(expected)
    for b, tuples in buckets.items():
        assert tuples.tobytes() == expected[b].tobytes()


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.lists(st.tuples(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1),
                                   st.integers(0, 2**32 - 1)), max_size=20), max_size=6),
       st.integers(0, 1000))
def test_result_stream_round_trip(blocks, sender):
    dt = result_dtype(16)
    arrays = [np.array(b, dtype=dt) for b in blocks]
    pre, out = decode_result_stream(encode_result_stream(arrays, sender, dt.itemsize), dt)
    assert pre.sender_node == sender
    assert [a.tobytes() for a in out] == [a.tobytes() for a in arrays]


@settings(max_examples=1000, deadline=None)
@given(st.sampled_from([KIND_PARTITION, KIND_RESULT]), st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
       st.integers(0, 2**32 - 1), st.integers(8, 2**32 - 1))
def test_preamble_round_trip(kind, sender, table, nb, size):
    if kind == KIND_PARTITION:
        pre = StreamPreamble(kind, sender, table, nb, size)
    else:
        pre = StreamPreamble(kind, sender, table, entry_size=size)
    data = pre.encode()
    assert len(data) == (PARTITION_PREAMBLE_SIZE if kind == KIND_PARTITION else RESULT_PREAMBLE_SIZE)
    assert decode_preamble(data) == pre
