"""On-wire framing for partition and result streams.

All integers are fixed-width little-endian.

Preamble (every stream, and every section of a partition stream)::

    magic "SJW1" | kind u8
    kind 1 (PARTITION_READY): sender_node u32 | table_id u32 | num_buckets u32 | tuple_size u32
    kind 2 (RESULT_READY):    sender_node u32 | table_id u32 (0xFFFFFFFF) | entry_size u32

Partition section body: one frame per non-empty bucket,
``bucket_index u32 | tuple_count u32 | tuple_count * tuple_size bytes``,
ended by the terminator frame ``0xFFFFFFFF | 0``. Broadcast transfers carry
one section (R); hash-distribution transfers carry two (R then S).

Result body: ``block_count u32`` then per block ``entry_count u32 | entries``.

After the last byte the receiver answers with a single ACK byte (0x06) and the
sender closes the connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import BROADCAST
from .model import HashTable, R_TABLE, S_TABLE, assign_buckets, tuple_dtype

MAGIC = b"SJW1"
KIND_PARTITION = 1
KIND_RESULT = 2
TERMINATOR = 0xFFFFFFFF
NO_TABLE = 0xFFFFFFFF
ACK = b"\x06"

_HEAD = struct.Struct("<4sB")
_PART_META = struct.Struct("<IIII")
_RES_META = struct.Struct("<III")
_FRAME = struct.Struct("<II")
_COUNT = struct.Struct("<I")

PARTITION_PREAMBLE_SIZE = _HEAD.size + _PART_META.size
RESULT_PREAMBLE_SIZE = _HEAD.size + _RES_META.size
FRAME_HEADER_SIZE = _FRAME.size


class WireError(ValueError):
    """Malformed stream: bad magic, unknown kind, or inconsistent frame."""


@dataclass(frozen=True)
class StreamPreamble:
    kind: int
    sender_node: int
    table_id: int = NO_TABLE
    num_buckets: int = 0
    tuple_size: int = 0
    entry_size: int = 0

    def encode(self) -> bytes:
        if self.kind == KIND_PARTITION:
            return _HEAD.pack(MAGIC, self.kind) + _PART_META.pack(
                self.sender_node, self.table_id, self.num_buckets, self.tuple_size)
        if self.kind == KIND_RESULT:
            return _HEAD.pack(MAGIC, self.kind) + _RES_META.pack(self.sender_node, self.table_id, self.entry_size)
        raise WireError(f"unknown stream kind {self.kind}")


def encode_preamble(preamble: StreamPreamble) -> bytes:
    return preamble.encode()


def _decode_rest(kind: int, rest: bytes) -> StreamPreamble:
    if kind == KIND_PARTITION:
        sender, table, nb, tsize = _PART_META.unpack(rest)
        if tsize < 8:
            raise WireError(f"tuple size {tsize} too small")
        return StreamPreamble(kind, sender, table, nb, tsize)
    sender, table, esize = _RES_META.unpack(rest)
    return StreamPreamble(kind, sender, table, entry_size=esize)


def check_head(head: bytes) -> int:
    magic, kind = _HEAD.unpack(head)
    if magic != MAGIC:
        raise WireError(f"bad stream magic {magic!r}")
    if kind not in (KIND_PARTITION, KIND_RESULT):
        raise WireError(f"unknown stream kind {kind}")
    return kind


def decode_preamble(data: bytes) -> StreamPreamble:
    kind = check_head(data[:_HEAD.size])
    size = PARTITION_PREAMBLE_SIZE if kind == KIND_PARTITION else RESULT_PREAMBLE_SIZE
    if len(data) < size:
        raise WireError("truncated preamble")
    return _decode_rest(kind, data[_HEAD.size:size])


def read_preamble(conn, n_nodes: int | None = None) -> StreamPreamble:
    kind = check_head(conn.read_exact(_HEAD.size))
    return read_preamble_rest(conn, kind, n_nodes)


def read_preamble_rest(conn, kind: int, n_nodes: int | None = None) -> StreamPreamble:
    """Finish a preamble whose magic and kind byte were already consumed."""
    rest = conn.read_exact(_PART_META.size if kind == KIND_PARTITION else _RES_META.size)
    pre = _decode_rest(kind, rest)
    if n_nodes is not None and pre.sender_node >= n_nodes:
        raise WireError(f"sender {pre.sender_node} outside cluster of {n_nodes}")
    return pre


def encode_bucket_frame(bucket_index: int, tuples: np.ndarray) -> bytes:
    return _FRAME.pack(bucket_index, len(tuples)) + tuples.tobytes()


TERMINATOR_FRAME = _FRAME.pack(TERMINATOR, 0)


@dataclass
class Section:
    table_id: int
    table: HashTable
    buckets: Sequence[int]


@dataclass
class StreamStats:
    payload_bytes: int = 0
    frame_bytes: int = 0
    buckets: int = 0

    @property
    def total(self) -> int:
        return self.payload_bytes + self.frame_bytes


def select_content(join_mode: str, receiver: int, r_table: HashTable, s_table: HashTable,
                   n_nodes: int) -> list[Section]:
    """What a node ships to ``receiver`` for one PARTITION_READY transfer."""
    if join_mode == BROADCAST:
        return [Section(R_TABLE, r_table, range(r_table.num_buckets))]
    mine = assign_buckets(receiver, n_nodes, r_table.num_buckets)
    return [Section(R_TABLE, r_table, mine), Section(S_TABLE, s_table, mine)]


def send_partition_stream(conn, sections: Iterable[Section], sender_node: int,
                          skip: Callable[[int, int], bool] | None = None,
                          after_frame: Callable[[], None] | None = None) -> StreamStats:
    """Stream ``sections`` then wait for the receiver's ACK.

    ``skip(table_id, bucket)`` drops a bucket (fault injection only).
    """
    stats = StreamStats()
    for section in sections:
        table = section.table
        tuple_size = table.tuples.dtype.itemsize
        pre = StreamPreamble(KIND_PARTITION, sender_node, section.table_id, table.num_buckets, tuple_size)
        conn.sendall(pre.encode())
        stats.frame_bytes += PARTITION_PREAMBLE_SIZE
        sizes = table.bucket_sizes()
        for b in section.buckets:
            if not sizes[b] or (skip is not None and skip(section.table_id, b)):
                continue
            bucket = table.bucket(b)
            conn.sendall(_FRAME.pack(b, len(bucket)) + bucket.tobytes())
            stats.frame_bytes += FRAME_HEADER_SIZE
            stats.payload_bytes += bucket.nbytes
            stats.buckets += 1
            if after_frame is not None:
                after_frame()
        conn.sendall(TERMINATOR_FRAME)
        stats.frame_bytes += FRAME_HEADER_SIZE
    expect_ack(conn)
    return stats


def recv_partition_section(conn, preamble: StreamPreamble,
                           deliver: Callable[[int, np.ndarray, int], None],
                           allocate: Callable[[int], None] | None = None,
                           release: Callable[[int], None] | None = None) -> int:
    """Read frames up to the terminator; returns the number of buckets read.

    For every frame ``allocate(nbytes)`` runs before the payload is read, so a
    blocked allocation leaves the bytes unread and pushes back on the sender;
    then ``deliver(bucket, tuples, nbytes)`` takes ownership.
    """
    dtype = tuple_dtype(preamble.tuple_size)
    count = 0
    last = -1
    while True:
        b, n = _FRAME.unpack(conn.read_exact(FRAME_HEADER_SIZE))
        if b == TERMINATOR:
            if n != 0:
                raise WireError("terminator frame with non-zero count")
            return count
        if b >= preamble.num_buckets:
            raise WireError(f"bucket index {b} >= {preamble.num_buckets}")
        if b <= last:
            raise WireError(f"bucket {b} out of order after {last}")
        if n == 0:
            raise WireError(f"empty frame for bucket {b}")
        last = b
        nbytes = n * preamble.tuple_size
        if allocate is not None:
            allocate(nbytes)
        try:
            tuples = np.empty(n, dtype=dtype)
            conn.readinto_exact(memoryview(tuples.view(np.uint8)))
        except BaseException:
            if release is not None:
                release(nbytes)
            raise
        deliver(b, tuples, nbytes)
        count += 1


def send_ack(conn) -> None:
    conn.sendall(ACK)


def expect_ack(conn) -> None:
    if conn.read_exact(1) != ACK:
        raise WireError("bad acknowledgment byte")


def send_result_stream(conn, blocks: Sequence[np.ndarray], sender_node: int, entry_size: int) -> StreamStats:
    stats = StreamStats()
    pre = StreamPreamble(KIND_RESULT, sender_node, NO_TABLE, entry_size=entry_size)
    conn.sendall(pre.encode() + _COUNT.pack(len(blocks)))
    stats.frame_bytes += RESULT_PREAMBLE_SIZE + _COUNT.size
    for entries in blocks:
        if entries.dtype.itemsize != entry_size:
            raise WireError("result block entry size mismatch")
        conn.sendall(_COUNT.pack(len(entries)) + entries.tobytes())
        stats.frame_bytes += _COUNT.size
        stats.payload_bytes += entries.nbytes
        stats.buckets += 1
    expect_ack(conn)
    return stats


def recv_result_stream(conn, preamble: StreamPreamble, dtype: np.dtype) -> list[np.ndarray]:
    if preamble.kind != KIND_RESULT:
        raise WireError("not a result stream")
    if preamble.entry_size != dtype.itemsize:
        raise WireError(f"entry size {preamble.entry_size} != expected {dtype.itemsize}")
    (block_count,) = _COUNT.unpack(conn.read_exact(_COUNT.size))
    blocks = []
    for _ in range(block_count):
        (n,) = _COUNT.unpack(conn.read_exact(_COUNT.size))
        entries = np.empty(n, dtype=dtype)
        if n:
            conn.readinto_exact(memoryview(entries.view(np.uint8)))
        blocks.append(entries)
    send_ack(conn)
    return blocks


class BufferConnection:
    """Connection over in-memory bytes; used by codec tests and tools."""

    def __init__(self, incoming: bytes = b""):
        self._in = memoryview(bytes(incoming))
        self._pos = 0
        self.out = bytearray()
        self.bytes_sent = 0
        self.bytes_received = 0
        self.closed = False

    def sendall(self, data) -> None:
        self.out += data
        self.bytes_sent += memoryview(data).nbytes

    def readinto(self, view: memoryview) -> int:
        n = min(len(view), len(self._in) - self._pos)
        view[:n] = self._in[self._pos:self._pos + n]
        self._pos += n
        self.bytes_received += n
        return n

    def read_exact(self, n: int) -> bytes:
        if self._pos + n > len(self._in):
            raise WireError("stream truncated")
        data = bytes(self._in[self._pos:self._pos + n])
        self._pos += n
        self.bytes_received += n
        return data

    def readinto_exact(self, view: memoryview) -> None:
        view = view.cast("B") if view.format != "B" else view
        if self.readinto(view) != len(view):
            raise WireError("stream truncated")

    @property
    def remaining(self) -> int:
        return len(self._in) - self._pos

    def close(self) -> None:
        self.closed = True


def encode_partition_stream(sections: Iterable[Section], sender_node: int) -> bytes:
    conn = BufferConnection(ACK)
    send_partition_stream(conn, sections, sender_node)
    return bytes(conn.out)


def decode_partition_stream(data: bytes, n_sections: int = 1) -> list[tuple[StreamPreamble, dict[int, np.ndarray]]]:
    conn = BufferConnection(data)
    out = []
    for _ in range(n_sections):
        pre = read_preamble(conn)
        if pre.kind != KIND_PARTITION:
            raise WireError("expected a partition section")
        buckets: dict[int, np.ndarray] = {}
        recv_partition_section(conn, pre, lambda b, t, _n: buckets.__setitem__(b, t))
        out.append((pre, buckets))
    if conn.remaining:
        raise WireError(f"{conn.remaining} trailing bytes after stream")
    return out


def encode_result_stream(blocks: Sequence[np.ndarray], sender_node: int, entry_size: int) -> bytes:
    conn = BufferConnection(ACK)
    send_result_stream(conn, blocks, sender_node, entry_size)
    return bytes(conn.out)


def decode_result_stream(data: bytes, dtype: np.dtype) -> tuple[StreamPreamble, list[np.ndarray]]:
    conn = BufferConnection(data)
    pre = read_preamble(conn)
    blocks = recv_result_stream(conn, pre, dtype)
    if conn.remaining:
        raise WireError(f"{conn.remaining} trailing bytes after stream")
    return pre, blocks
