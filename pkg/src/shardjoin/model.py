"""Relations, hash tables, hash-table frames and result storage.

Tuples are kept as numpy structured arrays whose byte layout is the packed
on-disk and on-wire layout: an 8-byte little-endian key followed by
``tuple_size - 8`` payload bytes. A bucket is therefore a contiguous slice
that can be written to a socket without copying.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Iterable, Iterator, NamedTuple

import numpy as np

R_TABLE = 0
S_TABLE = 1

_MASK64 = (1 << 64) - 1
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class ProtocolViolation(RuntimeError):
    """The event protocol reached a state the scheduling rules forbid."""


def tuple_dtype(tuple_size: int) -> np.dtype:
    if tuple_size < 8:
        raise ValueError(f"tuple_size must be at least 8 bytes, got {tuple_size}")
    if tuple_size == 8:
        return np.dtype([("key", "<u8")])
    return np.dtype([("key", "<u8"), ("payload", f"V{tuple_size - 8}")])


class Tuple(NamedTuple):
    key: int
    payload: bytes

    def to_bytes(self, tuple_size: int) -> bytes:
        if len(self.payload) != tuple_size - 8:
            raise ValueError("payload does not pad the tuple to tuple_size bytes")
        return self.key.to_bytes(8, "little") + self.payload


def make_tuples(keys, tuple_size: int, payloads: Iterable[bytes] | None = None) -> np.ndarray:
    keys = np.asarray(keys, dtype="<u8")
    out = np.zeros(len(keys), dtype=tuple_dtype(tuple_size))
    out["key"] = keys
    if payloads is not None and tuple_size > 8:
        raw = out.view(np.uint8).reshape(len(keys), tuple_size)
        for i, p in enumerate(payloads):
            raw[i, 8:] = np.frombuffer(p, dtype=np.uint8)
    return out


def _mix(z: int) -> int:
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def hash_key(key: int, num_buckets: int) -> int:
    """Bucket index of ``key``.

    Keys are cut into aligned runs of ``num_buckets`` consecutive values; each
    run is rotated by a splitmix64-scrambled offset of its run number. Every
    run therefore covers each bucket exactly once, so a contiguous key domain
    spreads evenly, while neighbouring runs still land in unrelated orders.
    """
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    key &= _MASK64
    run, offset = divmod(key, num_buckets)
    return (offset + _mix(run) % num_buckets) % num_buckets


def hash_keys(keys: np.ndarray, num_buckets: int) -> np.ndarray:
    """Vectorised :func:`hash_key`; returns int64 bucket indexes."""
    if num_buckets < 1:
        raise ValueError("num_buckets must be >= 1")
    k = np.asarray(keys, dtype=np.uint64)
    nb = np.uint64(num_buckets)
    z = k // nb
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    # both terms are < nb, so the sum cannot wrap
    return ((k % nb + z % nb) % nb).astype(np.int64)


@dataclass
class Partition:
    table_id: int
    node_id: int
    tuples: np.ndarray
    domain: int
    tuple_size: int

    def __post_init__(self):
        if self.tuples.dtype != tuple_dtype(self.tuple_size):
            raise ValueError("tuple array dtype does not match tuple_size")
        if len(self.tuples) and int(self.tuples["key"].max()) >= self.domain:
            raise ValueError(f"partition holds keys outside [0, {self.domain})")

    @property
    def keys(self) -> np.ndarray:
        return self.tuples["key"]

    def __len__(self) -> int:
        return len(self.tuples)

    def __iter__(self) -> Iterator[Tuple]:
        raw = self.tuples.view(np.uint8).reshape(len(self.tuples), self.tuple_size)
        for i, key in enumerate(self.tuples["key"]):
            yield Tuple(int(key), raw[i, 8:].tobytes())

    @property
    def nbytes(self) -> int:
        return len(self.tuples) * self.tuple_size


@dataclass
class HashTable:
    """Bucketed relation: ``tuples`` grouped by bucket, ``offsets`` delimit buckets."""

    table_id: int
    num_buckets: int
    tuples: np.ndarray
    offsets: np.ndarray

    def bucket(self, b: int) -> np.ndarray:
        return self.tuples[self.offsets[b]:self.offsets[b + 1]]

    @property
    def buckets(self) -> list[np.ndarray]:
        return [self.bucket(b) for b in range(self.num_buckets)]

    def bucket_sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def nonempty_buckets(self, among: Iterable[int] | None = None) -> list[int]:
        sizes = self.bucket_sizes()
        if among is None:
            return [int(b) for b in np.flatnonzero(sizes)]
        return [b for b in among if sizes[b]]

    def __len__(self) -> int:
        return len(self.tuples)


def build_hash_table(partition: Partition, num_buckets: int) -> HashTable:
    b = hash_keys(partition.keys, num_buckets)
    order = np.argsort(b, kind="stable")
    counts = np.bincount(b, minlength=num_buckets)
    offsets = np.zeros(num_buckets + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return HashTable(partition.table_id, num_buckets, partition.tuples[order], offsets)


def assign_buckets(node_id: int, total_nodes: int, num_buckets: int) -> list[int]:
    """Buckets pinned to ``node_id`` under hash distribution (round-robin)."""
    if not 0 <= node_id < total_nodes:
        raise ValueError(f"node_id {node_id} outside [0, {total_nodes})")
    if num_buckets < total_nodes:
        raise ValueError("need at least one bucket per node")
    return list(range(node_id, num_buckets, total_nodes))


class PoolClosed(RuntimeError):
    pass


class MemoryPool:
    """Byte budget shared by all HTFs of a node; ``allocate`` blocks when exhausted."""

    def __init__(self, capacity: int, runtime):
        if capacity <= 0:
            raise ValueError("pool capacity must be positive")
        self.capacity = capacity
        self._cond = runtime.condition()
        self._now = runtime.now_ns
        self._checkpoint = runtime.checkpoint
        self.used = 0
        self.peak = 0
        self.blocked_ns = 0
        self.blocked_count = 0
        self._closed = False

    def allocate(self, nbytes: int) -> int:
        """Reserve ``nbytes``; returns how long the caller was blocked (ns)."""
        if nbytes > self.capacity:
            raise ValueError(f"allocation of {nbytes} bytes exceeds pool capacity {self.capacity}")
        self._checkpoint()
        waited = 0
        with self._cond:
            if self.used + nbytes > self.capacity and not self._closed:
                t0 = self._now()
                self.blocked_count += 1
                while self.used + nbytes > self.capacity and not self._closed:
                    self._cond.wait()
                waited = self._now() - t0
                self.blocked_ns += waited
            if self._closed:
                raise PoolClosed("memory pool closed")
            self.used += nbytes
            self.peak = max(self.peak, self.used)
        return waited

    def release(self, nbytes: int) -> None:
        with self._cond:
            if nbytes > self.used:
                raise ProtocolViolation("pool release exceeds outstanding allocation")
            self.used -= nbytes
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


ABSENT, RESIDENT, FREED = 0, 1, 2


class HashTableFrame:
    """Per-sender skeleton of a remote hash table.

    Buckets move absent -> resident -> freed exactly once. Resident bytes are
    charged to the node's :class:`MemoryPool` (``pool=None`` for the frame that
    wraps the node's own table, whose memory is owned elsewhere).
    """

    def __init__(self, htf_index: int, source_node: int, table_id: int, num_buckets: int,
                 pool: MemoryPool | None, runtime):
        self.htf_index = htf_index
        self.source_node = source_node
        self.table_id = table_id
        self.num_buckets = num_buckets
        self.pool = pool
        self._lock = runtime.lock()
        self._state = np.zeros(num_buckets, dtype=np.int8)
        self._data: dict[int, np.ndarray] = {}
        self._charged: dict[int, int] = {}
        self.expected: int | None = None
        self.joined = 0
        self.freed = False

    @property
    def buckets(self) -> np.ndarray:
        return self._state

    def put(self, b: int, tuples: np.ndarray, charged: int = 0) -> None:
        with self._lock:
            if self.freed or self._state[b] != ABSENT:
                raise ProtocolViolation(f"HTF {self.htf_index}: bucket {b} delivered twice")
            self._state[b] = RESIDENT
            self._data[b] = tuples
            self._charged[b] = charged

    def get(self, b: int) -> np.ndarray:
        if self.freed or not 0 <= b < self.num_buckets or self._state[b] != RESIDENT:
            raise ProtocolViolation(f"HTF {self.htf_index}: bucket {b} is not resident")
        return self._data[b]

    def resident(self) -> list[int]:
        return [int(b) for b in np.flatnonzero(self._state == RESIDENT)]

    def free_bucket(self, b: int) -> bool:
        """Release bucket ``b``; True when this call completed the frame."""
        with self._lock:
            if self.freed or self._state[b] != RESIDENT:
                raise ProtocolViolation(f"HTF {self.htf_index}: bucket {b} freed twice or never resident")
            self._state[b] = FREED
            del self._data[b]
            charged = self._charged.pop(b)
            self.joined += 1
            done = self.expected is not None and self.joined == self.expected
        if charged and self.pool is not None:
            self.pool.release(charged)
        return done

    def seal(self, expected: int) -> bool:
        """Record the final bucket count; True when every bucket is already freed."""
        with self._lock:
            self.expected = expected
            return self.joined == expected

    def free(self) -> None:
        with self._lock:
            if self.freed:
                raise ProtocolViolation(f"HTF {self.htf_index} freed twice")
            if self._data:
                raise ProtocolViolation(f"HTF {self.htf_index} freed with resident buckets")
            self.freed = True


def result_dtype(tuple_size: int, payloads: bool = False) -> np.dtype:
    fields = [("r_key", "<u8"), ("s_key", "<u8"), ("source_node", "<u4")]
    if payloads and tuple_size > 8:
        fields += [("r_payload", f"V{tuple_size - 8}"), ("s_payload", f"V{tuple_size - 8}")]
    return np.dtype(fields)


class ResultBlock:
    """One page worth of result entries."""

    __slots__ = ("entries", "count", "capacity")

    def __init__(self, dtype: np.dtype, page_size: int):
        per_block = page_size // dtype.itemsize
        if per_block < 1:
            raise ValueError(f"page size {page_size} smaller than one result entry ({dtype.itemsize} B)")
        self.entries = np.empty(per_block, dtype=dtype)
        self.count = 0
        self.capacity = page_size

    @classmethod
    def of(cls, entries: np.ndarray, page_size: int) -> ResultBlock:
        block = cls(entries.dtype, page_size)
        if len(entries) > len(block.entries):
            raise ValueError("entries do not fit in one block")
        block.add(entries)
        return block

    @property
    def fill(self) -> int:
        return self.count * self.entries.dtype.itemsize

    @property
    def full(self) -> bool:
        return self.count == len(self.entries)

    def add(self, entries: np.ndarray) -> int:
        n = min(len(entries), len(self.entries) - self.count)
        self.entries[self.count:self.count + n] = entries[:n]
        self.count += n
        return n

    def view(self) -> np.ndarray:
        return self.entries[:self.count]


class ResultList:
    """Node-wide result list; appends are whole blocks under one lock."""

    def __init__(self, dtype: np.dtype, page_size: int, lock=None):
        self.dtype = dtype
        self.page_size = page_size
        self.blocks: list[ResultBlock] = []
        self._lock = lock if lock is not None else threading.Lock()

    def merge_block(self, block: ResultBlock) -> None:
        if block.count <= 0:
            raise ValueError("cannot merge an empty block")
        with self._lock:
            self.blocks.append(block)

    def merge_blocks(self, blocks: list[ResultBlock]) -> None:
        if any(b.count <= 0 for b in blocks):
            raise ValueError("cannot merge an empty block")
        with self._lock:
            self.blocks.extend(blocks)

    def entry_count(self) -> int:
        return sum(b.count for b in self.blocks)

    def entries(self) -> np.ndarray:
        if not self.blocks:
            return np.empty(0, dtype=self.dtype)
        return np.concatenate([b.view() for b in self.blocks])

    def __len__(self) -> int:
        return len(self.blocks)


def merge_block(result_list: ResultList, block: ResultBlock) -> ResultList:
    result_list.merge_block(block)
    return result_list


class LocalBuffer:
    """Per-thread staging area in front of the shared :class:`ResultList`.

    Full blocks accumulate until ``max_blocks`` of them are waiting, then all
    are merged in one locked append. ``flush`` also merges the partial block.
    """

    def __init__(self, owner_thread: int, result_list: ResultList, max_blocks: int = 4):
        self.owner_thread = owner_thread
        self.result_list = result_list
        self.max_blocks = max(1, max_blocks)
        self.blocks: list[ResultBlock] = []
        self.current = ResultBlock(result_list.dtype, result_list.page_size)
        self.produced = 0

    def append(self, entries: np.ndarray) -> None:
        self.produced += len(entries)
        pos = 0
        while pos < len(entries):
            pos += self.current.add(entries[pos:])
            if self.current.full:
                self.blocks.append(self.current)
                self.current = ResultBlock(self.result_list.dtype, self.result_list.page_size)
                if len(self.blocks) >= self.max_blocks:
                    self._merge_full()

    def _merge_full(self) -> None:
        if self.blocks:
            self.result_list.merge_blocks(self.blocks)
            self.blocks = []

    def flush(self) -> None:
        self._merge_full()
        if self.current.count:
            self.result_list.merge_block(self.current)
            self.current = ResultBlock(self.result_list.dtype, self.result_list.page_size)
