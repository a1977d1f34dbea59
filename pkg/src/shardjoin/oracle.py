"""Brute-force reference join and multiset comparison.

Deliberately shares nothing with the engine's kernels: every (r, s) pair is
tested with the predicate's dense boolean matrix, no hashing, no sorting.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import Predicate
from .model import Partition, result_dtype

_CHUNK = 1024


def nested_loop_join(r: np.ndarray, s: np.ndarray, predicate: Predicate, source_node: int,
                     dtype: np.dtype) -> np.ndarray:
    parts = []
    s_keys = s["key"]
    for start in range(0, len(r), _CHUNK):
        chunk = r[start:start + _CHUNK]
        ri, si = np.nonzero(predicate.matrix(chunk["key"], s_keys))
        out = np.empty(len(ri), dtype=dtype)
        out["r_key"] = chunk["key"][ri]
        out["s_key"] = s_keys[si]
        out["source_node"] = source_node
        if "r_payload" in dtype.names:
            out["r_payload"] = chunk["payload"][ri]
            out["s_payload"] = s["payload"][si]
        parts.append(out)
    if not parts:
        return np.empty(0, dtype=dtype)
    return np.concatenate(parts)


def oracle_join(r_parts: Sequence[Partition], s_parts: Sequence[Partition], predicate: Predicate,
                payloads: bool = False) -> np.ndarray:
    """R join S over all partitions; ``source_node`` is the node that held the R tuple."""
    tuple_size = (r_parts or s_parts)[0].tuple_size
    dtype = result_dtype(tuple_size, payloads)
    s_all = np.concatenate([p.tuples for p in s_parts]) if s_parts else np.empty(0, dtype=r_parts[0].tuples.dtype)
    out = [nested_loop_join(p.tuples, s_all, predicate, p.node_id, dtype) for p in r_parts]
    return np.concatenate(out) if out else np.empty(0, dtype=dtype)


def canonical(entries: np.ndarray) -> np.ndarray:
    """Order-free form of a result multiset: rows sorted by raw bytes."""
    raw = np.ascontiguousarray(entries).view(np.dtype((np.void, entries.dtype.itemsize)))
    return np.sort(raw)


def same_multiset(a: np.ndarray, b: np.ndarray) -> bool:
    if a.dtype != b.dtype or len(a) != len(b):
        return False
    return bool(np.array_equal(canonical(a), canonical(b)))


def per_source_counts(entries: np.ndarray, n_nodes: int) -> np.ndarray:
    return np.bincount(entries["source_node"].astype(np.int64), minlength=n_nodes)
