"""In-node join kernels.

A probe side is an S fragment sorted by key. Each outer tuple's matches then
form one contiguous index range ``[lo, hi)`` found by binary search, which
covers all three predicates:

* equality    ``lo = left(a)``,     ``hi = right(a)``
* band(eps)   ``lo = left(a-eps)``, ``hi = right(a+eps)``
* less-than   ``lo = right(a)``,    ``hi = len(s)``
"""

from __future__ import annotations

import numpy as np

from .config import Predicate
from .model import HashTable, hash_keys


class Probe:
    """S tuples sorted by key, ready for range lookups."""

    __slots__ = ("tuples", "keys")

    def __init__(self, tuples: np.ndarray, presorted: bool = False):
        if not presorted and len(tuples) > 1:
            tuples = tuples[np.argsort(tuples["key"], kind="stable")]
        self.tuples = tuples
        self.keys = tuples["key"]

    def __len__(self) -> int:
        return len(self.tuples)

    def ranges(self, r_keys: np.ndarray, predicate: Predicate) -> tuple[np.ndarray, np.ndarray]:
        keys = self.keys
        if predicate.kind == "equality":
            return np.searchsorted(keys, r_keys, "left"), np.searchsorted(keys, r_keys, "right")
        if predicate.kind == "less-than":
            lo = np.searchsorted(keys, r_keys, "right")
            return lo, np.full_like(lo, len(keys))
        eps = np.uint64(predicate.epsilon)
        low = np.where(r_keys >= eps, r_keys - eps, np.uint64(0))
        high = r_keys + eps
        high = np.where(high < r_keys, np.uint64(np.iinfo(np.uint64).max), high)  # wrapped
        return np.searchsorted(keys, low, "left"), np.searchsorted(keys, high, "right")


def sort_within_buckets(table: HashTable) -> HashTable:
    """Same buckets, each bucket ordered by key, so a bucket slice is a ready probe."""
    keys = table.tuples["key"]
    b = hash_keys(keys, table.num_buckets)
    order = np.lexsort((keys, b))
    return HashTable(table.table_id, table.num_buckets, table.tuples[order], table.offsets)


def match_pairs(r_keys: np.ndarray, probe: Probe, predicate: Predicate) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(r_idx, s_idx)`` of every match, grouped by r in input order."""
    if not len(r_keys) or not len(probe):
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    lo, hi = probe.ranges(r_keys, predicate)
    counts = (hi - lo).astype(np.int64)
    total = int(counts.sum())
    if total == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty
    r_idx = np.repeat(np.arange(len(r_keys), dtype=np.int64), counts)
    starts = np.cumsum(counts) - counts
    s_idx = np.arange(total, dtype=np.int64) - np.repeat(starts - lo, counts)
    return r_idx, s_idx


def make_entries(r: np.ndarray, s: np.ndarray, r_idx: np.ndarray, s_idx: np.ndarray,
                 source_node: int, dtype: np.dtype) -> np.ndarray:
    out = np.empty(len(r_idx), dtype=dtype)
    out["r_key"] = r["key"][r_idx]
    out["s_key"] = s["key"][s_idx]
    out["source_node"] = source_node
    if "r_payload" in dtype.names:
        out["r_payload"] = r["payload"][r_idx]
        out["s_payload"] = s["payload"][s_idx]
    return out


def join_fragment(r: np.ndarray, probe: Probe, predicate: Predicate, source_node: int,
                  dtype: np.dtype) -> np.ndarray:
    """All result entries for outer tuples ``r`` against ``probe``."""
    r_idx, s_idx = match_pairs(r["key"], probe, predicate)
    return make_entries(r, probe.tuples, r_idx, s_idx, source_node, dtype)
