"""Seeded synthetic relations and the binary partition file format.

Partition file (little-endian)::

    magic "SJPT" | version u32 | table_id u32 | node_id u32 | tuple_count u64
    | tuple_size u32 | domain u64 | tuple_count * tuple_size packed tuples

Key distributions:

``uniform``
    keys uniform on [0, D).
``zipf <theta>``
    key ranks drawn with P(rank k) proportional to 1/(k+1)^theta, then mapped to
    keys through a permutation fixed by the seed, so the hot keys are the same
    on every node and in both relations. ``theta = 0`` is uniform.
``locality <block_size> <p_stay>``
    keys come in runs from one contiguous block of ``block_size`` keys; before
    each tuple the generator jumps to a random block with probability
    ``1 - p_stay``.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .config import ConfigError, parse_kv
from .model import R_TABLE, S_TABLE, Partition, tuple_dtype

PARTITION_MAGIC = b"SJPT"
PARTITION_VERSION = 1
_HEADER = struct.Struct("<4sIIIQIQ")
HEADER_SIZE = _HEADER.size

DISTRIBUTIONS = ("uniform", "zipf", "locality")


class PartitionFormatError(ValueError):
    """A partition file is not in the expected format (as opposed to an I/O failure)."""


@dataclass(frozen=True)
class GenSpec:
    seed: int = 0
    tuples_per_partition: int = 400_000
    domain: int = 800_000
    tuple_size: int = 128
    distribution: str = "uniform"
    theta: float = 0.0
    block_size: int = 1000
    p_stay: float = 0.9

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ConfigError(f"unknown distribution {self.distribution!r}")
        if self.tuples_per_partition < 0 or self.domain < 1:
            raise ConfigError("need tuples_per_partition >= 0 and domain >= 1")
        if self.tuple_size < 8:
            raise ConfigError("tuple_size must be >= 8")
        if self.theta < 0:
            raise ConfigError("zipf theta must be >= 0")
        if self.block_size < 1 or not 0.0 <= self.p_stay <= 1.0:
            raise ConfigError("locality needs block_size >= 1 and p_stay in [0, 1]")

    @property
    def distribution_text(self) -> str:
        if self.distribution == "zipf":
            return f"zipf {self.theta:g}"
        if self.distribution == "locality":
            return f"locality {self.block_size} {self.p_stay:g}"
        return "uniform"

    def with_(self, **changes) -> GenSpec:
        return dataclasses.replace(self, **changes)


def parse_distribution(text: str) -> dict:
    parts = text.replace("(", " ").replace(")", " ").replace(",", " ").split()
    if not parts:
        raise ConfigError("empty distribution")
    kind, args = parts[0], parts[1:]
    try:
        if kind == "uniform" and not args:
            return {"distribution": "uniform"}
        if kind == "zipf" and len(args) == 1:
            return {"distribution": "zipf", "theta": float(args[0])}
        if kind == "locality" and len(args) == 2:
            return {"distribution": "locality", "block_size": int(args[0]), "p_stay": float(args[1])}
    except ValueError as exc:
        raise ConfigError(f"bad distribution {text!r}: {exc}") from None
    raise ConfigError(f"bad distribution {text!r}; expected uniform | zipf <theta> | locality <block> <p_stay>")


_GEN_KEYS = {"seed": int, "tuples_per_partition": int, "domain": int, "tuple_size": int}


def parse_gen_spec(text: str) -> tuple[int, GenSpec, GenSpec]:
    """Parse a generator spec file into (nodes, R spec, S spec).

    Unprefixed keys apply to both relations; ``R.<key>`` / ``S.<key>`` override
    one. ``nodes`` gives the partition count.
    """
    nodes = 1
    common: dict = {}
    per = {"R": {}, "S": {}}
    for lineno, key, value in parse_kv(text):
        target = common
        if key[:2] in ("R.", "S."):
            target, key = per[key[0]], key[2:]
        try:
            if key == "nodes" and target is common:
                nodes = int(value)
            elif key == "distribution":
                target.update(parse_distribution(value))
            elif key in _GEN_KEYS:
                target[key] = _GEN_KEYS[key](value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    if nodes < 1:
        raise ConfigError("nodes must be >= 1")
    return nodes, GenSpec(**{**common, **per["R"]}), GenSpec(**{**common, **per["S"]})


@lru_cache(maxsize=8)
def _zipf_cdf(domain: int, theta: float) -> np.ndarray:
    w = 1.0 / np.power(np.arange(1, domain + 1, dtype=np.float64), theta)
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


@lru_cache(maxsize=8)
def _rank_to_key(seed: int, domain: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5A1F])).permutation(domain).astype(np.uint64)


def generate_keys(spec: GenSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    d = spec.domain
    if spec.distribution == "uniform":
        return rng.integers(0, d, size=n, dtype=np.uint64)
    if spec.distribution == "zipf":
        ranks = np.searchsorted(_zipf_cdf(d, spec.theta), rng.random(n), side="right")
        ranks = np.minimum(ranks, d - 1)
        return _rank_to_key(spec.seed, d)[ranks]
    # locality: piecewise-constant block choice, uniform offset inside the block
    n_blocks = -(-d // spec.block_size)
    jump = rng.random(n) >= spec.p_stay
    if n:
        jump[0] = True
    blocks = rng.integers(0, n_blocks, size=int(jump.sum()), dtype=np.int64)
    block_of = blocks[np.cumsum(jump) - 1] if n else np.empty(0, dtype=np.int64)
    start = block_of * spec.block_size
    width = np.minimum(spec.block_size, d - start)
    return (start + np.floor(rng.random(n) * width).astype(np.int64)).astype(np.uint64)


def generate_partition(spec: GenSpec, table_id: int, node_id: int) -> Partition:
    """Deterministic partition for (seed, table, node)."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, table_id, node_id]))
    n = spec.tuples_per_partition
    tuples = np.empty(n, dtype=tuple_dtype(spec.tuple_size))
    tuples["key"] = generate_keys(spec, rng, n)
    if spec.tuple_size > 8:
        raw = tuples.view(np.uint8).reshape(n, spec.tuple_size)
        raw[:, 8:] = rng.integers(0, 256, size=(n, spec.tuple_size - 8), dtype=np.uint8)
    return Partition(table_id, node_id, tuples, spec.domain, spec.tuple_size)


def generate_cluster(r_spec: GenSpec, s_spec: GenSpec, n_nodes: int) -> list[tuple[Partition, Partition]]:
    return [(generate_partition(r_spec, R_TABLE, i), generate_partition(s_spec, S_TABLE, i))
            for i in range(n_nodes)]


def split_sizes(total: int, n: int) -> list[int]:
    """Split ``total`` tuples over ``n`` nodes as evenly as possible."""
    base, extra = divmod(total, n)
    return [base + (i < extra) for i in range(n)]


def partition_path(directory: str | Path, table_id: int, node_id: int) -> Path:
    return Path(directory) / f"{'R' if table_id == R_TABLE else 'S'}_{node_id}.sjp"


def write_partition(path: str | Path, partition: Partition) -> Path:
    path = Path(path)
    header = _HEADER.pack(PARTITION_MAGIC, PARTITION_VERSION, partition.table_id, partition.node_id,
                          len(partition), partition.tuple_size, partition.domain)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(partition.tuples).tobytes())
    return path


def read_partition(path: str | Path) -> Partition:
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise PartitionFormatError(f"{path}: truncated header")
        magic, version, table_id, node_id, count, tuple_size, domain = _HEADER.unpack(head)
        if magic != PARTITION_MAGIC:
            raise PartitionFormatError(f"{path}: bad magic {magic!r}")
        if version != PARTITION_VERSION:
            raise PartitionFormatError(f"{path}: unsupported version {version}")
        if tuple_size < 8 or table_id not in (R_TABLE, S_TABLE):
            raise PartitionFormatError(f"{path}: bad header fields")
        body = fh.read()
    if len(body) != count * tuple_size:
        raise PartitionFormatError(f"{path}: expected {count * tuple_size} tuple bytes, found {len(body)}")
    tuples = np.frombuffer(body, dtype=tuple_dtype(tuple_size)).copy()
    try:
        return Partition(table_id, node_id, tuples, domain, tuple_size)
    except ValueError as exc:
        raise PartitionFormatError(f"{path}: {exc}") from None


def load_node_partitions(directory: str | Path, node_id: int) -> tuple[Partition, Partition]:
    return (read_partition(partition_path(directory, R_TABLE, node_id)),
            read_partition(partition_path(directory, S_TABLE, node_id)))
