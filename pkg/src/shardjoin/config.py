"""Cluster configuration and the key-value file grammar.

Grammar (one setting per line)::

    # comment                       ignored, as are blank lines
    key = value                     scalar setting
    node = <id> <ip> <sport>        one line per node, repeatable

Keys are the :class:`ClusterConfig` field names. ``predicate`` accepts
``equality``, ``less-than`` or ``band <eps>``; booleans accept
``true/false/yes/no/1/0``. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BROADCAST = "broadcast"
HASH_DISTRIBUTION = "hash-distribution"
JOIN_MODES = (BROADCAST, HASH_DISTRIBUTION)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Predicate:
    """Join predicate between an R key ``a`` and an S key ``b``."""

    kind: str = "equality"
    epsilon: int = 0

    def __post_init__(self):
        if self.kind not in ("equality", "band", "less-than"):
            raise ConfigError(f"unknown predicate {self.kind!r}")
        if self.epsilon < 0:
            raise ConfigError("band width must be non-negative")

    @classmethod
    def parse(cls, text: str) -> Predicate:
        parts = text.replace("(", " ").replace(")", " ").split()
        if not parts:
            raise ConfigError("empty predicate")
        if parts[0] == "band":
            if len(parts) != 2:
                raise ConfigError("band predicate needs a width: 'band <eps>'")
            return cls("band", int(parts[1]))
        if len(parts) != 1:
            raise ConfigError(f"unexpected predicate arguments in {text!r}")
        return cls(parts[0])

    def __str__(self) -> str:
        return f"band {self.epsilon}" if self.kind == "band" else self.kind

    @property
    def is_equality(self) -> bool:
        return self.kind == "equality"

    def matrix(self, r_keys: np.ndarray, s_keys: np.ndarray) -> np.ndarray:
        """Boolean (len(r), len(s)) match matrix."""
        a = r_keys[:, None]
        b = s_keys[None, :]
        if self.kind == "equality":
            return a == b
        if self.kind == "less-than":
            return a < b
        diff = a.astype(np.int64) - b.astype(np.int64)
        return np.abs(diff) <= self.epsilon


@dataclass(frozen=True)
class NodeAddress:
    node_id: int
    ip: str
    sport: int


def split_comm_threads(n_com: int) -> tuple[int, int]:
    """Split communication threads evenly into (senders, receivers), at least one each."""
    half = max(1, n_com // 2)
    return half, max(1, n_com - half)


@dataclass
class ClusterConfig:
    nodes: list[NodeAddress] = field(default_factory=lambda: [NodeAddress(0, "127.0.0.1", 7100)])
    sink_id: int = 0
    n_compute: int = 2
    n_send: int = 1
    n_recv: int = 1
    num_buckets: int = 1200
    partition_size_R: int = 400_000
    partition_size_S: int = 400_000
    domain: int = 800_000
    tuple_size: int = 128
    page_size: int = 8192
    pool_capacity: int | None = None
    join_mode: str = BROADCAST
    predicate: Predicate = field(default_factory=Predicate)
    queue_capacity: int = 1024
    local_buffer_blocks: int = 4
    result_payloads: bool = False
    retry_initial_ms: float = 50.0
    retry_factor: float = 2.0
    retry_attempts: int = 10
    io_timeout_s: float = 60.0
    run_timeout_s: float = 600.0
    trace: bool = True
    partition_dir: str | None = None

    def __post_init__(self):
        if isinstance(self.predicate, str):
            self.predicate = Predicate.parse(self.predicate)
        self.validate()

    def validate(self) -> None:
        ids = sorted(n.node_id for n in self.nodes)
        if ids != list(range(len(ids))) or not ids:
            raise ConfigError(f"node ids must be 0..N-1 and unique, got {ids}")
        if self.sink_id not in ids:
            raise ConfigError(f"sink {self.sink_id} is not a node")
        for name in ("n_compute", "n_send", "n_recv"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_buckets < 1:
            raise ConfigError("num_buckets must be >= 1")
        if self.join_mode not in JOIN_MODES:
            raise ConfigError(f"join_mode must be one of {JOIN_MODES}")
        if self.join_mode == HASH_DISTRIBUTION:
            if not self.predicate.is_equality:
                raise ConfigError("hash-distribution requires the equality predicate")
            if self.num_buckets < len(ids):
                raise ConfigError("hash-distribution needs num_buckets >= number of nodes")
        if self.tuple_size < 8:
            raise ConfigError("tuple_size must be >= 8")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.pool_capacity is not None and self.pool_capacity <= 0:
            raise ConfigError("pool_capacity must be positive")

    @property
    def n(self) -> int:
        return len(self.nodes)

    def address(self, node_id: int) -> NodeAddress:
        return self.nodes[node_id]

    @property
    def pool_bytes(self) -> int:
        if self.pool_capacity is not None:
            return self.pool_capacity
        return 4 * max(self.partition_size_R, self.partition_size_S, 1) * self.tuple_size

    def with_(self, **changes) -> ClusterConfig:
        return dataclasses.replace(self, **changes)

    # -- file grammar ----------------------------------------------------
    def dumps(self) -> str:
        lines = ["# shardjoin cluster config"]
        for n in self.nodes:
            lines.append(f"node = {n.node_id} {n.ip} {n.sport}")
        for f in dataclasses.fields(self):
            if f.name == "nodes":
                continue
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> ClusterConfig:
        kwargs: dict = {}
        nodes: list[NodeAddress] = []
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, key, value in parse_kv(text):
            if key == "node":
                parts = value.split()
                if len(parts) != 3:
                    raise ConfigError(f"line {lineno}: expected 'node = <id> <ip> <sport>'")
                try:
                    nodes.append(NodeAddress(int(parts[0]), parts[1], int(parts[2])))
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: {exc}") from None
                continue
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                kwargs[key] = _coerce(types[key], value)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if nodes:
            kwargs["nodes"] = sorted(nodes, key=lambda n: n.node_id)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> ClusterConfig:
        return cls.loads(Path(path).read_text())


def parse_kv(text: str):
    """Yield ``(lineno, key, value)`` for every setting line."""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        yield lineno, key, value


def parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _coerce(type_name: str, value: str):
    t = str(type_name)
    if t.startswith("int | None"):
        return None if value.lower() == "none" else int(value)
    if t.startswith("str | None"):
        return None if value.lower() == "none" else value
    if t == "int":
        return int(value)
    if t == "float":
        return float(value)
    if t == "bool":
        return parse_bool(value)
    if t == "Predicate":
        return Predicate.parse(value)
    return value


def local_cluster(n: int, base_port: int = 7100, ip: str = "127.0.0.1", **kwargs) -> ClusterConfig:
    """Config for ``n`` nodes on one host with consecutive ports."""
    return ClusterConfig(nodes=[NodeAddress(i, ip, base_port + i) for i in range(n)], **kwargs)
