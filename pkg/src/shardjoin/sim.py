"""In-process multi-node runs over in-memory pipes.

``mode="coop"`` runs every thread of every node under the seeded cooperative
scheduler: a fixed seed replays the same interleaving and the same trace.
``mode="threads"`` uses real threads over the same in-memory transport.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .baseline import BaselineNode
from .config import ClusterConfig, ConfigError
from .metrics import ClusterMetrics
from .model import Partition
from .node import Faults, Node, NodeFailure, NodeResult
from .runtime import CoopRuntime, Deadlock, ThreadRuntime
from .trace import Trace, check_trace
from .transport import MemTransport

ENGINES = ("barrier-free", "barrier")


class SimFailure(RuntimeError):
    """A simulated run did not complete; carries the per-node failures and the trace so far."""

    def __init__(self, message: str, failures: dict[int, BaseException], trace: Trace):
        super().__init__(message)
        self.failures = failures
        self.trace = trace

    @property
    def deadlock(self) -> bool:
        return any(isinstance(f, NodeFailure) and f.category == "timeout" for f in self.failures.values()) \
            or "deadlock" in str(self)


@dataclass
class SimOutcome:
    results: np.ndarray
    nodes: list[NodeResult]
    metrics: ClusterMetrics
    trace: Trace
    violations: list[str] = field(default_factory=list)
    seed: int = 0

    @property
    def sink(self) -> NodeResult:
        return next(r for r in self.nodes if r.results is not None)


class SimCluster:
    def __init__(self, config: ClusterConfig | Sequence[ClusterConfig],
                 partitions: Sequence[tuple[Partition, Partition]], seed: int = 0, *,
                 mode: str = "coop", engine: str = "barrier-free", watchdog_s: float = 60.0,
                 pipe_capacity: int = 64 * 1024, preempt: float = 0.3,
                 faults: Faults | dict[int, Faults] | None = None):
        configs = list(config) if isinstance(config, (list, tuple)) else [config] * config.n
        if len(configs) != len(partitions) or len(configs) != configs[0].n:
            raise ConfigError("need one config and one (R, S) pair per node")
        if any(c.nodes != configs[0].nodes or c.sink_id != configs[0].sink_id for c in configs):
            raise ConfigError("node configs disagree on membership")
        if mode not in ("coop", "threads"):
            raise ConfigError(f"unknown sim mode {mode!r}")
        if engine not in ENGINES:
            raise ConfigError(f"unknown engine {engine!r}")
        self.configs = [c.with_(run_timeout_s=watchdog_s, io_timeout_s=watchdog_s) for c in configs]
        self.partitions = list(partitions)
        self.seed = seed
        self.mode = mode
        self.engine = engine
        self.watchdog_s = watchdog_s
        if mode == "coop":
            self.runtime = CoopRuntime(seed, preempt)
        else:
            self.runtime = ThreadRuntime(seed, jitter=0.05)
        self.transport = MemTransport(self.runtime, pipe_capacity)
        self.trace = Trace(self.runtime.now_ns, enabled=self.configs[0].trace)
        if faults is None or isinstance(faults, Faults):
            self.faults = {i: faults for i in range(len(configs))}
        else:
            self.faults = {i: faults.get(i) for i in range(len(configs))}

    def _node(self, i: int):
        cls = Node if self.engine == "barrier-free" else BaselineNode
        r, s = self.partitions[i]
        return cls(self.configs[i], i, r, s, runtime=self.runtime, transport=self.transport,
                   trace=self.trace, faults=self.faults[i])

    def _root(self) -> tuple[list, dict]:
        nodes = [self._node(i) for i in range(len(self.configs))]
        handles = [self.runtime.spawn(f"node{i}", n.run) for i, n in enumerate(nodes)]
        for h in handles:
            h.join(self.watchdog_s * 2)
        failures = {}
        for i, h in enumerate(handles):
            if h.is_alive():
                failures[i] = NodeFailure(i, "timeout", "node did not finish within the watchdog")
            elif h.error is not None:
                failures[i] = h.error
        return [h.result for h in handles], failures

    def run(self) -> SimOutcome:
        try:
            if self.mode == "coop":
                results, failures = self.runtime.run(self._root, name="sim")
            else:
                results, failures = self._root()
        except Deadlock as exc:
            raise SimFailure(f"seed {self.seed}: {exc}", {}, self.trace) from exc
        if failures:
            detail = "; ".join(f"node {i}: {f}" for i, f in sorted(failures.items()))
            raise SimFailure(f"seed {self.seed}: {detail}", failures, self.trace)
        sink = next(r for r in results if r.results is not None)
        violations = check_trace(self.trace) if self.engine == "barrier-free" and self.trace.enabled else []
        return SimOutcome(sink.results, results, ClusterMetrics([r.report for r in results]), self.trace,
                          violations, self.seed)


def run_sim(config: ClusterConfig | Sequence[ClusterConfig], partitions: Sequence[tuple[Partition, Partition]],
            seed: int = 0, **kwargs) -> SimOutcome:
    """Run all nodes in one process; returns sink results, metrics, trace and trace violations."""
    return SimCluster(config, partitions, seed, **kwargs).run()
