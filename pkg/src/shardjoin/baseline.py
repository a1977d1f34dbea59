"""Phase-synchronized ring join: the barrier-based baseline.

Node i first joins R_i with S_i locally; then, for k = 1..n-1, it sends its
R partition to (i+k)%n, receives one from (i-k+n)%n, joins what it received
with S_i and waits on a cluster-wide barrier before the next phase.

The barrier is a count-up/release protocol run by node 0 over the same
transport: every other node connects, sends ``"SJB1" | node u32 | generation
u32`` and blocks until the coordinator answers with the same message carrying
the coordinator's id. Barrier and data connections share each node's listener
and are told apart by their magic.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import BROADCAST, ClusterConfig, ConfigError
from .join import Probe, join_fragment
from .metrics import LoadReport
from .model import (R_TABLE, LocalBuffer, Partition, ProtocolViolation, ResultList, build_hash_table,
                    result_dtype, tuple_dtype)
from .node import NodeFailure, NodeResult, NodeTimeout, categorize, ring_peers
from .runtime import ThreadRuntime
from .trace import Trace, bind_thread
from .transport import TcpTransport, connect_with_retry
from .wire import (KIND_PARTITION, KIND_RESULT, Section, WireError, check_head,
                   read_preamble_rest, recv_partition_section, recv_result_stream, send_ack,
                   send_partition_stream, send_result_stream)


BARRIER_MAGIC = b"SJB1"
_BARRIER_MSG = struct.Struct("<4sII")
COORDINATOR = 0


class BarrierTimeout(NodeTimeout):
    pass


class PhaseBarrier:
    """Cluster barrier; node 0 coordinates, every node calls :meth:`wait` once per phase."""

    def __init__(self, node_id: int, config: ClusterConfig, transport, runtime, timeout_s: float | None = None):
        self.node_id = node_id
        self.participants = config.n
        self.generation = 0
        self.cfg = config
        self.transport = transport
        self.rt = runtime
        self.timeout_s = config.io_timeout_s if timeout_s is None else timeout_s
        self._cond = runtime.condition()
        self._arrivals: dict[int, list] = {}

    def arrive(self, conn) -> None:
        """Coordinator side: register a peer's arrival read off the listener (magic already consumed)."""
        node, gen = struct.unpack("<II", conn.read_exact(8))
        if self.node_id != COORDINATOR:
            raise ProtocolViolation(f"barrier arrival from node {node} at non-coordinator {self.node_id}")
        with self._cond:
            self._arrivals.setdefault(gen, []).append((node, conn))
            self._cond.notify_all()

    def wait(self) -> int:
        gen = self.generation + 1
        if self.participants > 1:
            if self.node_id == COORDINATOR:
                self._release(gen)
            else:
                self._join(gen)
        self.generation = gen
        return gen

    def _release(self, gen: int) -> None:
        need = self.participants - 1
        with self._cond:
            if not self._cond.wait_for(lambda: len(self._arrivals.get(gen, ())) >= need, self.timeout_s):
                raise BarrierTimeout(f"barrier generation {gen}: {len(self._arrivals.get(gen, ()))} of {need} arrived")
            arrived = self._arrivals.pop(gen)
        nodes = sorted(n for n, _ in arrived)
        if nodes != [i for i in range(self.participants) if i != COORDINATOR]:
            raise ProtocolViolation(f"barrier generation {gen}: unexpected arrivals {nodes}")
        for _, conn in arrived:
            conn.sendall(_BARRIER_MSG.pack(BARRIER_MAGIC, COORDINATOR, gen))
            conn.close()

    def _join(self, gen: int) -> None:
        coord = self.cfg.address(COORDINATOR)
        cfg = self.cfg
        conn = connect_with_retry(self.transport, coord.ip, coord.sport, initial_s=cfg.retry_initial_ms / 1000,
                                  factor=cfg.retry_factor, attempts=cfg.retry_attempts, sleep=self.rt.sleep)
        try:
            conn.sendall(_BARRIER_MSG.pack(BARRIER_MAGIC, self.node_id, gen))
            magic, node, got = _BARRIER_MSG.unpack(conn.read_exact(_BARRIER_MSG.size))
            if magic != BARRIER_MAGIC or node != COORDINATOR or got != gen:
                raise ProtocolViolation(f"bad barrier release {magic!r} {node} {got} for generation {gen}")
        finally:
            conn.close()


def barrier_wait(barrier: PhaseBarrier, node_id: int) -> int:
    if node_id != barrier.node_id:
        raise ValueError("barrier belongs to another node")
    return barrier.wait()


class _Inbox:
    """Data connections accepted by the listener, keyed by (kind, sender)."""

    def __init__(self, runtime):
        self._cond = runtime.condition()
        self._items: dict[tuple[int, int], tuple] = {}
        self._closed = False

    def put(self, key, value) -> None:
        with self._cond:
            if key in self._items:
                raise ProtocolViolation(f"duplicate stream {key}")
            self._items[key] = value
            self._cond.notify_all()

    def take(self, key, timeout: float | None):
        return self.take_first(lambda k: k == key, timeout)

    def take_first(self, match, timeout: float | None):
        """Remove and return the first stream whose key satisfies ``match``."""
        def ready():
            return self._closed or any(match(k) for k in self._items)

        with self._cond:
            if not self._cond.wait_for(ready, timeout):
                raise NodeTimeout(f"expected stream did not arrive within {timeout} s")
            for k in self._items:
                if match(k):
                    return self._items.pop(k)
            raise NodeTimeout("inbox closed")

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


class BaselineNode:
    def __init__(self, config: ClusterConfig, node_id: int, r_part: Partition, s_part: Partition, *,
                 runtime=None, transport=None, trace: Trace | None = None, faults=None):
        if config.join_mode != BROADCAST:
            raise ConfigError("the barrier baseline implements broadcast mode only")
        self.cfg = config
        self.node_id = node_id
        self.n = config.n
        self.is_sink = node_id == config.sink_id
        self.r_part, self.s_part = r_part, s_part
        self.rt = runtime or ThreadRuntime()
        self.transport = transport or TcpTransport(io_timeout=config.io_timeout_s)
        self.trace = trace if trace is not None else Trace(self.rt.now_ns, enabled=config.trace)
        self.faults = faults
        self.dtype = result_dtype(config.tuple_size, config.result_payloads)
        self.results = ResultList(self.dtype, config.page_size)
        self.barrier = PhaseBarrier(node_id, config, self.transport, self.rt)
        self.inbox = _Inbox(self.rt)
        self._error: BaseException | None = None
        self._listener = None
        self.bytes = {"sent": 0, "received": 0, "payload": 0, "frame": 0, "result": 0}
        self.busy = {"compute": 0, "send": 0, "recv": 0}

    def emit(self, event: str) -> None:
        self.trace.emit(event, self.node_id)

    def _listen(self) -> None:
        bind_thread(self.node_id, "listener", "listener")
        try:
            while True:
                conn = self._listener.accept()
                if conn is None:
                    return
                magic = conn.read_exact(4)
                if magic == BARRIER_MAGIC:
                    self.barrier.arrive(conn)
                    continue
                kind = check_head(magic + conn.read_exact(1))
                pre = read_preamble_rest(conn, kind, self.n)
                self.inbox.put((pre.kind, pre.sender_node), (conn, pre))
        except BaseException as exc:
            if self._error is None:
                self._error = exc
            self.inbox.close()

    def _join_received(self, r: np.ndarray, source: int, lb: LocalBuffer) -> None:
        lb.append(join_fragment(r, self.s_probe, self.cfg.predicate, source, self.dtype))

    def _send(self, dest: int, out: dict) -> None:
        bind_thread(self.node_id, "send-0", "send")
        t0 = self.rt.now_ns()
        if self.faults is not None and self.faults.send_delay_s:
            self.rt.sleep(self.faults.send_delay_s)
        cfg = self.cfg
        addr = cfg.address(dest)
        conn = connect_with_retry(self.transport, addr.ip, addr.sport, initial_s=cfg.retry_initial_ms / 1000,
                                  factor=cfg.retry_factor, attempts=cfg.retry_attempts, sleep=self.rt.sleep)
        try:
            stats = send_partition_stream(conn, [Section(R_TABLE, self.r_table, range(cfg.num_buckets))],
                                          self.node_id)
        finally:
            conn.close()
        out["stats"] = stats
        out["bytes"] = conn.bytes_sent
        out["ns"] = self.rt.now_ns() - t0

    def _receive(self, src: int) -> tuple[np.ndarray, int]:
        conn, pre = self.inbox.take((KIND_PARTITION, src), self.cfg.io_timeout_s)
        if pre.table_id != R_TABLE or pre.tuple_size != self.cfg.tuple_size:
            raise WireError(f"unexpected section header {pre}")
        parts = []
        recv_partition_section(conn, pre, lambda b, t, _n: parts.append(t))
        send_ack(conn)
        conn.close()
        self.bytes["received"] += conn.bytes_received
        if parts:
            return np.concatenate(parts), pre.sender_node
        return np.empty(0, dtype=tuple_dtype(self.cfg.tuple_size)), pre.sender_node

    def run(self) -> NodeResult:
        try:
            return self._run()
        except NodeFailure:
            raise
        except BaseException as exc:
            err = self._error or exc
            raise NodeFailure(self.node_id, categorize(err), str(err)) from err
        finally:
            self.inbox.close()
            if self._listener is not None:
                self._listener.close()

    def prepare(self) -> None:
        cfg = self.cfg
        bind_thread(self.node_id, "main", "compute")
        self.emit(f"start n={self.n} nc=1 ns=1 nr=1 sink={cfg.sink_id} mode={cfg.join_mode} engine=barrier")
        self.r_table = build_hash_table(self.r_part, cfg.num_buckets)
        self.s_probe = Probe(self.s_part.tuples)
        me = cfg.address(self.node_id)
        try:
            self._listener = self.transport.listen(me.ip, me.sport)
        except OSError as exc:
            raise NodeFailure(self.node_id, "transport", f"cannot listen on {me.ip}:{me.sport}: {exc}") from exc

    def _run(self) -> NodeResult:
        cfg, rt = self.cfg, self.rt
        if self._listener is None:
            self.prepare()
        bind_thread(self.node_id, "main", "compute")
        listener = rt.spawn(f"b{self.node_id}-listener", self._listen)

        t_start = rt.now_ns()
        lb = LocalBuffer(0, self.results, cfg.local_buffer_blocks)
        t0 = rt.now_ns()
        self._join_received(self.r_part.tuples, self.node_id, lb)
        self.busy["compute"] += rt.now_ns() - t0
        for k in range(1, self.n):
            r, s = ring_peers(self.node_id, k, self.n)
            self.emit(f"ring-phase k={k} send={r} recv={s}")
            out: dict = {}
            sender = rt.spawn(f"b{self.node_id}-send-{k}", self._guarded_send, r, out)
            t0 = rt.now_ns()
            received, source = self._receive(s)
            t1 = rt.now_ns()
            self._join_received(received, source, lb)
            t2 = rt.now_ns()
            self.busy["recv"] += t1 - t0
            self.busy["compute"] += t2 - t1
            if not sender.join(cfg.run_timeout_s):
                raise NodeTimeout(f"phase {k} send to node {r} did not finish")
            if "error" in out:
                raise out["error"]
            self.busy["send"] += out["ns"]
            self.bytes["sent"] += out["bytes"]
            self.bytes["payload"] += out["stats"].payload_bytes
            self.bytes["frame"] += out["stats"].frame_bytes
            barrier_wait(self.barrier, self.node_id)
            self.emit(f"cluster-barrier gen={self.barrier.generation}")
        lb.flush()
        t_join = rt.now_ns()
        self.emit(f"join-done span_ns={t_join - t_start}")

        remote: dict[int, list[np.ndarray]] = {}
        t_results = t_join
        if self.is_sink:
            for _ in range(self.n - 1):
                conn, pre = self.inbox.take_first(lambda k: k[0] == KIND_RESULT, cfg.io_timeout_s)
                remote[pre.sender_node] = recv_result_stream(conn, pre, self.dtype)
                conn.close()
                self.bytes["received"] += conn.bytes_received
            t_results = rt.now_ns()
        else:
            sink = cfg.address(cfg.sink_id)
            conn = connect_with_retry(self.transport, sink.ip, sink.sport, initial_s=cfg.retry_initial_ms / 1000,
                                      factor=cfg.retry_factor, attempts=cfg.retry_attempts, sleep=rt.sleep)
            try:
                stats = send_result_stream(conn, [b.view() for b in self.results.blocks], self.node_id,
                                           self.dtype.itemsize)
            finally:
                conn.close()
            self.bytes["result"] += stats.payload_bytes
            self.bytes["sent"] += conn.bytes_sent
        self._listener.close()
        listener.join(5.0)
        if self._error is not None:
            raise self._error
        self.emit("phase DONE")

        local = self.results.entries()
        results = None
        counts = {}
        if self.is_sink:
            parts = [local]
            for src in sorted(remote):
                counts[src] = sum(len(b) for b in remote[src])
                parts.extend(remote[src])
            results = np.concatenate(parts)
        report = LoadReport(
            node_id=self.node_id, compute_time_ns=self.busy["compute"], send_time_ns=self.busy["send"],
            recv_time_ns=self.busy["recv"], join_span_ns=t_join - t_start, bytes_sent=self.bytes["sent"],
            bytes_received=self.bytes["received"], payload_bytes_sent=self.bytes["payload"],
            frame_bytes_sent=self.bytes["frame"], result_bytes_sent=self.bytes["result"],
            result_entries=len(local),
            cluster_span_ns=(max(t_join, t_results) - t_start) if self.is_sink else None,
        )
        return NodeResult(self.node_id, report, local, results, counts)

    def _guarded_send(self, dest: int, out: dict) -> None:
        try:
            self._send(dest, out)
        except BaseException as exc:
            out["error"] = exc


def distributed_join_barrier(r_part: Partition, s_part: Partition, config: ClusterConfig, node_id: int,
                             **kwargs) -> NodeResult:
    """Run one baseline node; ``local_results`` is T_i."""
    return BaselineNode(config, node_id, r_part, s_part, **kwargs).run()
