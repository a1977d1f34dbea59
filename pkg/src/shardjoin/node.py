"""Barrier-free node engine.

One listener, ``n_send`` sender, ``n_recv`` receiver and ``n_compute`` compute
threads coordinate through the queues Qc, Qs, Qr. Progress is driven only by
counted events: a node learns that the shuffle is over when it has received
N-1 partition streams (plus its own local partition), the sink learns that the
join is over when N-1 result streams have arrived. The only synchronization
point is the compute-thread barrier inside one node.

Step numbering in trace events follows the event diagram:

1. schedule generated, PARTITION_READY records queued
2. partition streams received, JOIN records per bucket
3. JOIN_EXIT fan-out once the shuffle is complete
4. RESULT_READY after the local barrier
5. EXIT chains on Qs and Qr
6. sink: compute EXIT and result finalization
"""

from __future__ import annotations

import enum
import logging
import socket
from dataclasses import dataclass, field

import numpy as np

from .config import BROADCAST, ClusterConfig, ConfigError
from .events import (COMPUTE_EXIT, RECEIVE_EXIT, SEND_EXIT, BoundedQueue, ComputeRecord, EventType,
                     QueueClosed, ReceiveRecord, SendRecord)
from .join import Probe, join_fragment, sort_within_buckets
from .metrics import LoadReport
from .model import (R_TABLE, S_TABLE, HashTableFrame, LocalBuffer, MemoryPool, Partition,
                    ProtocolViolation, ResultList, assign_buckets, build_hash_table, result_dtype)
from .runtime import ThreadRuntime
from .trace import Trace, bind_thread
from .transport import TcpTransport, TransportError, connect_with_retry
from .wire import (KIND_PARTITION, WireError, read_preamble, recv_partition_section, recv_result_stream,
                   select_content, send_ack, send_partition_stream, send_result_stream)

log = logging.getLogger("shardjoin.node")


class NodePhase(enum.IntEnum):
    LOADING = 0
    SHUFFLING = 1
    JOINING = 2
    RESULT_TRANSFER = 3
    DONE = 4


class NodeTimeout(RuntimeError):
    pass


class BarrierBroken(RuntimeError):
    pass


class NodeFailure(RuntimeError):
    """A node run failed; ``category`` is one of config, transport, protocol, timeout, internal."""

    def __init__(self, node_id: int, category: str, message: str):
        super().__init__(f"node {node_id}: {category} error: {message}")
        self.node_id = node_id
        self.category = category
        self.message = message


def categorize(exc: BaseException) -> str:
    if isinstance(exc, NodeFailure):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (WireError, ProtocolViolation)):
        return "protocol"
    if isinstance(exc, NodeTimeout):
        return "timeout"
    if isinstance(exc, (ConnectionError, TransportError, socket.timeout, OSError)):
        return "transport"
    return "internal"


def shuffle_schedule(node_id: int, config: ClusterConfig) -> list[SendRecord]:
    """PARTITION_READY records for every peer, clockwise from ``node_id``."""
    n = config.n
    out = []
    for k in range(1, n):
        d = (node_id + k) % n
        addr = config.address(d)
        out.append(SendRecord(EventType.PARTITION_READY, addr.ip, addr.sport, d, d == config.sink_id))
    return out


def ring_peers(node_id: int, k: int, n: int) -> tuple[int, int]:
    """(receiver, sender) of ``node_id`` in ring phase ``k``."""
    if not 1 <= k <= n - 1:
        raise ValueError(f"phase {k} outside [1, {n - 1}]")
    return (node_id + k) % n, (node_id - k + n) % n


class LocalBarrier:
    """Reusable rendezvous of the compute threads of one node. No network I/O."""

    def __init__(self, parties: int, runtime):
        self.parties = parties
        self._cond = runtime.condition()
        self._count = 0
        self.generation = 0
        self._broken = False

    def wait(self) -> int:
        with self._cond:
            if self._broken:
                raise BarrierBroken("local barrier aborted")
            gen = self.generation
            arrival = self._count
            self._count += 1
            if self._count == self.parties:
                self._count = 0
                self.generation += 1
                self._cond.notify_all()
                return arrival
            while gen == self.generation and not self._broken:
                self._cond.wait()
            if gen == self.generation:
                raise BarrierBroken("local barrier aborted")
            return arrival

    def abort(self) -> None:
        with self._cond:
            self._broken = True
            self._cond.notify_all()


@dataclass
class ShuffleProgress:
    """Partition/result counters and the two completion flags of one node."""

    expected_partitions: int
    expected_results: int | None
    partitions_received: int = 0
    results_received: int = 0
    shuffle_flag: bool = False
    res_flag: bool = False
    exit_pushed: bool = False

    def __post_init__(self):
        # non-sink nodes never collect results, so their flag stays unset
        if self.expected_results == 0:
            self.res_flag = True

    def partition_done(self) -> bool:
        self.partitions_received += 1
        if self.partitions_received > self.expected_partitions:
            raise ProtocolViolation("more partition streams than nodes")
        if self.partitions_received == self.expected_partitions:
            self.shuffle_flag = True
            return True
        return False

    def result_done(self) -> bool:
        if self.expected_results is None:
            raise ProtocolViolation("result stream received by a non-sink node")
        self.results_received += 1
        if self.results_received > self.expected_results:
            raise ProtocolViolation("more result streams than peers")
        if self.results_received == self.expected_results:
            self.res_flag = True
            return True
        return False

    def take_exit(self) -> bool:
        if self.shuffle_flag and self.res_flag and not self.exit_pushed:
            self.exit_pushed = True
            return True
        return False


@dataclass
class Faults:
    """Test-only perturbations."""

    slow_compute_s: float = 0.0
    slow_compute_thread: int | None = 0
    slow_receive_s: float = 0.0
    send_delay_s: float = 0.0
    drop_bucket: tuple[int, int] | None = None
    skip_local_barrier: bool = False

    def skip(self, table_id: int, bucket: int) -> bool:
        return self.drop_bucket is not None and self.drop_bucket == (table_id, bucket)


@dataclass
class NodeResult:
    node_id: int
    report: LoadReport
    local_results: np.ndarray
    results: np.ndarray | None = None
    remote_counts: dict[int, int] = field(default_factory=dict)
    htf_count: int = 0
    pool_capacity: int = 0


class Node:
    def __init__(self, config: ClusterConfig, node_id: int, r_part: Partition, s_part: Partition, *,
                 runtime=None, transport=None, trace: Trace | None = None, faults: Faults | None = None):
        if not 0 <= node_id < config.n:
            raise ConfigError(f"node id {node_id} not in config")
        self.cfg = config
        self.node_id = node_id
        self.n = config.n
        self.is_sink = node_id == config.sink_id
        self.r_part = r_part
        self.s_part = s_part
        self.rt = runtime or ThreadRuntime()
        self.transport = transport or TcpTransport(io_timeout=config.io_timeout_s)
        self.trace = trace if trace is not None else Trace(self.rt.now_ns, enabled=config.trace)
        self.faults = faults or Faults()
        self.broadcast = config.join_mode == BROADCAST
        self.predicate = config.predicate
        self.dtype = result_dtype(config.tuple_size, config.result_payloads)

        hook = self.trace.queue_hook(node_id)
        cap = config.queue_capacity
        self.qc: BoundedQueue[ComputeRecord] = BoundedQueue("Qc", cap, self.rt, hook)
        self.qs: BoundedQueue[SendRecord] = BoundedQueue("Qs", cap, self.rt, hook)
        self.qr: BoundedQueue[ReceiveRecord] = BoundedQueue("Qr", cap, self.rt, hook)
        self.pool = MemoryPool(config.pool_bytes, self.rt)
        self.barrier = LocalBarrier(config.n_compute, self.rt)
        self.results = ResultList(self.dtype, config.page_size)
        self.progress = ShuffleProgress(self.n, self.n - 1 if self.is_sink else None)
        self.phase = NodePhase.LOADING

        self._lock = self.rt.lock()
        self._frames: list[HashTableFrame] = []
        self._senders_seen: set[int] = set()
        self._remote_results: dict[int, list[np.ndarray]] = {}
        self._conns: set = set()
        self._listener = None
        self._error: BaseException | None = None
        self._busy = {"compute": [0] * config.n_compute, "send": [0] * config.n_send,
                      "recv": [0] * config.n_recv}
        self._stats = {"bytes_sent": 0, "bytes_received": 0, "payload": 0, "frame": 0, "result": 0}
        self._t_start = 0
        self._t_join_done: int | None = None
        self._t_results: int | None = None
        self._frags: list[tuple[list, list]] = []

    # -- helpers ------------------------------------------------------------
    def emit(self, event: str) -> None:
        self.trace.emit(event, self.node_id)

    def _set_phase(self, phase: NodePhase) -> None:
        with self._lock:
            if phase <= self.phase:
                return
            self.phase = phase
        self.emit(f"phase {phase.name}")

    def _add(self, key: str, value: int) -> None:
        with self._lock:
            self._stats[key] += value

    def _track(self, conn) -> None:
        with self._lock:
            self._conns.add(conn)
            aborted = self._error is not None
        if aborted:
            conn.abort()

    def _untrack(self, conn) -> None:
        with self._lock:
            self._conns.discard(conn)
        conn.close()

    def _new_frame(self, source: int, table_id: int, pool: MemoryPool | None) -> HashTableFrame:
        with self._lock:
            frame = HashTableFrame(len(self._frames), source, table_id, self.cfg.num_buckets, pool, self.rt)
            self._frames.append(frame)
        self.emit(f"htf h={frame.htf_index} src={source} t={table_id}")
        return frame

    def _free_frame(self, frame: HashTableFrame) -> None:
        frame.free()
        self.emit(f"free h={frame.htf_index}")

    def abort(self, exc: BaseException) -> None:
        with self._lock:
            if self._error is not None:
                return
            self._error = exc
            conns = list(self._conns)
        log.error("node %d aborting: %s", self.node_id, exc)
        self.emit(f"abort {categorize(exc)}")
        for q in (self.qc, self.qs, self.qr):
            q.close()
        self.pool.close()
        self.barrier.abort()
        if self._listener is not None:
            self._listener.close()
        for c in conns:
            c.abort()

    def _guard(self, role: str, tid: int, fn):
        def body():
            bind_thread(self.node_id, f"{role}-{tid}" if tid >= 0 else role, role)
            try:
                if tid >= 0:
                    fn(tid)
                else:
                    fn()
            except BaseException as exc:
                # after an abort, the other threads' closed-queue errors are noise
                self.abort(exc)
            self.emit("thread-exit")
        return body

    # -- Step 2: receive side ---------------------------------------------------
    def _listen(self) -> None:
        while True:
            conn = self._listener.accept()
            if conn is None:
                return
            self._track(conn)
            try:
                pre = read_preamble(conn, self.n)
            except (TransportError, ConnectionError) as exc:
                log.warning("node %d: dropped connection before preamble: %s", self.node_id, exc)
                self._untrack(conn)
                continue
            kind = EventType.PARTITION_READY if pre.kind == KIND_PARTITION else EventType.RESULT_READY
            self.qr.push(ReceiveRecord(kind, conn, pre))

    def _allocate(self, nbytes: int) -> None:
        if nbytes > self.pool.capacity:
            raise ConfigError(f"bucket of {nbytes} B can never fit the {self.pool.capacity} B pool")
        self.pool.allocate(nbytes)

    def _receive_partition(self, conn, pre) -> None:
        sender = pre.sender_node
        with self._lock:
            if sender == self.node_id or sender in self._senders_seen:
                raise ProtocolViolation(f"unexpected partition stream from node {sender}")
            self._senders_seen.add(sender)
        tables = (R_TABLE,) if self.broadcast else (R_TABLE, S_TABLE)
        for i, table in enumerate(tables):
            if i:
                pre = read_preamble(conn, self.n)
                if pre.kind != KIND_PARTITION or pre.sender_node != sender:
                    raise WireError("section preamble does not continue the stream")
            if pre.table_id != table or pre.num_buckets != self.cfg.num_buckets \
                    or pre.tuple_size != self.cfg.tuple_size:
                raise WireError(f"section header {pre} does not match the cluster config")
            frame = self._new_frame(sender, table, self.pool)

            def deliver(b, tuples, nbytes, frame=frame, table=table):
                if self.faults.slow_receive_s:
                    self.rt.sleep(self.faults.slow_receive_s)
                frame.put(b, tuples, nbytes)
                self.qc.push(ComputeRecord(EventType.JOIN, b, frame.htf_index, table))

            count = recv_partition_section(conn, pre, deliver, self._allocate, self.pool.release)
            if self.broadcast and frame.seal(count):
                self._free_frame(frame)
        send_ack(conn)
        self._add("bytes_received", conn.bytes_received)
        self.emit(f"recv-done src={sender} kind=partition")
        self._partition_arrived()

    def _partition_arrived(self) -> None:
        with self._lock:
            complete = self.progress.partition_done()
        if complete:
            self.emit("shuffle-complete")
            self._set_phase(NodePhase.JOINING)
            for _ in range(self.cfg.n_compute):
                self.qc.push(ComputeRecord(EventType.JOIN_EXIT))
        self._maybe_exit()

    def _receive_results(self, conn, pre) -> None:
        if not self.is_sink:
            raise ProtocolViolation(f"node {self.node_id} is not the sink but got results from {pre.sender_node}")
        blocks = recv_result_stream(conn, pre, self.dtype)
        with self._lock:
            if pre.sender_node in self._remote_results or pre.sender_node == self.node_id:
                raise ProtocolViolation(f"duplicate result stream from node {pre.sender_node}")
            self._remote_results[pre.sender_node] = blocks
            complete = self.progress.result_done()
        self._add("bytes_received", conn.bytes_received)
        self.emit(f"recv-done src={pre.sender_node} kind=result entries={sum(len(b) for b in blocks)}")
        if complete:
            self._t_results = self.rt.now_ns()
            self.emit("results-complete")
        self._maybe_exit()

    def _maybe_exit(self) -> None:
        with self._lock:
            go = self.progress.take_exit()
        if go:
            self.qr.push(RECEIVE_EXIT)

    def _recv_loop(self, tid: int) -> None:
        busy = 0
        try:
            while True:
                t_call = self.rt.now_ns()
                rec, waited = self.qr.pop_timed()
                t0 = self.rt.now_ns()
                busy += t0 - t_call - waited  # dequeue overhead is work, waiting is not
                if rec.type is EventType.EXIT:
                    if self.is_sink and tid == 0:
                        self.qc.push(COMPUTE_EXIT)
                    self.qr.push(RECEIVE_EXIT)
                    return
                conn = rec.socket
                try:
                    if rec.type is EventType.PARTITION_READY:
                        self._receive_partition(conn, rec.preamble)
                    else:
                        self._receive_results(conn, rec.preamble)
                finally:
                    self._untrack(conn)
                busy += self.rt.now_ns() - t0
        finally:
            self._busy["recv"][tid] = busy

    # -- Step 1 / 4 / 5: send side -------------------------------------------------
    def _connect(self, rec: SendRecord):
        cfg = self.cfg
        conn = connect_with_retry(self.transport, rec.dest_ip, rec.dest_sport,
                                  initial_s=cfg.retry_initial_ms / 1000, factor=cfg.retry_factor,
                                  attempts=cfg.retry_attempts, sleep=self.rt.sleep,
                                  should_stop=lambda: self._error is not None)
        self._track(conn)
        return conn

    def _send_partition(self, rec: SendRecord) -> None:
        if self.faults.send_delay_s:
            self.rt.sleep(self.faults.send_delay_s)
        conn = self._connect(rec)
        try:
            sections = select_content(self.cfg.join_mode, rec.dest_node, self.r_table, self.s_table, self.n)
            skip = self.faults.skip if self.faults.drop_bucket is not None else None
            stats = send_partition_stream(conn, sections, self.node_id, skip=skip)
        finally:
            self._untrack(conn)
        self._add("payload", stats.payload_bytes)
        self._add("frame", stats.frame_bytes)
        self._add("bytes_sent", conn.bytes_sent)
        self.emit(f"send-done d={rec.dest_node} kind=partition bytes={stats.payload_bytes}")

    def _send_results(self, rec: SendRecord) -> None:
        conn = self._connect(rec)
        try:
            blocks = [b.view() for b in self.results.blocks]
            stats = send_result_stream(conn, blocks, self.node_id, self.dtype.itemsize)
        finally:
            self._untrack(conn)
        self._add("result", stats.payload_bytes)
        self._add("bytes_sent", conn.bytes_sent)
        self.emit(f"send-done d={rec.dest_node} kind=result entries={self.results.entry_count()}")

    def _send_loop(self, tid: int) -> None:
        busy = 0
        try:
            while True:
                t_call = self.rt.now_ns()
                rec, waited = self.qs.pop_timed()
                t0 = self.rt.now_ns()
                busy += t0 - t_call - waited  # dequeue overhead is work, waiting is not
                if rec.type is EventType.EXIT:
                    self.qs.push(SEND_EXIT)
                    return
                if rec.type is EventType.PARTITION_READY:
                    self._send_partition(rec)
                else:
                    if self.is_sink:
                        self.emit("result-ignored")
                    else:
                        self._send_results(rec)
                    self.qs.push(SEND_EXIT)
                    if not self.is_sink:
                        self.qr.push(RECEIVE_EXIT)
                busy += self.rt.now_ns() - t0
        finally:
            self._busy["send"][tid] = busy

    # -- Step 2-4, 6: compute side -------------------------------------------------
    def _join_broadcast(self, rec: ComputeRecord, lb: LocalBuffer) -> None:
        frame = self._frames[rec.htfI]
        r = frame.get(rec.bI)
        if self.predicate.is_equality:
            probe = Probe(self.s_sorted.bucket(rec.bI), presorted=True)
        else:
            probe = self.s_probe
        lb.append(join_fragment(r, probe, self.predicate, frame.source_node, self.dtype))
        if frame.free_bucket(rec.bI):
            self._free_frame(frame)

    def _join_hashed(self, rec: ComputeRecord, lb: LocalBuffer) -> None:
        # Each (R fragment, S fragment) pair of a bucket is joined exactly once,
        # by whichever of the two registers second.
        frame = self._frames[rec.htfI]
        tuples = frame.get(rec.bI)
        mine = tuples if rec.tableI == R_TABLE else Probe(tuples)
        with self._lock:
            slots = self._frags[rec.bI]
            others = list(slots[1 - rec.tableI])
            slots[rec.tableI].append((frame, mine))
        for other, data in others:
            if rec.tableI == R_TABLE:
                lb.append(join_fragment(mine, data, self.predicate, frame.source_node, self.dtype))
            else:
                lb.append(join_fragment(data, mine, self.predicate, other.source_node, self.dtype))

    def _release_fragments(self) -> None:
        for frame in self._frames:
            for b in frame.resident():
                frame.free_bucket(b)
            self._free_frame(frame)

    def _compute_loop(self, tid: int) -> None:
        lb = LocalBuffer(tid, self.results, self.cfg.local_buffer_blocks)
        join = self._join_broadcast if self.broadcast else self._join_hashed
        slow = self.faults.slow_compute_s
        slow_here = slow and self.faults.slow_compute_thread in (None, tid)
        busy = 0
        try:
            while True:
                t_call = self.rt.now_ns()
                rec, waited = self.qc.pop_timed()
                t0 = self.rt.now_ns()
                busy += t0 - t_call - waited  # dequeue overhead is work, waiting is not
                if rec.type is EventType.JOIN:
                    if self.phase == NodePhase.RESULT_TRANSFER:
                        raise ProtocolViolation(f"JOIN {rec} after the local join completed")
                    join(rec, lb)
                    if slow_here:
                        self.rt.sleep(slow)
                elif rec.type is EventType.JOIN_EXIT:
                    lb.flush()
                    self.emit(f"merge entries={lb.produced}")
                    busy += self.rt.now_ns() - t0
                    if not self.faults.skip_local_barrier:
                        self.emit("barrier-enter")
                        self.barrier.wait()
                        self.emit("barrier-exit")
                    t0 = self.rt.now_ns()
                    if tid == 0:
                        if not self.broadcast:
                            self._release_fragments()
                        self._t_join_done = self.rt.now_ns()
                        self.emit(f"join-done span_ns={self._t_join_done - self._t_start}")
                        self._set_phase(NodePhase.RESULT_TRANSFER)
                        sink = self.cfg.address(self.cfg.sink_id)
                        self.qs.push(SendRecord(EventType.RESULT_READY, sink.ip, sink.sport,
                                                self.cfg.sink_id, True))
                    if tid != 0 or not self.is_sink:
                        busy += self.rt.now_ns() - t0
                        return
                else:
                    if not (self.is_sink and tid == 0):
                        raise ProtocolViolation("compute EXIT outside sink thread 0")
                    total = self.results.entry_count() + sum(
                        len(b) for blocks in self._remote_results.values() for b in blocks)
                    self.emit(f"print-result entries={total}")
                    busy += self.rt.now_ns() - t0
                    return
                busy += self.rt.now_ns() - t0
        finally:
            self._busy["compute"][tid] = busy

    # -- driver ------------------------------------------------------------------
    def _load(self) -> None:
        cfg = self.cfg
        self.r_table = build_hash_table(self.r_part, cfg.num_buckets)
        self.s_table = build_hash_table(self.s_part, cfg.num_buckets)
        if self.broadcast:
            self.s_sorted = sort_within_buckets(self.s_table)
            self.s_probe = Probe(self.s_part.tuples)
        else:
            self._frags = [([], []) for _ in range(cfg.num_buckets)]

    def _local_records(self) -> list[ComputeRecord]:
        """Frames over the node's own data and a JOIN per non-empty bucket."""
        out = []
        if self.broadcast:
            tables = [(R_TABLE, self.r_table, range(self.cfg.num_buckets))]
        else:
            mine = assign_buckets(self.node_id, self.n, self.cfg.num_buckets)
            tables = [(R_TABLE, self.r_table, mine), (S_TABLE, self.s_table, mine)]
        for table_id, table, buckets in tables:
            frame = self._new_frame(self.node_id, table_id, None)
            nonempty = table.nonempty_buckets(buckets)
            for b in nonempty:
                frame.put(b, table.bucket(b))
                out.append(ComputeRecord(EventType.JOIN, b, frame.htf_index, table_id))
            if self.broadcast and frame.seal(len(nonempty)):
                self._free_frame(frame)
        return out

    def prepare(self) -> None:
        """LOADING: build the hash tables, wrap the local ones in frames, bind the server port."""
        cfg = self.cfg
        bind_thread(self.node_id, "main", "main")
        self.emit(f"start n={self.n} nc={cfg.n_compute} ns={cfg.n_send} nr={cfg.n_recv} "
                  f"sink={cfg.sink_id} mode={cfg.join_mode}")
        self.emit(f"phase {NodePhase.LOADING.name}")
        self._load()
        self._local = self._local_records()
        me = cfg.address(self.node_id)
        try:
            self._listener = self.transport.listen(me.ip, me.sport)
        except OSError as exc:
            raise NodeFailure(self.node_id, "transport", f"cannot listen on {me.ip}:{me.sport}: {exc}") from exc
        # handler threads start idle on their queues so thread creation stays out of the join span
        rt = self.rt
        self._handles = [rt.spawn(f"n{self.node_id}-compute-{t}", self._guard("compute", t, self._compute_loop))
                         for t in range(cfg.n_compute)]
        self._handles += [rt.spawn(f"n{self.node_id}-send-{t}", self._guard("send", t, self._send_loop))
                          for t in range(cfg.n_send)]
        self._receivers = [rt.spawn(f"n{self.node_id}-recv-{t}", self._guard("recv", t, self._recv_loop))
                           for t in range(cfg.n_recv)]

    def run(self) -> NodeResult:
        cfg = self.cfg
        rt = self.rt
        if self._listener is None:
            self.prepare()
        bind_thread(self.node_id, "main", "main")
        self._t_start = rt.now_ns()
        self._set_phase(NodePhase.SHUFFLING)
        schedule = shuffle_schedule(self.node_id, cfg)
        self.emit("schedule d=" + ",".join(str(r.dest_node) for r in schedule))
        local = self._local
        handles, receivers = self._handles, self._receivers
        listener = rt.spawn(f"n{self.node_id}-listener", self._guard("listener", -1, self._listen))
        try:
            for rec in schedule:
                self.qs.push(rec)
            for rec in local:
                self.qc.push(rec)
            self._partition_arrived()
        except (QueueClosed, BarrierBroken):
            pass
        except BaseException as exc:
            self.abort(exc)

        deadline = rt.now_ns() + int(cfg.run_timeout_s * 1e9)

        def wait(h) -> None:
            remaining = (deadline - rt.now_ns()) / 1e9
            if not h.join(max(remaining, 0.0)):
                self.abort(NodeTimeout(f"{h.name} still running after {cfg.run_timeout_s} s"))
                h.join(5.0)

        for h in receivers:
            wait(h)
        self._listener.close()
        for h in [listener, *handles]:
            wait(h)
        with self._lock:
            conns = list(self._conns)
        for c in conns:
            c.close()
        if self._error is not None:
            raise NodeFailure(self.node_id, categorize(self._error), str(self._error)) from self._error
        self._set_phase(NodePhase.DONE)
        return self._result()

    def _result(self) -> NodeResult:
        cfg = self.cfg
        local = self.results.entries()
        results = None
        remote_counts = {}
        if self.is_sink:
            parts = [local]
            for src in sorted(self._remote_results):
                blocks = self._remote_results[src]
                remote_counts[src] = sum(len(b) for b in blocks)
                parts.extend(blocks)
            results = np.concatenate(parts) if parts else local
        span = (self._t_join_done or self._t_start) - self._t_start
        cluster_span = None
        if self.is_sink:
            done = max(t for t in (self._t_join_done, self._t_results) if t is not None)
            cluster_span = done - self._t_start
        report = LoadReport(
            node_id=self.node_id,
            compute_time_ns=sum(self._busy["compute"]),
            send_time_ns=sum(self._busy["send"]),
            recv_time_ns=sum(self._busy["recv"]),
            join_span_ns=span,
            bytes_sent=self._stats["bytes_sent"],
            bytes_received=self._stats["bytes_received"],
            payload_bytes_sent=self._stats["payload"],
            frame_bytes_sent=self._stats["frame"],
            result_bytes_sent=self._stats["result"],
            recv_blocked_ns=self.pool.blocked_ns,
            pool_peak_bytes=self.pool.peak,
            result_entries=len(local),
            cluster_span_ns=cluster_span,
            n_compute=cfg.n_compute, n_send=cfg.n_send, n_recv=cfg.n_recv,
        )
        return NodeResult(self.node_id, report, local, results, remote_counts, len(self._frames),
                          self.pool.capacity)


def run_node(config: ClusterConfig, node_id: int, r_part: Partition, s_part: Partition, **kwargs) -> NodeResult:
    """Run one node to completion and return its report (and, at the sink, all results)."""
    return Node(config, node_id, r_part, s_part, **kwargs).run()
