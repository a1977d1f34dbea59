"""Event trace recording, JSON-lines export, and the per-node order checker."""

from __future__ import annotations

import json
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable

_ctx = threading.local()


def bind_thread(node: int, thread: str, role: str) -> None:
    """Attach trace identity to the calling OS thread."""
    _ctx.node, _ctx.thread, _ctx.role = node, thread, role


def current_identity() -> tuple[int, str, str]:
    return (getattr(_ctx, "node", -1), getattr(_ctx, "thread", threading.current_thread().name),
            getattr(_ctx, "role", "main"))


@dataclass(frozen=True)
class TraceEvent:
    node: int
    thread: str
    role: str
    event: str
    t_ns: int

    @property
    def verb(self) -> str:
        return self.event.split(" ", 1)[0]

    @property
    def words(self) -> list[str]:
        return [w for w in self.event.split() if "=" not in w]

    @property
    def args(self) -> dict[str, str]:
        return dict(w.split("=", 1) for w in self.event.split() if "=" in w)


class Trace:
    """Append-only, thread-safe event log."""

    def __init__(self, clock: Callable[[], int], enabled: bool = True):
        self._clock = clock
        self.enabled = enabled
        self.events: list[TraceEvent] = []
        self._lock = threading.Lock()

    def emit(self, event: str, node: int | None = None) -> None:
        if not self.enabled:
            return
        n, thread, role = current_identity()
        with self._lock:
            self.events.append(TraceEvent(n if node is None else node, thread, role, event, self._clock()))

    def queue_hook(self, node: int):
        """Callback for :class:`~shardjoin.events.BoundedQueue` ``on_event``."""
        if not self.enabled:
            return None

        def hook(op: str, queue: str, record) -> None:
            self.emit(f"{op} {queue} {record.label()}", node)

        return hook

    def for_node(self, node: int) -> list[TraceEvent]:
        return [e for e in self.events if e.node == node]

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(asdict(e)) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> Trace:
        trace = cls(clock=lambda: 0)
        with open(path) as fh:
            trace.events = [TraceEvent(**json.loads(line)) for line in fh if line.strip()]
        return trace

    @classmethod
    def of(cls, events: Iterable[TraceEvent]) -> Trace:
        trace = cls(clock=lambda: 0)
        trace.events = list(events)
        return trace

    def __len__(self) -> int:
        return len(self.events)


PHASES = ("LOADING", "SHUFFLING", "JOINING", "RESULT_TRANSFER", "DONE")


def _queue_op(e: TraceEvent) -> tuple[str, str, str] | None:
    """("push"|"pop", queue, record type) for queue events."""
    w = e.words
    if len(w) >= 3 and w[0] in ("push", "pop"):
        return w[0], w[1], w[2]
    return None


def check_trace(trace: Trace) -> list[str]:
    """Per-node ordering violations of a barrier-free run; empty when the trace is well formed."""
    by_node: dict[int, list[TraceEvent]] = defaultdict(list)
    for e in trace.events:
        by_node[e.node].append(e)
    out: list[str] = []
    for node in sorted(by_node):
        out.extend(f"node {node}: {v}" for v in _check_node(node, by_node[node]))
    return out


def _check_node(node: int, events: list[TraceEvent]) -> list[str]:
    v: list[str] = []
    start = next((e for e in events if e.verb == "start"), None)
    if start is None:
        return ["start event missing"]
    a = start.args
    n, nc, ns, nr, sink = (int(a[k]) for k in ("n", "nc", "ns", "nr", "sink"))
    is_sink = node == sink

    def where(pred) -> list[int]:
        return [i for i, e in enumerate(events) if pred(e)]

    def q(op: str, queue: str, kind: str) -> list[int]:
        return where(lambda e: _queue_op(e) == (op, queue, kind))

    def first(idx: list[int]) -> int | None:
        return idx[0] if idx else None

    if where(lambda e: e.verb == "abort"):
        v.append("node aborted")
    if where(lambda e: e.verb == "cluster-barrier"):
        v.append("cluster-wide barrier used by a barrier-free node")

    # phases advance monotonically and reach DONE
    seen = [e.words[1] for e in events if e.verb == "phase"]
    ranks = [PHASES.index(p) for p in seen if p in PHASES]
    if ranks != sorted(set(ranks)):
        v.append(f"phases not monotone: {seen}")
    if "DONE" not in seen:
        v.append("node never reached DONE")

    # Step 1 precedes every receipt
    sched = first(where(lambda e: e.verb == "schedule"))
    recv_part = where(lambda e: e.verb == "recv-done" and e.args.get("kind") == "partition")
    if sched is None:
        v.append("schedule (step 1) absent")
    else:
        expected = ",".join(str((node + k) % n) for k in range(1, n))
        if events[sched].args.get("d", "") != expected:
            v.append(f"schedule {events[sched].args.get('d')} != ring order {expected}")
        if recv_part and recv_part[0] < sched:
            v.append("partition received before the schedule was generated")
    if len(recv_part) != n - 1:
        v.append(f"{len(recv_part)} partition streams received, expected {n - 1}")

    # Step 2/3: every JOIN precedes the JOIN_EXIT fan-out
    je_push, je_pop = q("push", "Qc", "JOIN_EXIT"), q("pop", "Qc", "JOIN_EXIT")
    if len(je_push) != nc or len(je_pop) != nc:
        v.append(f"JOIN_EXIT pushed {len(je_push)} / popped {len(je_pop)} times, expected {nc}")
    join_push, join_pop = q("push", "Qc", "JOIN"), q("pop", "Qc", "JOIN")
    if je_push and join_push and join_push[-1] > je_push[0]:
        v.append("JOIN pushed after JOIN_EXIT")
    if je_pop and join_pop and join_pop[-1] > je_pop[0]:
        v.append("JOIN popped after JOIN_EXIT")
    shuffle = where(lambda e: e.verb == "shuffle-complete")
    if len(shuffle) != 1:
        v.append(f"shuffle-complete seen {len(shuffle)} times")
    elif (recv_part and recv_part[-1] > shuffle[0]) or (je_push and je_push[0] < shuffle[0]):
        v.append("shuffle-complete out of order with receipts or JOIN_EXIT")

    # Step 4: RESULT_READY after the local barrier
    rr_push, rr_pop = q("push", "Qs", "RESULT_READY"), q("pop", "Qs", "RESULT_READY")
    if len(rr_push) != 1 or len(rr_pop) != 1:
        v.append(f"RESULT_READY pushed {len(rr_push)} / popped {len(rr_pop)} times, expected 1")
    else:
        merges = where(lambda e: e.verb == "merge")
        barrier = where(lambda e: e.verb == "barrier-enter")
        if len(merges) != nc or merges[-1] > rr_push[0]:
            v.append("RESULT_READY pushed before every compute thread merged its buffer")
        if len(barrier) != nc or barrier[-1] > rr_push[0]:
            v.append("RESULT_READY pushed before local barrier completion")

    # Step 5: EXIT chains on Qs and Qr
    s_exit_push, s_exit_pop = q("push", "Qs", "EXIT"), q("pop", "Qs", "EXIT")
    if len(s_exit_push) != ns + 1 or len(s_exit_pop) != ns:
        v.append(f"Qs EXIT chain incomplete: {len(s_exit_push)} pushes, {len(s_exit_pop)} pops for {ns} senders")
    elif rr_pop and s_exit_push[0] < rr_pop[0]:
        v.append("Qs EXIT before RESULT_READY was handled")
    sent = where(lambda e: e.verb == "send-done" and e.args.get("kind") == "partition")
    if len(sent) != n - 1:
        v.append(f"{len(sent)} partition transfers completed, expected {n - 1}")
    elif sent and s_exit_pop and sent[-1] > s_exit_pop[-1]:
        v.append("partition transfer finished after the last sender exited")
    r_exit_push, r_exit_pop = q("push", "Qr", "EXIT"), q("pop", "Qr", "EXIT")
    if len(r_exit_push) != nr + 1 or len(r_exit_pop) != nr:
        v.append(f"Qr EXIT chain incomplete: {len(r_exit_push)} pushes, {len(r_exit_pop)} pops for {nr} receivers")
    elif r_exit_push:
        if shuffle and r_exit_push[0] < shuffle[0]:
            v.append("Qr EXIT before the shuffle completed")
        if not is_sink and rr_pop and r_exit_push[0] < rr_pop[0]:
            v.append("Qr EXIT before RESULT_READY was handled")

    # Step 5 -> 6 at the sink
    c_exit_push, c_exit_pop = q("push", "Qc", "EXIT"), q("pop", "Qc", "EXIT")
    if is_sink:
        res = where(lambda e: e.verb == "results-complete")
        recv_res = where(lambda e: e.verb == "recv-done" and e.args.get("kind") == "result")
        if len(recv_res) != n - 1:
            v.append(f"sink received {len(recv_res)} result streams, expected {n - 1}")
        if n > 1 and len(res) != 1:
            v.append("results-complete missing at the sink")
        if not c_exit_push or not c_exit_pop:
            v.append("sink compute EXIT absent")
        else:
            qc_events = where(lambda e: (_queue_op(e) or ("", ""))[1] == "Qc")
            if len(c_exit_push) != 1 or len(c_exit_pop) != 1:
                v.append("sink compute EXIT pushed or popped more than once")
            elif res and c_exit_push[0] < res[0]:
                v.append("sink compute EXIT before all results arrived")
            elif rr_push and c_exit_pop[0] < rr_push[0]:
                v.append("sink compute EXIT consumed before RESULT_READY")
            elif qc_events[-1] != c_exit_pop[0]:
                v.append("sink compute EXIT is not the last compute-queue event")
            if not where(lambda e: e.verb == "print-result"):
                v.append("sink never finalized its result")
    elif c_exit_push or c_exit_pop:
        v.append("compute EXIT at a non-sink node")

    # HTF lifecycle: one free per frame, after all of its JOINs
    created = {e.args["h"] for e in events if e.verb == "htf"}
    frees: dict[str, list[int]] = defaultdict(list)
    for i in where(lambda e: e.verb == "free"):
        frees[events[i].args["h"]].append(i)
    last_pop: dict[str, int] = {}
    for i in join_pop:
        last_pop[events[i].args["h"]] = i
    bad_free = [h for h in created if len(frees.get(h, ())) != 1]
    if bad_free:
        v.append(f"HTFs not freed exactly once: {sorted(bad_free, key=int)}")
    late = [h for h, i in last_pop.items() if frees.get(h) and frees[h][0] < i]
    if late:
        v.append(f"JOIN consumed after its HTF was freed: {sorted(late, key=int)}")
    return v
