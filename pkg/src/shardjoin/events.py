"""Typed event records and the bounded blocking queues Qc, Qs, Qr."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Generic, TypeVar


class EventType(enum.Enum):
    JOIN = "JOIN"
    JOIN_EXIT = "JOIN_EXIT"
    EXIT = "EXIT"
    PARTITION_READY = "PARTITION_READY"
    RESULT_READY = "RESULT_READY"


COMPUTE_EVENTS = frozenset({EventType.JOIN, EventType.JOIN_EXIT, EventType.EXIT})
SEND_EVENTS = frozenset({EventType.PARTITION_READY, EventType.RESULT_READY, EventType.EXIT})
RECEIVE_EVENTS = SEND_EVENTS

NO_INDEX = -1


@dataclass(frozen=True)
class ComputeRecord:
    type: EventType
    bI: int = NO_INDEX
    htfI: int = NO_INDEX
    tableI: int = NO_INDEX

    def __post_init__(self):
        if self.type not in COMPUTE_EVENTS:
            raise ValueError(f"{self.type} is not a compute event")
        if self.type is EventType.JOIN and min(self.bI, self.htfI, self.tableI) < 0:
            raise ValueError("JOIN needs bucket, frame and table indexes")

    def label(self) -> str:
        if self.type is EventType.JOIN:
            return f"JOIN b={self.bI} h={self.htfI} t={self.tableI}"
        return self.type.value


@dataclass(frozen=True)
class SendRecord:
    type: EventType
    dest_ip: str | None = None
    dest_sport: int | None = None
    dest_node: int | None = None
    dest_is_sink: bool = False

    def __post_init__(self):
        if self.type not in SEND_EVENTS:
            raise ValueError(f"{self.type} is not a send event")
        if self.type is not EventType.EXIT and (self.dest_ip is None or self.dest_sport is None):
            raise ValueError(f"{self.type.value} needs a destination")

    def label(self) -> str:
        if self.type is EventType.EXIT:
            return "EXIT"
        return f"{self.type.value} d={self.dest_node}"


@dataclass(frozen=True)
class ReceiveRecord:
    type: EventType
    socket: Any = None
    preamble: Any = None

    def __post_init__(self):
        if self.type not in RECEIVE_EVENTS:
            raise ValueError(f"{self.type} is not a receive event")
        if self.type is not EventType.EXIT and self.socket is None:
            raise ValueError(f"{self.type.value} needs a connection")

    def label(self) -> str:
        if self.type is EventType.EXIT or self.preamble is None:
            return self.type.value
        return f"{self.type.value} src={self.preamble.sender_node}"


COMPUTE_EXIT = ComputeRecord(EventType.EXIT)
JOIN_EXIT = ComputeRecord(EventType.JOIN_EXIT)
SEND_EXIT = SendRecord(EventType.EXIT)
RECEIVE_EXIT = ReceiveRecord(EventType.EXIT)


class QueueClosed(RuntimeError):
    """Push or pop on a queue whose node has shut down or aborted."""


T = TypeVar("T")


class BoundedQueue(Generic[T]):
    """FIFO bounded buffer: push blocks while full, pop blocks while empty.

    ``on_event`` (if given) is called as ``on_event("push"|"pop", name, record)``
    while the queue lock is held, so a trace sees operations in the order they
    took effect.
    """

    def __init__(self, name: str, capacity: int, runtime,
                 on_event: Callable[[str, str, Any], None] | None = None):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.name = name
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = runtime.condition()
        self._checkpoint = runtime.checkpoint
        self._now = runtime.now_ns
        self._on_event = on_event
        self._closed = False
        self.pushes = 0
        self.pops = 0

    def push(self, record: T) -> None:
        self._checkpoint()
        with self._cond:
            while len(self._items) >= self.capacity and not self._closed:
                self._cond.wait()
            if self._closed:
                raise QueueClosed(f"push to closed queue {self.name}: {record}")
            self._items.append(record)
            self.pushes += 1
            if self._on_event is not None:
                self._on_event("push", self.name, record)
            self._cond.notify_all()

    def pop(self) -> T:
        return self.pop_timed()[0]

    def pop_timed(self) -> tuple[T, int]:
        """Pop, also returning how long (ns) the caller waited on an empty queue."""
        self._checkpoint()
        waited = 0
        with self._cond:
            if not self._items and not self._closed:
                t0 = self._now()
                while not self._items and not self._closed:
                    self._cond.wait()
                waited = self._now() - t0
            if not self._items:
                raise QueueClosed(f"pop from closed queue {self.name}")
            record = self._items.popleft()
            self.pops += 1
            if self._on_event is not None:
                self._on_event("pop", self.name, record)
            self._cond.notify_all()
            return record, waited

    def close(self) -> None:
        """Discard pending records and wake every waiter; later push/pop raise."""
        with self._cond:
            self._closed = True
            self._items.clear()
            self._cond.notify_all()

    @property
    def closed(self) -> bool:
        return self._closed

    def __len__(self) -> int:
        return len(self._items)


def push(queue: BoundedQueue[T], record: T) -> None:
    queue.push(record)


def pop(queue: BoundedQueue[T]) -> T:
    return queue.pop()
