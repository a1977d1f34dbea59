from __future__ import annotations

import threading
import time
from collections import Counter

import pytest

from shardjoin.events import (
    COMPUTE_EXIT, JOIN_EXIT, SEND_EXIT, BoundedQueue, ComputeRecord, EventType, QueueClosed, ReceiveRecord,
    SendRecord, pop, push,
)
from shardjoin.runtime import CoopRuntime, ThreadRuntime


def test_push_pop_identity():
    q = BoundedQueue("Qc", 4, ThreadRuntime())
    rec = ComputeRecord(EventType.JOIN, 3, 1, 0)
    push(q, rec)
    assert pop(q) is rec


def test_capacity_one_blocks_second_push():
    q = BoundedQueue("Qs", 1, ThreadRuntime())
    q.push(SEND_EXIT)
    done = threading.Event()

    def second():
        q.push(SEND_EXIT)
        done.set()

    t = threading.Thread(target=second)
    t.start()
    assert not done.wait(0.1)
    q.pop()
    assert done.wait(2)
    t.join()


def test_mpmc_conservation():
    q = BoundedQueue("Qc", 16, ThreadRuntime())
    popped: list[int] = []
    lock = threading.Lock()

    def producer(p):
        for i in range(1000):
            q.push(ComputeRecord(EventType.JOIN, i, p, 0))

    def consumer():
        while True:
            rec = q.pop()
            if rec.type is EventType.EXIT:
                q.push(rec)
                return
            with lock:
                popped.append((rec.htfI, rec.bI))

    producers = [threading.Thread(target=producer, args=(p,)) for p in range(4)]
    consumers = [threading.Thread(target=consumer) for _ in range(4)]
    for t in producers + consumers:
        t.start()
    for t in producers:
        t.join()
    q.push(COMPUTE_EXIT)
    for t in consumers:
        t.join(10)
    assert len(popped) == 4000
    assert Counter(popped) == Counter((p, i) for p in range(4) for i in range(1000))


def test_exit_repush_releases_all_consumers():
    rt = CoopRuntime(seed=1)
    q = BoundedQueue("Qs", 4, rt)
    finished = []

    def consumer(i):
        rec = q.pop()
        assert rec.type is EventType.EXIT
        q.push(rec)
        finished.append(i)

    def main():
        hs = [rt.spawn(f"c{i}", consumer, i) for i in range(3)]
        q.push(SEND_EXIT)
        for h in hs:
            h.join()
        return len(q)

    assert rt.run(main) == 1  # the last re-push stays behind
    assert sorted(finished) == [0, 1, 2]


def test_fifo_single_producer():
    q = BoundedQueue("Qc", 100, ThreadRuntime())
    for i in range(50):
        q.push(ComputeRecord(EventType.JOIN, i, 0, 0))
    assert [q.pop().bI for _ in range(50)] == list(range(50))


def test_close_wakes_waiters():
    q = BoundedQueue("Qr", 2, ThreadRuntime())
    errors = []

    def waiter():
        try:
            q.pop()
        except QueueClosed as exc:
            errors.append(exc)

    t = threading.Thread(target=waiter)
    t.start()
    time.sleep(0.05)
    q.close()
    t.join(2)
    assert len(errors) == 1
    with pytest.raises(QueueClosed):
        q.push(SEND_EXIT)


def test_idle_consumers_do_not_spin():
    q = BoundedQueue("Qc", 4, ThreadRuntime())
    threads = [threading.Thread(target=q.pop) for _ in range(4)]
    for t in threads:
        t.start()
    cpu0, wall0 = time.process_time(), time.monotonic()
    time.sleep(1.0)
    cpu = time.process_time() - cpu0
    wall = time.monotonic() - wall0
    for _ in threads:
        q.push(JOIN_EXIT)
    for t in threads:
        t.join(2)
    assert cpu / wall < 0.01


def test_record_validation():
    with pytest.raises(ValueError):
        ComputeRecord(EventType.PARTITION_READY)
    with pytest.raises(ValueError):
        ComputeRecord(EventType.JOIN, 1)
    with pytest.raises(ValueError):
        SendRecord(EventType.PARTITION_READY)
    with pytest.raises(ValueError):
        ReceiveRecord(EventType.RESULT_READY)
    assert SendRecord(EventType.RESULT_READY, "127.0.0.1", 7100, 0, True).label() == "RESULT_READY d=0"
