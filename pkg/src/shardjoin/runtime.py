"""Threading back-ends.

Every blocking primitive in the engine (queues, the HTF memory pool, in-memory
pipes, the local compute barrier) is built on the small surface exposed here,
so the same node code can run on real OS threads or under the cooperative
scheduler used for reproducible simulator traces.

``ThreadRuntime``
    Plain ``threading``. An optional seeded jitter perturbs interleavings at
    checkpoints.

``CoopRuntime``
    One task runs at a time. Control changes hands only when the running task
    blocks, sleeps, or hits a checkpoint, and the successor is drawn from a
    seeded RNG. Time is logical, so a run with a fixed seed replays exactly.
    When no task can make progress the run stops with ``Deadlock``.
"""

from __future__ import annotations

import heapq
import itertools
import random
import threading
import time
from typing import Any, Callable


class Deadlock(RuntimeError):
    """Raised when every live task is blocked and nothing is sleeping."""


class ThreadHandle:
    def __init__(self, thread: threading.Thread):
        self._thread = thread
        self.error: BaseException | None = None
        self.result: Any = None

    @property
    def name(self) -> str:
        return self._thread.name

    def join(self, timeout: float | None = None) -> bool:
        self._thread.join(timeout)
        return not self._thread.is_alive()

    def is_alive(self) -> bool:
        return self._thread.is_alive()


class _NullLock:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def acquire(self, blocking: bool = True, timeout: float = -1) -> bool:
        return True

    def release(self) -> None:
        pass


class ThreadRuntime:
    """Real threads; ``seed``/``jitter`` add random yields at checkpoints."""

    cooperative = False

    def __init__(self, seed: int | None = None, jitter: float = 0.0):
        self._rng = random.Random(seed) if jitter > 0 else None
        self._jitter = jitter

    def condition(self) -> threading.Condition:
        return threading.Condition()

    def lock(self) -> threading.Lock:
        return threading.Lock()

    def spawn(self, name: str, fn: Callable[..., Any], *args: Any) -> ThreadHandle:
        handle: ThreadHandle

        def body() -> None:
            try:
                handle.result = fn(*args)
            except BaseException as exc:  # surfaced through handle.error
                handle.error = exc

        handle = ThreadHandle(threading.Thread(target=body, name=name, daemon=True))
        handle._thread.start()
        return handle

    def now_ns(self) -> int:
        return time.perf_counter_ns()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)

    def checkpoint(self) -> None:
        if self._rng is not None and self._rng.random() < self._jitter:
            time.sleep(self._rng.choice((0.0, 0.0, 1e-5, 5e-5)))


_RUNNABLE, _BLOCKED, _DONE = "runnable", "blocked", "done"


class _Task:
    __slots__ = ("tid", "name", "baton", "state", "token", "timed_out", "joiners", "error", "result", "thread")

    def __init__(self, tid: int, name: str):
        self.tid = tid
        self.name = name
        self.baton = threading.Semaphore(0)
        self.state = _RUNNABLE
        self.token = 0
        self.timed_out = False
        self.joiners: list[tuple[_Task, int]] = []
        self.error: BaseException | None = None
        self.result: Any = None
        self.thread: threading.Thread | None = None


class CoopHandle:
    def __init__(self, runtime: CoopRuntime, task: _Task):
        self._rt = runtime
        self._task = task

    @property
    def name(self) -> str:
        return self._task.name

    @property
    def error(self) -> BaseException | None:
        return self._task.error

    @property
    def result(self) -> Any:
        return self._task.result

    def is_alive(self) -> bool:
        return self._task.state != _DONE

    def join(self, timeout: float | None = None) -> bool:
        task = self._task
        if task.state == _DONE:
            return True
        me = self._rt._current
        me.token += 1
        task.joiners.append((me, me.token))
        self._rt._park(me, timeout)
        return task.state == _DONE


class _CoopCondition:
    """Condition variable for the cooperative scheduler.

    Entering the ``with`` block is free: only one task ever runs, and control
    moves only inside ``wait``.
    """

    def __init__(self, runtime: CoopRuntime):
        self._rt = runtime
        self._waiters: list[tuple[_Task, int]] = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def wait(self, timeout: float | None = None) -> bool:
        me = self._rt._current
        me.token += 1
        self._waiters.append((me, me.token))
        return self._rt._park(me, timeout)

    def wait_for(self, predicate: Callable[[], bool], timeout: float | None = None) -> bool:
        if timeout is None:
            while not predicate():
                self.wait()
            return True
        deadline = self._rt.now_ns() + int(timeout * 1e9)
        result = predicate()
        while not result:
            remaining = (deadline - self._rt.now_ns()) / 1e9
            if remaining <= 0:
                break
            self.wait(remaining)
            result = predicate()
        return result

    def notify(self, n: int = 1) -> None:
        woken = 0
        while self._waiters and woken < n:
            task, token = self._waiters.pop(0)
            if self._rt._wake(task, token):
                woken += 1

    def notify_all(self) -> None:
        waiters, self._waiters = self._waiters, []
        for task, token in waiters:
            self._rt._wake(task, token)


class CoopRuntime:
    """Seeded cooperative scheduler over OS threads passing a single baton.

    ``preempt`` is the probability that a checkpoint hands control to another
    runnable task.
    """

    cooperative = True
    TICK_NS = 1000

    def __init__(self, seed: int = 0, preempt: float = 0.3):
        self._rng = random.Random(seed)
        self._preempt = preempt
        self._tasks: list[_Task] = []
        self._current: _Task | None = None
        self._tick = 0
        self._sleepers: list[tuple[int, int, _Task, int]] = []
        self._seq = itertools.count()
        self._finished = threading.Event()
        self.deadlock: str | None = None
        self.switches = 0

    # -- public surface -------------------------------------------------
    def condition(self) -> _CoopCondition:
        return _CoopCondition(self)

    def lock(self) -> _NullLock:
        return _NullLock()

    def now_ns(self) -> int:
        return self._tick * self.TICK_NS

    def spawn(self, name: str, fn: Callable[..., Any], *args: Any) -> CoopHandle:
        task = self._new_task(name, fn, args)
        return CoopHandle(self, task)

    def sleep(self, seconds: float) -> None:
        me = self._current
        me.token += 1
        self._park(me, max(seconds, 1e-9))

    def checkpoint(self) -> None:
        if self._rng.random() < self._preempt:
            self._switch(self._current)

    def run(self, fn: Callable[..., Any], *args: Any, name: str = "main") -> Any:
        """Run ``fn`` as the root task; returns its result once every task is done."""
        if self._tasks:
            raise RuntimeError("CoopRuntime.run may only be called once")
        root = self._new_task(name, fn, args)
        self._current = root
        root.baton.release()
        self._finished.wait()
        if self.deadlock is not None:
            raise Deadlock(self.deadlock)
        if root.error is not None:
            raise root.error
        return root.result

    # -- scheduler internals ----------------------------------------------
    def _new_task(self, name: str, fn: Callable[..., Any], args: tuple) -> _Task:
        task = _Task(len(self._tasks), name)
        self._tasks.append(task)
        task.thread = threading.Thread(target=self._body, args=(task, fn, args), name=name, daemon=True)
        task.thread.start()
        return task

    def _body(self, task: _Task, fn: Callable[..., Any], args: tuple) -> None:
        task.baton.acquire()
        try:
            task.result = fn(*args)
        except BaseException as exc:
            task.error = exc
        task.state = _DONE
        for joiner, token in task.joiners:
            self._wake(joiner, token)
        task.joiners.clear()
        nxt = self._pick()
        if nxt is None:
            if any(t.state != _DONE for t in self._tasks):
                self._declare_deadlock()
            self._finished.set()
            return
        self._current = nxt
        nxt.baton.release()

    def _wake(self, task: _Task, token: int) -> bool:
        if task.state == _BLOCKED and task.token == token:
            task.state = _RUNNABLE
            return True
        return False

    def _park(self, me: _Task, timeout: float | None) -> bool:
        token = me.token
        me.state = _BLOCKED
        me.timed_out = False
        if timeout is not None:
            wake_at = self._tick + max(1, int(timeout * 1e9 / self.TICK_NS))
            heapq.heappush(self._sleepers, (wake_at, next(self._seq), me, token))
        self._switch(me)
        return not me.timed_out

    def _pick(self) -> _Task | None:
        self._tick += 1
        self._expire_sleepers()
        runnable = [t for t in self._tasks if t.state == _RUNNABLE]
        while not runnable and self._sleepers:
            self._tick = max(self._tick, self._sleepers[0][0])
            self._expire_sleepers()
            runnable = [t for t in self._tasks if t.state == _RUNNABLE]
        if not runnable:
            return None
        return runnable[0] if len(runnable) == 1 else self._rng.choice(runnable)

    def _expire_sleepers(self) -> None:
        while self._sleepers and self._sleepers[0][0] <= self._tick:
            _, _, task, token = heapq.heappop(self._sleepers)
            if self._wake(task, token):
                task.timed_out = True

    def _switch(self, me: _Task) -> None:
        self.switches += 1
        nxt = self._pick()
        if nxt is None:
            self._declare_deadlock()
            self._finished.set()
            me.baton.acquire()  # never released; the run is over
            return
        if nxt is me:
            return
        self._current = nxt
        nxt.baton.release()
        me.baton.acquire()

    def _declare_deadlock(self) -> None:
        blocked = [t.name for t in self._tasks if t.state == _BLOCKED]
        self.deadlock = f"deadlock at tick {self._tick}: blocked tasks {blocked}"


class Event:
    """Minimal one-shot event built on a runtime condition."""

    def __init__(self, runtime: ThreadRuntime | CoopRuntime):
        self._cond = runtime.condition()
        self._set = False

    def set(self) -> None:
        with self._cond:
            self._set = True
            self._cond.notify_all()

    def is_set(self) -> bool:
        return self._set

    def wait(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: self._set, timeout)
