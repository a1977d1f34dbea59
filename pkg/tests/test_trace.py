from __future__ import annotations

import pytest

from conftest import make_parts, small_config
from shardjoin.sim import run_sim
from shardjoin.trace import Trace, check_trace


@pytest.fixture(scope="module")
def good_trace():
    out = run_sim(small_config(3), make_parts(3, 300, seed=1), seed=2)
    assert out.violations == []
    return out.trace


def _mutated(trace, fn):
    return Trace.of(fn(list(trace.events)))


def test_well_formed(good_trace):
    assert check_trace(good_trace) == []


def test_join_after_join_exit(good_trace):
    def move(events):
        node = 1
        idx = [i for i, e in enumerate(events) if e.node == node]
        join = next(i for i in idx if events[i].event.startswith("push Qc JOIN "))
        last_je = max(i for i in idx if events[i].event == "push Qc JOIN_EXIT")
        ev = events.pop(join)
        events.insert(last_je, ev)  # right after the (shifted) last JOIN_EXIT push
        return events

    assert check_trace(_mutated(good_trace, move)) == ["node 1: JOIN pushed after JOIN_EXIT"]


def test_missing_sink_step6(good_trace):
    def drop(events):
        return [e for e in events if not (e.node == 0 and e.event in ("push Qc EXIT", "pop Qc EXIT"))]

    assert "node 0: sink compute EXIT absent" in check_trace(_mutated(good_trace, drop))


def test_cluster_barrier_forbidden(good_trace):
    def add(events):
        first = next(e for e in events if e.node == 2)
        return events + [type(first)(2, "main", "main", "cluster-barrier gen=1", first.t_ns)]

    assert any("cluster-wide barrier" in v for v in check_trace(_mutated(good_trace, add)))


def test_result_ready_before_barrier(good_trace):
    def early(events):
        idx = [i for i, e in enumerate(events) if e.node == 2]
        rr = next(i for i in idx if events[i].event.startswith("push Qs RESULT_READY"))
        first_enter = next(i for i in idx if events[i].verb == "barrier-enter")
        ev = events.pop(rr)
        events.insert(first_enter, ev)
        return events

    assert any("before local barrier" in v for v in check_trace(_mutated(good_trace, early)))


def test_double_free(good_trace):
    def dup(events):
        free = next(e for e in events if e.node == 1 and e.verb == "free")
        return events + [free]

    assert any("freed exactly once" in v for v in check_trace(_mutated(good_trace, dup)))


def test_missing_start(good_trace):
    assert check_trace(Trace.of([])) == []
    events = [e for e in good_trace.events if e.node == 1 and e.verb != "start"]
    assert check_trace(Trace.of(events)) == ["node 1: start event missing"]


def test_jsonl_round_trip(good_trace, tmp_path):
    path = tmp_path / "trace.jsonl"
    good_trace.to_jsonl(path)
    back = Trace.from_jsonl(path)
    assert back.events == good_trace.events
    assert check_trace(back) == []
