"""Load accounting, the headline metrics, and the analytic shuffle volume."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable

REPORT_FIELDS = (
    "node_id", "compute_time_ns", "send_time_ns", "recv_time_ns", "join_span_ns",
    "bytes_sent", "bytes_received", "payload_bytes_sent", "frame_bytes_sent",
    "result_bytes_sent", "recv_blocked_ns", "pool_peak_bytes", "result_entries",
    "cluster_span_ns", "n_compute", "n_send", "n_recv",
)

SUMMARY_COLUMNS = ("sweep_value", "node", "compute_ns", "send_ns", "recv_ns", "span_ns", "gain", "speedup")


@dataclass
class LoadReport:
    """Per-node timing ledger.

    Busy times are summed over the threads of each role and exclude time spent
    blocked on a queue pop or on the local compute barrier.
    """

    node_id: int
    compute_time_ns: int = 0
    send_time_ns: int = 0
    recv_time_ns: int = 0
    join_span_ns: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    payload_bytes_sent: int = 0
    frame_bytes_sent: int = 0
    result_bytes_sent: int = 0
    recv_blocked_ns: int = 0
    pool_peak_bytes: int = 0
    result_entries: int = 0
    cluster_span_ns: int | None = None
    n_compute: int = 1
    n_send: int = 1
    n_recv: int = 1

    def __post_init__(self):
        for f in REPORT_FIELDS:
            v = getattr(self, f)
            if v is not None and v < 0:
                raise ValueError(f"{f} must be non-negative, got {v}")

    @property
    def total_load_ns(self) -> int:
        return self.compute_time_ns + self.send_time_ns + self.recv_time_ns

    @property
    def gain(self) -> float:
        return intra_node_gain(self)

    def to_row(self) -> dict:
        row = {f: getattr(self, f) for f in REPORT_FIELDS}
        row["cluster_span_ns"] = "" if self.cluster_span_ns is None else self.cluster_span_ns
        row["gain"] = f"{self.gain:.4f}" if self.join_span_ns > 0 else ""
        return row

    @classmethod
    def from_row(cls, row: dict) -> LoadReport:
        kwargs = {}
        for f in REPORT_FIELDS:
            v = row.get(f, "")
            kwargs[f] = None if v in ("", None) else int(v)
        return cls(**kwargs)


@dataclass
class ClusterMetrics:
    reports: list[LoadReport] = field(default_factory=list)
    cluster_join_span_ns: int | None = None

    def __post_init__(self):
        if self.cluster_join_span_ns is None:
            sink = [r.cluster_span_ns for r in self.reports if r.cluster_span_ns is not None]
            if sink:
                self.cluster_join_span_ns = sink[0]

    @property
    def max_node_span_ns(self) -> int:
        return max((r.join_span_ns for r in self.reports), default=0)

    @property
    def span_ns(self) -> int:
        """Cluster join span, falling back to the slowest node when no sink figure exists."""
        if self.cluster_join_span_ns is not None:
            return self.cluster_join_span_ns
        return self.max_node_span_ns

    def report(self, node_id: int) -> LoadReport:
        for r in self.reports:
            if r.node_id == node_id:
                return r
        raise KeyError(node_id)


def intra_node_gain(report: LoadReport) -> float:
    """Total busy time across the node's threads divided by its join span."""
    if report.join_span_ns <= 0:
        raise ValueError("intra-node gain is undefined for a zero join span")
    return report.total_load_ns / report.join_span_ns


def speedup(span_1: float, span_n: float) -> float:
    if span_1 <= 0 or span_n <= 0:
        raise ValueError("speedup needs positive spans")
    return span_1 / span_n


def expected_send_volume(relation_size: int, n: int) -> Fraction:
    """Tuples one node ships during a broadcast shuffle: |R|/n to each of n-1 peers."""
    if n < 1:
        raise ValueError("need at least one node")
    return Fraction(relation_size) * (n - 1) / n


def write_reports_csv(path: str | Path, reports: Iterable[LoadReport], extra: dict | None = None) -> None:
    """One row per node, plus a ``summary`` row with the cluster span."""
    reports = list(reports)
    extra = extra or {}
    cols = ["row", *REPORT_FIELDS, "gain", *extra]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in reports:
            w.writerow({"row": "node", **r.to_row(), **extra})
        cm = ClusterMetrics(reports)
        w.writerow({"row": "summary", "cluster_span_ns": cm.span_ns, **extra})


def read_reports_csv(path: str | Path) -> tuple[list[LoadReport], int | None]:
    reports, span = [], None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["row"] == "summary":
                span = int(row["cluster_span_ns"]) if row["cluster_span_ns"] else None
            else:
                reports.append(LoadReport.from_row(row))
    return reports, span
