"""Run manifests, local multi-process orchestration and sweep summaries.

Manifest grammar is the cluster config grammar plus these keys::

    nodes = 2                    node count for locally launched runs
    ip = 127.0.0.1               address every local node binds
    base_port = 7100             node i listens on base_port + i
    engine = barrier-free        or barrier
    sweep = nodes 1 2 4          axis (nodes | table_size | compute_threads) and values
    total_tuples = 160000        optional: tuples per relation, split over the nodes
    repeats = 1
    timeout_s = 600              per sweep point
    output_dir = runs
    gen.<key> = ...              generator settings (see workload.parse_gen_spec)

Any other key is passed to :class:`~shardjoin.config.ClusterConfig`.
"""

from __future__ import annotations

import csv
import logging
import os
import select
import shutil
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .config import ClusterConfig, ConfigError, local_cluster, parse_kv
from .metrics import SUMMARY_COLUMNS, ClusterMetrics, LoadReport, read_reports_csv, speedup
from .model import R_TABLE, S_TABLE
from .workload import GenSpec, generate_partition, parse_gen_spec, partition_path, split_sizes, write_partition

log = logging.getLogger("shardjoin.harness")

SWEEP_AXES = ("nodes", "table_size", "compute_threads")
ENGINES = ("barrier-free", "barrier")
ENGINE_ALIASES = {"barrier-baseline": "barrier", "baseline": "barrier"}


@dataclass
class RunManifest:
    config: ClusterConfig
    gen_r: GenSpec
    gen_s: GenSpec
    engine: str = "barrier-free"
    sweep_axis: str | None = None
    sweep_values: list[int] = field(default_factory=list)
    total_tuples: int | None = None
    repeats: int = 1
    timeout_s: float = 600.0
    output_dir: str = "runs"
    ip: str = "127.0.0.1"
    base_port: int = 7100

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"engine must be one of {ENGINES}")
        if self.sweep_axis is not None:
            if self.sweep_axis not in SWEEP_AXES:
                raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.sweep_values or min(self.sweep_values) < 1:
                raise ConfigError("sweep values must be positive integers")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    @classmethod
    def loads(cls, text: str) -> RunManifest:
        cluster_lines, gen_lines = [], []
        kw: dict = {}
        nodes = 1
        for lineno, key, value in parse_kv(text):
            try:
                if key.startswith("gen."):
                    gen_lines.append(f"{key[4:]} = {value}")
                elif key == "nodes":
                    nodes = int(value)
                elif key == "ip":
                    kw["ip"] = value
                elif key in ("base_port", "repeats", "total_tuples"):
                    kw[key] = int(value)
                elif key == "timeout_s":
                    kw[key] = float(value)
                elif key == "engine":
                    kw[key] = ENGINE_ALIASES.get(value, value)
                elif key == "output_dir":
                    kw[key] = value
                elif key == "sweep":
                    parts = value.split()
                    if parts and parts[0] != "none":
                        kw["sweep_axis"] = parts[0]
                        kw["sweep_values"] = [int(v) for v in parts[1:]]
                elif key == "node":
                    raise ConfigError("manifests launch local nodes; use 'nodes = <count>' instead of node lines")
                else:
                    cluster_lines.append(f"{key} = {value}")
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
        if nodes < 1:
            raise ConfigError("nodes must be >= 1")
        _, gen_r, gen_s = parse_gen_spec("\n".join(gen_lines))
        template = ClusterConfig.loads("\n".join(cluster_lines))
        config = template.with_(nodes=local_cluster(nodes, kw.get("base_port", 7100), kw.get("ip", "127.0.0.1")).nodes)
        return cls(config=config, gen_r=gen_r, gen_s=gen_s, **kw)

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls.loads(Path(path).read_text())

    def points(self) -> list[SweepPoint]:
        """One fully resolved cluster config and generator pair per sweep value."""
        values = self.sweep_values if self.sweep_axis else [None]
        stride = max([self.config.n] + (self.sweep_values if self.sweep_axis == "nodes" else []))
        out = []
        for idx, value in enumerate(values):
            n, r, s = self.config.n, self.gen_r, self.gen_s
            changes: dict = {}
            if self.sweep_axis == "nodes":
                n = value
            elif self.sweep_axis == "table_size":
                r, s = r.with_(tuples_per_partition=value), s.with_(tuples_per_partition=value)
            elif self.sweep_axis == "compute_threads":
                changes["n_compute"] = value
            sizes = split_sizes(self.total_tuples, n) if self.total_tuples is not None else None
            cfg = self.config.with_(
                nodes=local_cluster(n, self.base_port + stride * idx, self.ip).nodes,
                sink_id=min(self.config.sink_id, n - 1),
                partition_size_R=max(sizes) if sizes else r.tuples_per_partition,
                partition_size_S=max(sizes) if sizes else s.tuples_per_partition,
                domain=max(r.domain, s.domain), tuple_size=r.tuple_size, **changes)
            if r.tuple_size != s.tuple_size:
                raise ConfigError("R and S must share one tuple_size")
            out.append(SweepPoint("-" if value is None else value, cfg, r, s, sizes))
        return out


@dataclass
class SweepPoint:
    value: int | str
    config: ClusterConfig
    gen_r: GenSpec
    gen_s: GenSpec
    sizes: list[int] | None = None

    def generate(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(self.config.n):
            for table, spec in ((R_TABLE, self.gen_r), (S_TABLE, self.gen_s)):
                if self.sizes is not None:
                    spec = spec.with_(tuples_per_partition=self.sizes[i])
                write_partition(partition_path(directory, table, i), generate_partition(spec, table, i))


@dataclass
class PointOutcome:
    value: int | str
    repeat: int
    reports: list[LoadReport] = field(default_factory=list)
    cluster_span_ns: int | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _readline(proc: subprocess.Popen, deadline: float) -> str:
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise TimeoutError("node did not report readiness")
        ready, _, _ = select.select([proc.stdout], [], [], remaining)
        if ready:
            return proc.stdout.readline()


def launch_local(config_path: Path, n: int, run_dir: Path, engine: str, timeout_s: float,
                 sink_id: int = 0) -> list[Path]:
    """Start ``n`` node processes, release them together, wait for all; returns report paths."""
    procs: list[subprocess.Popen] = []
    reports = []
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + os.pathsep + env.get("PYTHONPATH", "")
    deadline = time.monotonic() + timeout_s
    try:
        for i in range(n):
            report = run_dir / f"report_{i}.csv"
            reports.append(report)
            cmd = [sys.executable, "-m", "shardjoin", "node", "--config", str(config_path), "--id", str(i),
                   "--engine", engine, "--wait-go", "--report", str(report)]
            if i == sink_id:
                cmd += ["--results", str(run_dir / "results.npy")]
            err = open(run_dir / f"node_{i}.log", "w")
            procs.append(subprocess.Popen(cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=err,
                                          text=True, env=env))
            err.close()
        for i, p in enumerate(procs):
            line = _readline(p, deadline).strip()
            if line != "READY":
                raise RuntimeError(f"node {i} failed during loading (see node_{i}.log)")
        for p in procs:
            p.stdin.write("GO\n")
            p.stdin.flush()
        codes = []
        for p in procs:
            codes.append(p.wait(timeout=max(1.0, deadline - time.monotonic())))
        bad = [(i, c) for i, c in enumerate(codes) if c != 0]
        if bad:
            raise RuntimeError("nodes exited with errors: " + ", ".join(f"{i}->{c}" for i, c in bad))
        return reports
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
                p.wait()


def run_point(point: SweepPoint, run_dir: Path, engine: str, timeout_s: float, repeat: int = 0) -> PointOutcome:
    outcome = PointOutcome(point.value, repeat)
    try:
        data = run_dir / "data"
        if not data.exists():
            point.generate(data)
        cfg = point.config.with_(partition_dir=str(data), trace=False)
        conf = run_dir / "cluster.conf"
        cfg.save(conf)
        rdir = run_dir / f"rep{repeat}"
        rdir.mkdir(parents=True, exist_ok=True)
        paths = launch_local(conf, cfg.n, rdir, engine, timeout_s, cfg.sink_id)
        for path in paths:
            reports, _ = read_reports_csv(path)
            outcome.reports.extend(reports)
        outcome.cluster_span_ns = ClusterMetrics(outcome.reports).span_ns
    except Exception as exc:  # recorded in the summary, the sweep goes on
        log.error("sweep point %s repeat %d failed: %s", point.value, repeat, exc)
        outcome.error = str(exc)
    return outcome


def summarize(outcomes: list[PointOutcome], reference=None) -> list[dict]:
    """Rows of ``summary.csv``: one per node, one ``cluster`` row per run, ``FAILED`` rows for errors."""
    spans: dict = {}
    for o in outcomes:
        if o.ok:
            spans.setdefault(o.value, []).append(o.cluster_span_ns)
    medians = {v: statistics.median(s) for v, s in spans.items()}
    ref = medians.get(reference) if reference is not None else None
    if ref is None and medians:
        ref = medians[next(iter(medians))]
    rows = []
    for o in outcomes:
        if not o.ok:
            rows.append({"sweep_value": o.value, "node": "FAILED", "compute_ns": "", "send_ns": "", "recv_ns": "",
                         "span_ns": "", "gain": "", "speedup": ""})
            continue
        for r in o.reports:
            rows.append({"sweep_value": o.value, "node": r.node_id, "compute_ns": r.compute_time_ns,
                         "send_ns": r.send_time_ns, "recv_ns": r.recv_time_ns, "span_ns": r.join_span_ns,
                         "gain": f"{r.gain:.4f}" if r.join_span_ns else "", "speedup": ""})
        rows.append({"sweep_value": o.value, "node": "cluster",
                     "compute_ns": sum(r.compute_time_ns for r in o.reports),
                     "send_ns": sum(r.send_time_ns for r in o.reports),
                     "recv_ns": sum(r.recv_time_ns for r in o.reports),
                     "span_ns": o.cluster_span_ns, "gain": "",
                     "speedup": f"{speedup(ref, o.cluster_span_ns):.4f}" if ref and o.cluster_span_ns else ""})
    return rows


def write_summary(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(rows)


def orchestrate(manifest: RunManifest, output_dir: str | Path | None = None) -> tuple[list[PointOutcome], Path]:
    out = Path(output_dir or manifest.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    outcomes = []
    for point in manifest.points():
        run_dir = out / f"point_{point.value}"
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_dir.mkdir(parents=True)
        for rep in range(manifest.repeats):
            outcomes.append(run_point(point, run_dir, manifest.engine, manifest.timeout_s, rep))
    reference = 1 if manifest.sweep_axis == "nodes" else None
    summary = out / "summary.csv"
    write_summary(summary, summarize(outcomes, reference))
    return outcomes, summary
