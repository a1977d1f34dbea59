"""``shardjoin`` command line: gen, node, orchestrate, simulate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .baseline import BaselineNode
from .config import ConfigError, ClusterConfig
from .harness import ENGINE_ALIASES, ENGINES, RunManifest, orchestrate
from .model import R_TABLE, S_TABLE, hash_key
from .node import Faults, Node, categorize
from .oracle import oracle_join, same_multiset
from .sim import SimFailure, run_sim
from .workload import PartitionFormatError, generate_partition, load_node_partitions, parse_gen_spec, \
    partition_path, write_partition
from .metrics import write_reports_csv

log = logging.getLogger("shardjoin")

EXIT_CODES = {"internal": 1, "config": 2, "transport": 3, "protocol": 4, "timeout": 5}
MUTATIONS = ("no-local-barrier", "drop-bucket")


def _engine(value: str) -> str:
    value = ENGINE_ALIASES.get(value, value)
    if value not in ENGINES:
        raise argparse.ArgumentTypeError(f"engine must be one of {ENGINES} or barrier-baseline")
    return value


def cmd_gen(args) -> int:
    try:
        nodes, r_spec, s_spec = parse_gen_spec(Path(args.spec).read_text())
    except (OSError, ConfigError) as exc:
        print(f"gen: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(nodes):
        for table, spec in ((R_TABLE, r_spec), (S_TABLE, s_spec)):
            write_partition(partition_path(out, table, i), generate_partition(spec, table, i))
    print(f"wrote {2 * nodes} partition files to {out}")
    return 0


def _wait_for_go() -> None:
    print("READY", flush=True)
    line = sys.stdin.readline()
    if line.strip() != "GO":
        raise ConfigError("expected GO on stdin")


def cmd_node(args) -> int:
    node_id = args.id
    node = None
    try:
        config = ClusterConfig.load(args.config)
        if args.trace:
            config = config.with_(trace=True)
        directory = args.partitions or config.partition_dir
        if directory is None:
            raise ConfigError("no partition directory: pass --partitions or set partition_dir")
        try:
            r, s = load_node_partitions(directory, node_id)
        except (OSError, PartitionFormatError) as exc:
            raise ConfigError(f"cannot load partitions: {exc}") from exc
        cls = Node if args.engine == "barrier-free" else BaselineNode
        node = cls(config, node_id, r, s)
        node.prepare()
        if args.wait_go:
            _wait_for_go()
        result = node.run()
    except BaseException as exc:
        if isinstance(exc, KeyboardInterrupt):
            raise
        category = categorize(exc)
        if node is not None and args.trace:
            node.trace.to_jsonl(args.trace)
        print(f"node {node_id}: {category} error: {getattr(exc, 'message', exc)}", file=sys.stderr)
        log.debug("node failure", exc_info=True)
        return EXIT_CODES.get(category, 1)
    if args.trace:
        node.trace.to_jsonl(args.trace)
    if args.report:
        write_reports_csv(args.report, [result.report])
    if args.results and result.results is not None:
        np.save(args.results, result.results)
    print(f"node {node_id}: done, {result.report.result_entries} local result entries", file=sys.stderr)
    return 0


def cmd_orchestrate(args) -> int:
    try:
        manifest = RunManifest.load(args.manifest)
    except (OSError, ConfigError) as exc:
        print(f"orchestrate: {exc}", file=sys.stderr)
        return 2
    outcomes, summary = orchestrate(manifest, args.out)
    failed = [o for o in outcomes if not o.ok]
    for o in outcomes:
        status = "ok" if o.ok else f"FAILED ({o.error})"
        span = f" span_ns={o.cluster_span_ns}" if o.ok else ""
        print(f"point {o.value} repeat {o.repeat}: {status}{span}")
    print(f"summary written to {summary}")
    return 1 if failed else 0


def _mutation_faults(mutation: str | None, parts, config: ClusterConfig) -> Faults | dict | None:
    if mutation == "no-local-barrier":
        return Faults(skip_local_barrier=True)
    if mutation == "drop-bucket":
        # drop, from node 0's outgoing streams, an R bucket that has a partner in node 1's S
        if len(parts) < 2:
            return None
        shared = np.intersect1d(parts[0][0].keys, parts[1][1].keys)
        if not len(shared):
            return None
        return {0: Faults(drop_bucket=(R_TABLE, hash_key(int(shared[0]), config.num_buckets)))}
    return None


def cmd_simulate(args) -> int:
    try:
        manifest = RunManifest.load(args.manifest)
        points = manifest.points()
    except (OSError, ConfigError) as exc:
        print(f"simulate: {exc}", file=sys.stderr)
        return 2
    engine = manifest.engine if args.engine is None else args.engine
    bad = 0
    for point in points:
        for seed in range(args.seeds):
            r_spec = point.gen_r.with_(seed=point.gen_r.seed + seed)
            s_spec = point.gen_s.with_(seed=point.gen_s.seed + seed)
            n = point.config.n
            sizes = point.sizes
            parts = []
            for i in range(n):
                rs = r_spec if sizes is None else r_spec.with_(tuples_per_partition=sizes[i])
                ss = s_spec if sizes is None else s_spec.with_(tuples_per_partition=sizes[i])
                parts.append((generate_partition(rs, R_TABLE, i), generate_partition(ss, S_TABLE, i)))
            config = point.config.with_(trace=True)
            label = f"point {point.value} seed {seed}"
            try:
                out = run_sim(config, parts, seed, mode=args.mode, engine=engine, watchdog_s=args.watchdog,
                              faults=_mutation_faults(args.mutate, parts, config))
            except SimFailure as exc:
                bad += 1
                print(f"{label}: FAILED {exc}")
                continue
            expected = oracle_join([p[0] for p in parts], [p[1] for p in parts], config.predicate,
                                   config.result_payloads)
            problems = list(out.violations)
            if not same_multiset(out.results, expected):
                problems.append(f"oracle mismatch: {len(out.results)} entries, expected {len(expected)}")
            if problems:
                bad += 1
                print(f"{label}: {len(problems)} problem(s)")
                for p in problems:
                    print(f"  {p}")
            elif args.verbose:
                print(f"{label}: ok ({len(expected)} entries)")
    total = len(points) * args.seeds
    print(f"{total - bad}/{total} runs clean")
    return 1 if bad else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardjoin", description="Barrier-free distributed hash join.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate partition files from a generator spec")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    n = sub.add_parser("node", help="run one node daemon")
    n.add_argument("--config", required=True)
    n.add_argument("--id", type=int, required=True)
    n.add_argument("--partitions", help="directory holding R_<id>.sjp and S_<id>.sjp")
    n.add_argument("--report", help="write the LoadReport CSV here")
    n.add_argument("--trace", help="write the JSON-lines trace here")
    n.add_argument("--results", help="sink only: save all results as .npy")
    n.add_argument("--engine", type=_engine, default="barrier-free")
    n.add_argument("--wait-go", action="store_true", help="print READY after loading, start on GO from stdin")
    n.set_defaults(func=cmd_node)

    o = sub.add_parser("orchestrate", help="run every sweep point of a manifest as local processes")
    o.add_argument("--manifest", required=True)
    o.add_argument("--out", help="output directory (default: the manifest's output_dir)")
    o.set_defaults(func=cmd_orchestrate)

    s = sub.add_parser("simulate", help="in-process runs checked against the oracle and the trace rules")
    s.add_argument("--manifest", required=True)
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--mode", choices=("coop", "threads"), default="coop")
    s.add_argument("--engine", type=_engine)
    s.add_argument("--watchdog", type=float, default=60.0)
    s.add_argument("-v", "--verbose", action="store_true")
    s.add_argument("--mutate", choices=MUTATIONS, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("SHARDJOIN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
