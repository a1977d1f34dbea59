from __future__ import annotations

import socket

import pytest

from shardjoin.config import local_cluster
from shardjoin.workload import GenSpec, generate_cluster


def small_config(n: int, **kw):
    defaults = dict(n_compute=2, n_send=1, n_recv=1, num_buckets=64, partition_size_R=2000,
                    partition_size_S=2000, domain=4000, tuple_size=16)
    defaults.update(kw)
    return local_cluster(n, 7100, **defaults)


def make_parts(n: int, size: int = 500, seed: int = 0, domain: int = 2000, tuple_size: int = 16,
               s_size: int | None = None, distribution: str = "uniform"):
    r = GenSpec(seed=seed, tuples_per_partition=size, domain=domain, tuple_size=tuple_size,
                distribution=distribution)
    s = r.with_(tuples_per_partition=size if s_size is None else s_size)
    return generate_cluster(r, s, n)


def free_port_block(count: int) -> int:
    """First port of ``count`` consecutive ports that are currently bindable."""
    for _ in range(50):
        with socket.socket() as s:
            s.bind(("127.0.0.1", 0))
            base = s.getsockname()[1]
        if base + count >= 65000:
            continue
        socks = []
        try:
            for p in range(base, base + count):
                t = socket.socket()
                t.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
                t.bind(("127.0.0.1", p))
                socks.append(t)
            return base
        except OSError:
            continue
        finally:
            for t in socks:
                t.close()
    raise RuntimeError("no free port block")


@pytest.fixture
def ports():
    return free_port_block


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
