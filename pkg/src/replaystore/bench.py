"""Load generator for insert and sample throughput.

Every simulated client is its own process with its own connection. The
server runs in a further process unless an address is given. Results go
out as line-delimited JSON records plus a plain-text summary.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from replaystore.errors import InvalidArgumentError, ReplayError

log = logging.getLogger(__name__)

DISCLAIMER = ("desk-scale run: all clients and the server share one host over loopback; "
              "absolute numbers are not comparable to multi-machine deployments")

MODES = ("insert", "sample", "mixed")
PLATEAU_GAIN = 0.05
_PAYLOAD_POOL = 16
_MAX_LATENCIES = 20_000
_STARTUP_TIMEOUT = 60.0


@dataclass
class BenchConfig:
    mode: str = "insert"
    payload_bytes: int = 4000
    num_clients: int = 1
    num_tables: int = 1
    duration_s: float = 5.0
    chunk_length: int = 1
    seed: int = 0
    out: str | None = None
    max_in_flight: int = 8
    think_time_ms: float = 0.0
    address: str | None = None
    prefill_items: int = 1000

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if self.payload_bytes <= 0 or self.payload_bytes % 4:
            raise InvalidArgumentError("payload_bytes must be a positive multiple of 4 (float32)")
        for name in ("num_clients", "num_tables", "chunk_length", "max_in_flight"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.duration_s <= 0:
            raise InvalidArgumentError("duration_s must be positive")
        if self.think_time_ms < 0:
            raise InvalidArgumentError("think_time_ms must be >= 0")

    def table_names(self) -> list[str]:
        return [f"bench_{i}" for i in range(self.num_tables)]

    def role(self, client: int) -> str:
        if self.mode == "mixed":
            return "insert" if client % 2 == 0 else "sample"
        return self.mode


@dataclass
class BenchResult:
    config: BenchConfig
    duration_s: float
    clients: list[dict[str, Any]]
    per_second: list[dict[str, float]]
    total_qps: float
    total_bps: float
    latency_ms: dict[str, float]
    server_counters: dict[str, dict[str, int]] = field(default_factory=dict)

    def qps(self, role: str | None = None) -> float:
        return sum(c["qps"] for c in self.clients if role is None or c["role"] == role)

    def records(self) -> list[dict[str, Any]]:
        out = []
        for c in self.clients:
            for second, ops in enumerate(c["per_second"]):
                out.append({"type": "second", "client": c["client"], "role": c["role"],
                            "second": second, "qps": ops,
                            "bps": ops * self.config.payload_bytes})
        for c in self.clients:
            out.append({"type": "client", **{k: v for k, v in c.items() if k != "per_second"}})
        out.append({
            "type": "summary",
            "config": asdict(self.config),
            "duration_s": self.duration_s,
            "total_qps": self.total_qps,
            "total_bps": self.total_bps,
            "per_second": self.per_second,
            "latency_ms": self.latency_ms,
            "server_counters": self.server_counters,
            "disclaimer": DISCLAIMER,
        })
        return out

    def write_jsonl(self, path: str | os.PathLike) -> None:
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(rec) + "\n")

    def summary(self) -> str:
        cfg = self.config
        lines = [
            f"mode={cfg.mode} clients={cfg.num_clients} tables={cfg.num_tables} "
            f"payload={cfg.payload_bytes}B chunk_length={cfg.chunk_length} "
            f"duration={self.duration_s:.1f}s",
            f"{'client':>6} {'role':>6} {'items':>9} {'QPS':>10} {'MB/s':>9}",
        ]
        for c in self.clients:
            lines.append(f"{c['client']:>6} {c['role']:>6} {c['ops']:>9} "
                         f"{c['qps']:>10.1f} {c['bps'] / 1e6:>9.2f}")
        lat = self.latency_ms
        lines.append(f"{'total':>6} {'':>6} {sum(c['ops'] for c in self.clients):>9} "
                     f"{self.total_qps:>10.1f} {self.total_bps / 1e6:>9.2f}")
        lines.append(f"latency ms: p50={lat['p50']:.3f} p95={lat['p95']:.3f} p99={lat['p99']:.3f}")
        lines.append(f"note: {DISCLAIMER}")
        return "\n".join(lines)


# server process


# total capacity is split across tables so runs with more tables hold the same
# amount of data instead of allocating fresh memory for every insert
_TOTAL_CAPACITY = 10_000


def _bench_tables(cfg: BenchConfig) -> list[dict[str, Any]]:
    per_table = max(_TOTAL_CAPACITY // cfg.num_tables, cfg.prefill_items)
    return [{"name": name, "sampler": {"type": "uniform"}, "remover": {"type": "fifo"},
             "max_size": per_table, "max_times_sampled": 0,
             "rate_limiter": {"type": "min_size", "min_size": 1}, "rng_seed": cfg.seed + i}
            for i, name in enumerate(cfg.table_names())]


def _serve(tables: list[dict[str, Any]], ready, stop) -> None:
    from replaystore.server import Server, ServerConfig
    server = Server(ServerConfig.from_dict({"tables": tables})).start()
    ready.put(server.endpoint)
    stop.wait()
    server.stop()


class _SpawnedServer:
    def __init__(self, tables):
        ctx = mp.get_context("spawn")
        self._ready = ctx.Queue()
        self._stop = ctx.Event()
        self._proc = ctx.Process(target=_serve, args=(tables, self._ready, self._stop), daemon=True)

    def __enter__(self) -> str:
        self._proc.start()
        address = _get(self._ready, [self._proc], _STARTUP_TIMEOUT)
        if address is None:
            self._proc.kill()
            raise ReplayError("bench server failed to start")
        return address

    def __exit__(self, *exc):
        self._stop.set()
        self._proc.join(timeout=10)
        if self._proc.is_alive():
            self._proc.kill()


def _get(q, procs, timeout: float):
    """Read from ``q``, giving up early once every process in ``procs`` has died."""
    import queue as _queue
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            return q.get(timeout=0.2)
        except _queue.Empty:
            if not any(p.is_alive() for p in procs):
                try:
                    return q.get_nowait()
                except _queue.Empty:
                    return None
    return None


# client processes


def _client_main(idx: int, cfg: BenchConfig, address: str, start_at, go, results) -> None:
    from replaystore.client import Client
    try:
        rng = np.random.default_rng(cfg.seed * 1_000_003 + idx)
        payloads = [rng.random(cfg.payload_bytes // 4, dtype=np.float32)
                    for _ in range(_PAYLOAD_POOL)]
        tables = cfg.table_names()
        role = cfg.role(idx)
        client = Client(address)
        think = cfg.think_time_ms / 1000.0
        if role == "insert":
            stream = client.writer(cfg.chunk_length, cfg.chunk_length)
        else:
            stream = client.sampler(tables[idx % len(tables)],
                                    max_in_flight_samples_per_worker=cfg.max_in_flight)
        results.put(("ready", idx, None))
        go.wait()
        t0 = start_at.value
        end = t0 + cfg.duration_s
        buckets = [0] * int(np.ceil(cfg.duration_s))
        latencies: list[float] = []
        ops = 0
        table_rr = idx
        while True:
            now = time.monotonic()
            if now >= end:
                break
            if role == "insert":
                stream.append(payloads[ops % _PAYLOAD_POOL])
                stream.create_item(tables[table_rr % len(tables)], 1, 1.0)
                table_rr += 1
            else:
                if stream.next() is None:
                    break
            done = time.monotonic()
            if done >= end:
                # the op finished outside the window; count it for conservation only
                ops += 1
                break
            ops += 1
            if now >= t0:
                buckets[min(int(now - t0), len(buckets) - 1)] += 1
                if len(latencies) < _MAX_LATENCIES:
                    latencies.append((done - now) * 1000.0)
            if think:
                time.sleep(think)
        in_window = sum(buckets)
        stream.close()
        client.close()
        results.put(("done", idx, {"client": idx, "role": role, "ops": in_window,
                                   "issued": ops, "per_second": buckets,
                                   "latencies": latencies}))
    except BaseException as e:  # report instead of hanging the coordinator
        results.put(("error", idx, f"{type(e).__name__}: {e}"))


def _prefill(cfg: BenchConfig, address: str) -> None:
    from replaystore.client import Client
    rng = np.random.default_rng(cfg.seed)
    with Client(address) as client, client.writer(1, 1) as writer:
        for i in range(cfg.prefill_items):
            writer.append(rng.random(cfg.payload_bytes // 4, dtype=np.float32))
            for t in cfg.table_names():
                writer.create_item(t, 1, 1.0)


def _server_counters(address: str) -> dict[str, dict[str, int]]:
    from replaystore.client import Client
    with Client(address) as client:
        info = client.server_info()
    return {name: t["rate_limiter"] for name, t in info["tables"].items()}


def _run(cfg: BenchConfig, address: str) -> BenchResult:
    if cfg.mode in ("sample", "mixed") and cfg.prefill_items:
        _prefill(cfg, address)
    before = _server_counters(address)
    ctx = mp.get_context("spawn")
    results = ctx.Queue()
    go = ctx.Event()
    start_at = ctx.Value("d", 0.0)
    procs = [ctx.Process(target=_client_main, args=(i, cfg, address, start_at, go, results),
                         daemon=True) for i in range(cfg.num_clients)]
    for p in procs:
        p.start()
    try:
        ready = 0
        while ready < cfg.num_clients:
            msg = _get(results, procs, _STARTUP_TIMEOUT)
            if msg is None:
                raise ReplayError("bench clients failed to start")
            kind, idx, payload = msg
            if kind == "error":
                raise ReplayError(f"bench client {idx} failed: {payload}")
            ready += 1
        start_at.value = time.monotonic() + 0.05
        go.set()
        clients = []
        while len(clients) < cfg.num_clients:
            msg = _get(results, procs, cfg.duration_s + _STARTUP_TIMEOUT)
            if msg is None:
                raise ReplayError("bench clients exited without reporting")
            kind, idx, payload = msg
            if kind == "error":
                raise ReplayError(f"bench client {idx} failed: {payload}")
            clients.append(payload)
    finally:
        for p in procs:
            p.join(timeout=10)
            if p.is_alive():
                p.kill()
    after = _server_counters(address)
    return _aggregate(cfg, clients, before, after)


def _aggregate(cfg, clients, before, after) -> BenchResult:
    clients.sort(key=lambda c: c["client"])
    latencies = np.concatenate([np.asarray(c.pop("latencies"), dtype=float) for c in clients])
    for c in clients:
        c["qps"] = c["ops"] / cfg.duration_s
        c["bps"] = c["qps"] * cfg.payload_bytes
    seconds = len(clients[0]["per_second"]) if clients else 0
    per_second = []
    for s in range(seconds):
        ops = sum(c["per_second"][s] for c in clients)
        per_second.append({"second": s, "qps": ops, "bps": ops * cfg.payload_bytes})
    total_qps = sum(c["qps"] for c in clients)
    if latencies.size:
        p50, p95, p99 = np.percentile(latencies, [50, 95, 99])
    else:
        p50 = p95 = p99 = float("nan")
    counters = {}
    for name in after:
        b = before.get(name, {})
        counters[name] = {k: after[name][k] - b.get(k, 0)
                          for k in ("inserts", "samples", "deletes")}
    return BenchResult(cfg, cfg.duration_s, clients, per_second, total_qps,
                       total_qps * cfg.payload_bytes,
                       {"p50": float(p50), "p95": float(p95), "p99": float(p99)}, counters)


def run_bench(cfg: BenchConfig) -> BenchResult:
    """Run one benchmark, spawning a private server unless ``cfg.address`` is set."""
    if cfg.address:
        result = _run(cfg, cfg.address)
    else:
        with _SpawnedServer(_bench_tables(cfg)) as address:
            result = _run(cfg, address)
    if cfg.out:
        result.write_jsonl(cfg.out)
    return result


def run_insert_bench(cfg: BenchConfig) -> BenchResult:
    return run_bench(_with(cfg, mode="insert"))


def run_sample_bench(cfg: BenchConfig) -> BenchResult:
    return run_bench(_with(cfg, mode="sample"))


def run_sharded_tables_bench(cfg: BenchConfig,
                             table_counts=(1, 2, 4, 8)) -> dict[int, BenchResult]:
    """Insert throughput as a function of how many tables the writes rotate over."""
    out = {}
    for n in table_counts:
        sub = _with(cfg, mode="insert", num_tables=n,
                    out=None if cfg.out is None else _suffixed(cfg.out, f"tables{n}"))
        out[n] = run_bench(sub)
    return out


def is_plateau(qps_before: float, qps_doubled: float) -> bool:
    """True when doubling clients gained less than 5% throughput."""
    return qps_doubled < qps_before * (1 + PLATEAU_GAIN)


def _with(cfg: BenchConfig, **changes) -> BenchConfig:
    d = asdict(cfg)
    d.update(changes)
    return BenchConfig(**d)


def _suffixed(path: str, tag: str) -> str:
    p = Path(path)
    return str(p.with_name(f"{p.stem}-{tag}{p.suffix}"))
