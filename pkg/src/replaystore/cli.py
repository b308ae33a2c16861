"""Command line entry point: ``replaystore serve|bench|info|checkpoint``."""

from __future__ import annotations

import argparse
import json
import logging
import signal
import sys

from replaystore.errors import ReplayError


def _serve(args) -> int:
    from replaystore.server import Server, ServerConfig
    cfg = ServerConfig.from_file(args.config)
    if args.port is not None:
        cfg.port = args.port
    server = Server(cfg).start()
    print(f"listening on {server.endpoint}", flush=True)
    signal.signal(signal.SIGTERM, lambda *_: server.stop())
    try:
        server.wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _bench(args) -> int:
    from replaystore import bench
    cfg = bench.BenchConfig(
        mode="insert" if args.mode == "sharded" else args.mode,
        payload_bytes=args.payload_bytes, num_clients=args.clients,
        num_tables=args.tables, duration_s=args.duration, chunk_length=args.chunk_length,
        seed=args.seed, out=args.out, max_in_flight=args.max_in_flight,
        think_time_ms=args.think_time_ms, address=args.address,
        prefill_items=args.prefill)
    if args.mode == "sharded":
        results = bench.run_sharded_tables_bench(cfg)
        base = results[min(results)].total_qps
        for n, r in results.items():
            print(r.summary())
            print()
        print(f"{'tables':>6} {'QPS':>10} {'vs 1':>6}")
        for n, r in results.items():
            print(f"{n:>6} {r.total_qps:>10.1f} {r.total_qps / base if base else 0:>6.2f}")
        return 0
    result = bench.run_bench(cfg)
    print(result.summary())
    return 0


def _info(args) -> int:
    from replaystore.client import Client
    with Client(args.address) as c:
        print(json.dumps(c.server_info(), indent=2))
    return 0


def _checkpoint(args) -> int:
    from replaystore.client import Client
    with Client(args.address) as c:
        print(c.checkpoint())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="replaystore", description="Experience replay server and tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run a server")
    s.add_argument("--config", required=True, help="JSON server config")
    s.add_argument("--port", type=int, help="override the configured port")
    s.set_defaults(func=_serve)

    b = sub.add_parser("bench", help="measure insert/sample throughput")
    b.add_argument("--mode", choices=["insert", "sample", "mixed", "sharded"], default="insert",
                   help="sharded sweeps 1, 2, 4 and 8 tables with insert clients")
    b.add_argument("--payload-bytes", type=int, default=4000)
    b.add_argument("--clients", type=int, default=1)
    b.add_argument("--tables", type=int, default=1)
    b.add_argument("--duration", type=float, default=10.0, help="seconds")
    b.add_argument("--chunk-length", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="write line-delimited JSON records here")
    b.add_argument("--max-in-flight", type=int, default=8, help="sampler prefetch window")
    b.add_argument("--think-time-ms", type=float, default=0.0,
                   help="pause after every operation to keep clients below saturation")
    b.add_argument("--prefill", type=int, default=1000, help="items loaded before sampling")
    b.add_argument("--address", help="existing server host:port (default: spawn one)")
    b.set_defaults(func=_bench)

    i = sub.add_parser("info", help="print server info")
    i.add_argument("--address", required=True)
    i.set_defaults(func=_info)

    c = sub.add_parser("checkpoint", help="ask a server to checkpoint")
    c.add_argument("--address", required=True)
    c.set_defaults(func=_checkpoint)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ReplayError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
