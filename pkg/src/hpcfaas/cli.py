"""Command-line entry point: ``hpcfaas <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Data goes to
standard output, diagnostics to standard error.  Flags override
environment variables, which override defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import signal
import statistics
import sys
import time
from pathlib import Path

from . import __version__
from .core import FaasError, FunctionKind, FunctionSpec, ResourceVector

log = logging.getLogger("hpcfaas")


class UsageError(Exception):
    def __init__(self, message, reported=False):
        super().__init__(message)
        self.reported = reported


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message, reported=True)


def _env(name, default=None):
    return os.environ.get(name, default)


# -- rm ----------------------------------------------------------------------------

def cmd_rm_serve(args) -> int:
    from .manager import ResourceManager
    from .policy import ColocationPolicy, HistoryStore, PolicyConfig
    from .rest import RMServer, executor_drainer, executor_revoker
    history = HistoryStore(args.history) if args.history else HistoryStore()
    rm = ResourceManager(ColocationPolicy(PolicyConfig.from_env(), history),
                         idle_lease_timeout_s=args.idle_lease_timeout_s,
                         drainer=executor_drainer, revoker=executor_revoker)
    server = RMServer(rm, args.listen)
    stop = _stop_on_signals()
    server.start()
    print(json.dumps({"url": server.url}), flush=True)
    stop.wait()
    server.stop()
    return 0


def _stop_on_signals():
    import threading
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    return stop


# -- executor ----------------------------------------------------------------------

def cmd_executor_serve(args) -> int:
    import threading
    from .executor import Executor, ExecutorConfig
    if not args.rm:
        raise UsageError("--rm (or RFAAS_RM_ENDPOINT) is required")
    resources = None
    if args.cores is not None or args.memory_mb is not None:
        resources = ResourceVector(args.cores or (os.cpu_count() or 1), args.memory_mb or 1024,
                                   args.gpus)
    config = ExecutorConfig(node_id=args.node_id, rm_endpoint=args.rm, listen_addr=args.listen,
                            warm_pool_budget_mb=args.warm_pool_mb, serving_cores=args.serving_cores,
                            mode=args.mode, resources=resources)
    ex = Executor(config)
    ex.start()
    print(json.dumps({"node_id": config.node_id, "endpoint": ex.endpoint}), flush=True)

    def on_signal(signum, frame):
        threading.Thread(target=ex.drain, args=(signum == signal.SIGINT,), daemon=True).start()
    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    while not ex.wait(0.5):
        pass
    ex.wait_deregistered(10)
    print(json.dumps({"drained": ex.report.to_dict()}), flush=True)
    return 0


# -- invoke ------------------------------------------------------------------------

def _spec_from_args(args, kind=FunctionKind.COMPUTE) -> FunctionSpec:
    return FunctionSpec(args.function_id or args.image, args.image,
                        ResourceVector(args.cores, args.memory_mb, args.gpus),
                        args.max_duration_ms, kind)


def _result_json(result) -> dict:
    try:
        payload = result.payload.decode()
        encoding = "utf-8"
    except UnicodeDecodeError:
        payload = result.payload.hex()
        encoding = "hex"
    return {"invocation_id": result.invocation_id, "status": result.status.name.lower(),
            "payload": payload, "payload_encoding": encoding,
            "timings": {"queue_ms": result.timings.queue_ms, "sandbox_ms": result.timings.sandbox_ms,
                        "exec_ms": result.timings.exec_ms}}


def cmd_invoke(args) -> int:
    from .client import open_function
    if not args.rm:
        raise UsageError("--rm (or RFAAS_RM_ENDPOINT) is required")
    payload = Path(args.payload_file).read_bytes() if args.payload_file else args.payload.encode()
    handle = open_function(_spec_from_args(args), args.rm, mode=args.mode)
    failed = False
    try:
        for _ in range(args.count):
            result = handle.invoke(payload)
            failed |= not result.ok
            print(json.dumps(_result_json(result)), flush=True)
    finally:
        handle.close()
    return 2 if failed else 0


# -- plan --------------------------------------------------------------------------

def cmd_plan(args) -> int:
    from .offload import (OffloadParams, max_remote_inflight, min_local_batch, partition_work,
                          simulate_plan)
    params = OffloadParams(args.t_local_ms, args.t_inv_ms, args.l_ms, args.b_mbs, args.data_mb)
    plan = partition_work(args.tasks, params)
    sim = simulate_plan(plan, params)
    out = plan.to_dict()
    out.update({"min_local_batch": min_local_batch(params),
                "simulated_makespan_ms": sim.makespan_ms, "local_wait_ms": sim.wait_ms})
    try:
        out["max_remote_inflight"] = max_remote_inflight(params)
    except FaasError:
        out["max_remote_inflight"] = None
    print(json.dumps(out))
    return 0


# -- simulate / gen-trace ----------------------------------------------------------

def cmd_simulate(args) -> int:
    from .sim import SCENARIOS, SimWorkload, load_trace, run_simulation, write_reports
    from .sim.simulator import SimConfig
    from .policy import PolicyConfig
    if not args.trace and not args.workload:
        raise UsageError("give --trace, --workload or both")
    workload = SimWorkload.load(args.workload, args.seed) if args.workload else SimWorkload()
    trace = load_trace(args.trace) if args.trace else None
    config = SimConfig(policy=PolicyConfig.from_env(), queue_functions=args.queue_timeout_s > 0,
                       queue_timeout_s=args.queue_timeout_s,
                       reserved_serving_cores=args.reserved_serving_cores)
    scenarios = SCENARIOS if args.scenario == "all" else (args.scenario,)
    metrics = [run_simulation(workload, s, config, trace) for s in scenarios]
    csv_path, json_path = write_reports(metrics, args.out)
    sys.stdout.write(csv_path.read_text())
    log.info("wrote %s and %s", csv_path, json_path)
    return 0


def cmd_gen_trace(args) -> int:
    from .sim import gen_trace, write_trace
    streams, _ = gen_trace(args.nodes, args.hours, args.seed, args.interval_s,
                           args.cores, args.memory_mb)
    if args.out:
        write_trace(streams, args.out)
    else:
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "trace.csv"
            write_trace(streams, path)
            sys.stdout.write(path.read_text())
    return 0


# -- bench -------------------------------------------------------------------------

BENCH_COLUMNS = ["invocation", "mode", "total_us", "queue_ms", "sandbox_ms", "exec_ms"]


def percentile(values, q):
    """Nearest-rank percentile."""
    import math
    ordered = sorted(values)
    return ordered[max(0, math.ceil(q / 100.0 * len(ordered)) - 1)]


def run_latency_bench(rm_endpoint, mode: str, n: int, image: str = "builtin/noop",
                      payload: bytes = b"", warmup: int = 10) -> list:
    """Invoke a function ``n`` times over one handle; returns (total_us, timings) rows."""
    from .client import open_function
    spec = FunctionSpec(f"bench-{mode}", image, ResourceVector(1, 64, 0), 10_000)
    handle = open_function(spec, rm_endpoint, mode=mode)
    rows = []
    try:
        for _ in range(warmup if mode != "cold" else 0):
            handle.invoke(payload)
        for _ in range(n):
            start = time.perf_counter()
            result = handle.invoke(payload)
            total_us = (time.perf_counter() - start) * 1e6
            if not result.ok:
                raise FaasError(f"benchmark invocation failed: {result.payload!r}")
            rows.append((total_us, result.timings))
    finally:
        handle.close()
    return rows


def cmd_bench_latency(args) -> int:
    from .executor import Executor, ExecutorConfig
    from .rest import RMServer
    server = ex = None
    rm = args.rm
    if not rm:
        server = RMServer().start()
        rm = server.url
        ex = Executor(ExecutorConfig("bench-node", rm, resources=ResourceVector(4, 4096, 0),
                                     warm_pool_budget_mb=1024)).start()
    try:
        rows = run_latency_bench(rm, args.mode, args.n, args.image)
    finally:
        if ex is not None:
            ex.drain(immediate=True)
        if server is not None:
            server.stop()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for i, (total, t) in enumerate(rows):
        w.writerow([i, args.mode, f"{total:.1f}", t.queue_ms, t.sandbox_ms, t.exec_ms])
    totals = [r[0] for r in rows]
    w.writerow(["p50", args.mode, f"{statistics.median(totals):.1f}", "", "", ""])
    w.writerow(["p95", args.mode, f"{percentile(totals, 95):.1f}", "", "", ""])
    return 0


# -- memsvc ------------------------------------------------------------------------

def cmd_memsvc(args) -> int:
    from .client import FunctionHandle
    from .manager import memory_service_spec
    from .rest import RMClient
    if not args.rm:
        raise UsageError("--rm (or RFAAS_RM_ENDPOINT) is required")
    rm = RMClient(args.rm)
    if args.op == "alloc":
        spec = memory_service_spec("memsvc", args.size_mb)
        handle = FunctionHandle(spec, rm)
        handle.connect()
        block = handle.alloc(args.size_mb << 20)
        print(json.dumps({"lease_id": handle.current_lease.lease_id, "block_id": block,
                          "endpoint": handle.current_lease.endpoint}))
        handle.detach()
        return 0
    if not args.lease:
        raise UsageError("--lease is required")
    if args.op == "release":
        print(json.dumps(rm.release_lease(args.lease).to_dict()))
        return 0
    lease = rm.lookup_lease(args.lease)
    handle = FunctionHandle(lease.spec, rm)
    handle.attach(lease)
    try:
        if args.op == "put":
            data = Path(args.data_file).read_bytes() if args.data_file else args.data.encode()
            handle.put(args.block, args.offset, data)
            print(json.dumps({"written": len(data)}))
        elif args.op == "get":
            data = handle.get(args.block, args.offset, args.length)
            if args.out:
                Path(args.out).write_bytes(data)
            else:
                sys.stdout.buffer.write(data)
                sys.stdout.flush()
        elif args.op == "reclaim":
            handle.reclaim(args.block)
            print(json.dumps({"reclaimed": args.block}))
    finally:
        handle.detach()
    return 0


# -- parser ------------------------------------------------------------------------

def _add_function_args(p):
    p.add_argument("--image", default="builtin/echo", help="function image (registry key)")
    p.add_argument("--function-id", help="defaults to the image")
    p.add_argument("--cores", type=int, default=1)
    p.add_argument("--memory-mb", type=int, default=64)
    p.add_argument("--gpus", type=int, default=0)
    p.add_argument("--max-duration-ms", type=int, default=10_000)


def build_parser() -> argparse.ArgumentParser:
    rm_default = _env("RFAAS_RM_ENDPOINT")
    parser = _Parser(prog="hpcfaas", description="Serverless functions on idle batch-node resources.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    rm = sub.add_parser("rm", help="resource manager")
    rm_sub = rm.add_subparsers(dest="rm_command", metavar="ACTION")
    serve = rm_sub.add_parser("serve", help="run the resource manager REST service")
    serve.add_argument("--listen", default=_env("RM_LISTEN_ADDR", "127.0.0.1:8000"))
    serve.add_argument("--idle-lease-timeout-s", type=float,
                       default=float(_env("RM_IDLE_LEASE_TIMEOUT_S", "300")))
    serve.add_argument("--history", help="JSONL co-location history file")
    serve.set_defaults(func=cmd_rm_serve)

    ex = sub.add_parser("executor", help="per-node executor")
    ex_sub = ex.add_subparsers(dest="executor_command", metavar="ACTION")
    serve = ex_sub.add_parser("serve", help="register with the resource manager and serve until drained")
    serve.add_argument("--node-id", default=_env("EXECUTOR_NODE_ID", os.uname().nodename))
    serve.add_argument("--rm", default=rm_default, help="resource manager URL")
    serve.add_argument("--listen", default=_env("EXECUTOR_LISTEN_ADDR", "127.0.0.1:0"))
    serve.add_argument("--warm-pool-mb", type=int, default=1024)
    serve.add_argument("--serving-cores", type=int, default=1)
    serve.add_argument("--mode", choices=("hot", "warm"), default="warm")
    serve.add_argument("--cores", type=int, help="cores to offer (default: all)")
    serve.add_argument("--memory-mb", type=int, help="memory to offer (default: all)")
    serve.add_argument("--gpus", type=int, default=0)
    serve.set_defaults(func=cmd_executor_serve)

    inv = sub.add_parser("invoke", help="lease a function and invoke it")
    inv.add_argument("--rm", default=rm_default)
    _add_function_args(inv)
    inv.add_argument("--payload", default="")
    inv.add_argument("--payload-file")
    inv.add_argument("--mode", choices=("default", "hot", "warm", "cold"), default="default")
    inv.add_argument("--count", type=int, default=1)
    inv.set_defaults(func=cmd_invoke)

    plan = sub.add_parser("plan", help="split tasks between local and remote execution")
    plan.add_argument("--t-local-ms", type=float, required=True)
    plan.add_argument("--t-inv-ms", type=float, required=True)
    plan.add_argument("--l-ms", type=float, required=True)
    plan.add_argument("--b-mbs", type=float, required=True, help="bandwidth in MB/s")
    plan.add_argument("--data-mb", type=float, required=True, help="input size per invocation")
    plan.add_argument("--tasks", type=int, required=True)
    plan.set_defaults(func=cmd_plan)

    sim = sub.add_parser("simulate", help="replay a trace and/or workload")
    sim.add_argument("--trace")
    sim.add_argument("--workload")
    sim.add_argument("--scenario", choices=("exclusive", "ideal_partial", "colocated", "all"),
                     default="all")
    sim.add_argument("--out", required=True, help="directory for metrics.csv and metrics.json")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--queue-timeout-s", type=float, default=0.0,
                     help="queue rejected functions this long (0: reject immediately)")
    sim.add_argument("--reserved-serving-cores", type=int, default=0)
    sim.set_defaults(func=cmd_simulate)

    gen = sub.add_parser("gen-trace", help="write a synthetic node-state trace")
    gen.add_argument("--nodes", type=int, required=True)
    gen.add_argument("--hours", type=float, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--interval-s", type=float, default=120.0)
    gen.add_argument("--cores", type=int, default=36)
    gen.add_argument("--memory-mb", type=int, default=128 * 1024)
    gen.add_argument("--out", help="file (default: stdout)")
    gen.set_defaults(func=cmd_gen_trace)

    bench = sub.add_parser("bench", help="microbenchmarks")
    bench_sub = bench.add_subparsers(dest="bench_command", metavar="BENCH")
    lat = bench_sub.add_parser("latency", help="per-invocation latency CSV with p50/p95 rows")
    lat.add_argument("--mode", choices=("hot", "warm", "cold"), default="warm")
    lat.add_argument("--n", type=int, default=1000)
    lat.add_argument("--image", default="builtin/noop")
    lat.add_argument("--rm", default=rm_default,
                     help="use this deployment (default: start a local one)")
    lat.set_defaults(func=cmd_bench_latency)

    mem = sub.add_parser("memsvc", help="memory-service leases")
    mem.add_argument("op", choices=("alloc", "put", "get", "reclaim", "release"))
    mem.add_argument("--rm", default=rm_default)
    mem.add_argument("--size-mb", type=int, default=1024, help="block size for alloc")
    mem.add_argument("--lease")
    mem.add_argument("--block", type=int, default=0)
    mem.add_argument("--offset", type=int, default=0)
    mem.add_argument("--length", type=int, default=0)
    mem.add_argument("--data", default="")
    mem.add_argument("--data-file")
    mem.add_argument("--out")
    mem.set_defaults(func=cmd_memsvc)

    parser._groups = {"rm": rm, "executor": ex, "bench": bench}
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            group = parser._groups.get(args.command)
            (group or parser).print_usage(sys.stderr)
            print(f"{(group or parser).prog}: error: a command is required", file=sys.stderr)
            return 1
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            stream=sys.stderr, format="%(asctime)s %(name)s %(levelname)s %(message)s")
        return args.func(args)
    except UsageError as exc:
        if not exc.reported:
            print(f"hpcfaas: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (FaasError, OSError, ValueError) as exc:
        print(f"hpcfaas: error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 2


if __name__ == "__main__":
    sys.exit(main())
