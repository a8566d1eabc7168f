"""Acceptance gate: one test per criterion, each reported as PASS/FAIL in the summary."""

from __future__ import annotations

import random
import statistics
import threading
import time

import pytest

from conftest import RawChannel, sandbox_children, spec
from hpcfaas import protocol as p
from hpcfaas.cli import percentile, run_latency_bench
from hpcfaas.core import (FunctionSpec, InvocationStatus, LeaseState, ResourceVector,
                          WorkloadSignature, rv_fits)
from hpcfaas.manager import (NoCapacityError, PolicyDeniedError, ResourceManager, UnknownLeaseError,
                             DoubleReleaseError, memory_service_spec)
from hpcfaas.memsvc import MIB, MemoryService, TerminatedLeaseError
from hpcfaas.offload import OffloadParams, min_local_batch, partition_work, simulate_plan
from hpcfaas.policy import (ColocationPolicy, ColocationRecord, CounterSample, JobDescriptor,
                            PolicyConfig)
from hpcfaas.sim import (BatchJob, ClusterConfig, SimWorkload, estimate_idle_periods, gen_trace,
                         generate_function_stream, run_simulation, write_reports)
from hpcfaas.sim.trace import match_windows


def linear_min_batch(t_local, t_inv, l_ms):
    n = 0
    while n * t_local < t_inv + l_ms:
        n += 1
    return n


def random_params(rng):
    # Half the draws are small integers so that exact ties get exercised.
    if rng.random() < 0.5:
        return OffloadParams(rng.randint(1, 20), rng.randint(0, 100), rng.randint(0, 30),
                             rng.randint(1, 1000), rng.randint(0, 50))
    return OffloadParams(rng.uniform(0.5, 50), rng.uniform(0, 200), rng.uniform(0, 50),
                         rng.uniform(1, 1000), rng.uniform(0.001, 50))


@pytest.mark.criterion(1, "minimal local batch equals linear-search oracle (10,000 draws)")
def test_min_local_batch_matches_linear_search():
    rng = random.Random(1)
    start = time.perf_counter()
    for _ in range(10_000):
        prm = random_params(rng)
        assert min_local_batch(prm) == linear_min_batch(prm.t_local_ms, prm.t_inv_ms, prm.l_ms), prm
    assert time.perf_counter() - start < 5.0


@pytest.mark.criterion(2, "partition plans never leave the application waiting (1,000 plans)")
def test_no_wait_property():
    rng = random.Random(2)
    checked = 0
    violations = []
    while checked < 1000:
        prm = random_params(rng)
        if prm.data_inv_mb <= 0:
            continue
        plan = partition_work(rng.randint(0, 400), prm)
        if plan.remote_tasks == 0:
            continue
        checked += 1
        sim = simulate_plan(plan, prm)
        if sim.remote_finish_ms > sim.local_finish_ms:
            violations.append((prm, plan, sim))
    assert violations == []


@pytest.mark.criterion(3, "median latency hot < warm < cold over 1,000 invocations each")
def test_latency_ordering(cluster):
    cluster.add_executor("lat0", cores=4, memory_mb=4096)
    start = time.perf_counter()
    medians = {}
    for mode in ("hot", "warm", "cold"):
        rows = run_latency_bench(cluster.url, mode, 1000)
        totals = [r[0] for r in rows]
        medians[mode] = statistics.median(totals)
        if mode == "hot":
            p95_hot = percentile(totals, 95)
    print(f"median us: {medians}, p95 hot: {p95_hot:.1f}")
    assert p95_hot > 0
    assert medians["hot"] < medians["warm"] < medians["cold"]
    assert time.perf_counter() - start < 60.0


def _start_three(cluster, sleep_ms, max_duration_ms):
    ex = cluster.add_executor("drain0", cores=4, memory_mb=4096)
    lease = cluster.rm.acquire_lease(spec("builtin/sleep", cores=3, max_duration_ms=max_duration_ms))
    ch = RawChannel(lease)
    for i in (1, 2, 3):
        ch.send(i, str(sleep_ms).encode())
    deadline = time.monotonic() + 10
    while ex.live_sandboxes() < 3 and time.monotonic() < deadline:
        time.sleep(0.01)
    time.sleep(0.2)
    return ex, ch


@pytest.mark.criterion(4, "immediate and graceful drain semantics with 3 in-flight functions")
def test_drain_semantics(cluster):
    # Immediate: every in-flight invocation is terminated, no sandbox survives.
    ex, ch = _start_three(cluster, 3000, 5000)
    report = cluster.rm.remove_node("drain0", immediate=True)
    replies = [ch.recv() for _ in range(4)]
    terminated = [r for r in replies if r.invocation_id != p.NOTICE_ID]
    assert sorted(r.invocation_id for r in terminated) == [1, 2, 3]
    assert all(r.status is InvocationStatus.TERMINATED for r in terminated)
    assert replies[-1].invocation_id == p.NOTICE_ID
    assert report.aborted == 3 and report.completed == 0
    assert ex.live_sandboxes() == 0
    assert sandbox_children() == []
    ch.close()

    # Graceful: the three finish, a fourth is turned away, all within the budget.
    cluster.executors.clear()
    max_duration_ms = 1500
    ex, ch = _start_three(cluster, 800, max_duration_ms)
    t0 = time.monotonic()
    result = {}
    remover = threading.Thread(
        target=lambda: result.update(report=cluster.rm.remove_node("drain0")))
    remover.start()
    while ex.drain_mode is None:
        time.sleep(0.005)
    ch.send(4, b"10")
    replies = {}
    while p.NOTICE_ID not in replies:
        msg = ch.recv()
        replies[msg.invocation_id] = msg
    remover.join(10)
    elapsed = time.monotonic() - t0
    assert [replies[i].status for i in (1, 2, 3)] == [InvocationStatus.OK] * 3
    assert replies[4].status is InvocationStatus.ERROR and replies[4].payload == b"draining"
    assert result["report"].completed == 3
    assert elapsed < max_duration_ms / 1000 + 1.0
    assert sandbox_children() == []
    ch.close()


class _Journal:
    def __init__(self):
        self.entries = []

    def __call__(self, op, args, result):
        self.entries.append((op, args, result))


def _replay(entries, nodes):
    oracle = ResourceManager(clock=lambda: 0)
    for n in nodes:
        oracle.register_node(n)
    for op, args, result in entries:
        if op == "acquire":
            try:
                got = oracle.acquire_lease(*args)
            except (NoCapacityError, PolicyDeniedError) as exc:
                got = exc
            if isinstance(result, Exception):
                assert type(got) is type(result)
            else:
                assert (got.lease_id, got.node_id) == (result.lease_id, result.node_id)
        elif op == "release":
            oracle.release_lease(*args)
    return oracle


@pytest.mark.criterion(5, "no oversubscription under a 100-client storm; replay oracle agrees")
def test_acquire_release_storm():
    journal = _Journal()
    rm = ResourceManager(journal=journal)
    nodes = [{"node_id": f"n{i}", "total": ResourceVector(8 + i, 4096, i % 2).to_dict()}
             for i in range(10)]
    for n in nodes:
        rm.register_node(n)
    shapes = [ResourceVector(1, 128, 0), ResourceVector(2, 512, 0), ResourceVector(3, 1024, 0),
              ResourceVector(1, 64, 1)]
    stop = threading.Event()
    violations = []

    def watch():
        while not stop.is_set():
            for node in rm.list_nodes():
                if not rv_fits(node.total, node.leased):
                    violations.append(node)

    def client(seed):
        rng = random.Random(seed)
        held = []
        for _ in range(100):
            if held and rng.random() < 0.5:
                try:
                    rm.release_lease(held.pop(rng.randrange(len(held))))
                except (UnknownLeaseError, DoubleReleaseError) as exc:
                    violations.append(exc)
            else:
                shape = rng.choice(shapes)
                fs = FunctionSpec(f"f{seed}", "builtin/noop", shape, 1000)
                try:
                    held.append(rm.acquire_lease(fs, f"c{seed}").lease_id)
                except (NoCapacityError, PolicyDeniedError):
                    pass

    watcher = threading.Thread(target=watch)
    watcher.start()
    threads = [threading.Thread(target=client, args=(i,)) for i in range(100)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stop.set()
    watcher.join()

    assert violations == []
    ops = [e for e in journal.entries if e[0] in ("acquire", "release")]
    assert len(ops) == 10_000
    oracle = _replay(journal.entries, nodes)
    live = {n.node_id: n.leased for n in rm.list_nodes()}
    assert live == {n.node_id: n.leased for n in oracle.list_nodes()}
    assert ({l.lease_id: l.state for l in rm.leases()}
            == {l.lease_id: l.state for l in oracle.leases()})
    for node in rm.list_nodes():
        active = [l.resources for l in rm.leases()
                  if l.node_id == node.node_id and l.state is LeaseState.ACTIVE]
        assert sum(active, ResourceVector()) == node.leased


def _billing_reduction(cluster, job):
    work = SimWorkload([job], [], cluster, None)
    exclusive = run_simulation(work, "exclusive").batch_core_hours_billed
    partial = run_simulation(work, "ideal_partial").batch_core_hours_billed
    return (exclusive - partial) / exclusive


@pytest.mark.criterion(6, "billed-core reduction 8/72 for 64 ranks and 25% for 9-of-12 GPU node")
def test_billing_arithmetic():
    ranks = _billing_reduction(ClusterConfig(2, 36, 131072, 0),
                               BatchJob("mpi64", 0.0, 3600.0, 2, 32))
    assert ranks == pytest.approx(8 / 72, abs=1e-4)
    assert round(ranks * 100, 2) == pytest.approx(11.11, abs=0.01)
    gpu = _billing_reduction(ClusterConfig(1, 12, 65536, 4),
                             BatchJob("gpu9", 0.0, 3600.0, 1, 9, gpus_per_node=4))
    assert round(gpu * 100, 2) == pytest.approx(25.00, abs=0.01)


def saturating_workload():
    cluster = ClusterConfig(2, 36, 131072, 0)
    job = BatchJob("app", 0.0, 3600.0, 2, 32, memory_mb_per_node=65536, shared_flag=True)
    # 8 free cores, 1 s functions, 8 arrivals per second: exactly saturating.
    fns = generate_function_stream(8 * 3600, 8.0, cores=1, memory_mb=1024, exec_ms=1000.0,
                                   jitter=False)
    return SimWorkload([job], fns, cluster, 3600.0)


@pytest.mark.criterion(7, "core utilization colocated >= ideal_partial >= exclusive, colocated >= 0.99")
def test_utilization_ordering():
    work = saturating_workload()
    m = {s: run_simulation(work, s) for s in ("exclusive", "ideal_partial", "colocated")}
    util = {s: v.core_utilization for s, v in m.items()}
    print(util)
    assert util["colocated"] >= util["ideal_partial"] >= util["exclusive"]
    assert util["colocated"] >= 0.99


@pytest.mark.criterion(8, "idle-period bounds contain truth; median error <= sampling interval")
def test_idle_period_estimator():
    delta = 120.0
    streams, windows = gen_trace(200, 48, seed=8, interval_s=delta)
    periods = [pd for s in streams.values() for pd in estimate_idle_periods(s, delta)]
    pairs = match_windows(periods, windows)
    assert len(pairs) == len(periods)
    outside = [(pd, w) for pd, w in pairs
               if not pd.duration_bounds[0] <= w.duration_s <= pd.duration_bounds[1]]
    assert outside == []
    errors = [abs(pd.duration_estimate_s - w.duration_s) for pd, w in pairs]
    assert statistics.median(errors) <= delta
    true_median = statistics.median(w.duration_s for w in windows)
    assert 300.0 <= true_median <= 390.0
    est_median = statistics.median(pd.duration_estimate_s for pd in periods)
    assert 300.0 - delta <= est_median <= 390.0 + delta


@pytest.mark.criterion(9, "memory block agrees byte-for-byte with a shadow array; fails after termination")
def test_memory_service_integrity(tmp_path):
    from hpcfaas.core import Lease
    svc = MemoryService(tmp_path)
    fs = memory_service_spec("mem", 10)
    lease = Lease("lease-m", "n0", "mem", fs.required, state=LeaseState.ACTIVE, spec=fs)
    size = 10 * MIB
    block = svc.allocate_block(lease, size)
    shadow = bytearray(size)
    rng = random.Random(9)
    for i in range(1000):
        if i == 500:
            svc.reclaim(block)
        offset = rng.randrange(size)
        length = rng.randint(0, min(4096, size - offset))
        if rng.random() < 0.5:
            data = rng.randbytes(length)
            svc.put(block, offset, data)
            shadow[offset:offset + length] = data
        else:
            assert svc.get(block, offset, length) == bytes(shadow[offset:offset + length])
    assert svc.get(block, 0, size) == bytes(shadow)

    svc.terminate_lease(lease.lease_id)
    for op in (lambda: svc.get(block, 0, 1), lambda: svc.put(block, 0, b"x"),
               lambda: svc.reclaim(block)):
        with pytest.raises(TerminatedLeaseError):
            op()


BATCH_SIG = WorkloadSignature("lulesh", 64)
FUNC_SIG = WorkloadSignature("builtin/busy")
HOT = CounterSample(0.7, 0.7, 0.1)
COOL = CounterSample(0.2, 0.2, 0.1)


def expected_verdict(opt_in, hero, fits, history, stress):
    """Reference table: gates in order, the first one that fires decides."""
    if opt_in == "none":
        return (False, "not-opted-in")
    if hero:
        return (False, "hero-job-exempt")
    if not fits:
        return (False, "no-capacity")
    if history == "slow":
        return (False, "interference")
    if history == "fast":
        return (True, "")
    if stress == "conflict":
        return (False, "stress-conflict")
    return (True, "")


@pytest.mark.criterion(10, "policy gate table yields one documented verdict; history overrides stress")
def test_policy_gate_table():
    func = FunctionSpec("f", "builtin/busy", ResourceVector(2, 1024, 0), 1000)
    total = ResourceVector(36, 131072, 0)
    rows = 0
    for opt_in in ("shared_flag", "partition", "none"):
        for hero in (False, True):
            for fits in (True, False):
                for history in ("none", "fast", "slow"):
                    for stress in ("conflict", "compatible", "unprofiled"):
                        policy = ColocationPolicy(PolicyConfig())
                        if history != "none":
                            colocated = 1000.0 if history == "fast" else 1500.0
                            policy.record_run(ColocationRecord(BATCH_SIG, FUNC_SIG, 1000.0, colocated))
                        job_samples = {"conflict": (HOT,), "compatible": (COOL,),
                                       "unprofiled": ()}[stress]
                        job = JobDescriptor(
                            "j", BATCH_SIG, 512 if hero else 4,
                            shared_flag=opt_in == "shared_flag",
                            partition="shared" if opt_in == "partition" else "batch",
                            resources_per_node=ResourceVector(30 if fits else 35, 65536, 0),
                            samples=job_samples)
                        func_samples = None if stress == "unprofiled" else (HOT,)
                        want = expected_verdict(opt_in, hero, fits, history, stress)
                        for _ in range(3):  # deterministic: same input, same answer
                            got = policy.decide_colocation(total, ResourceVector(), job, func,
                                                           func_samples)
                            assert (got.allowed, got.reason) == want, (
                                opt_in, hero, fits, history, stress)
                        if history != "none" and want[1] not in (
                                "not-opted-in", "hero-job-exempt", "no-capacity"):
                            assert got.used_history
                        rows += 1
    assert rows == 3 * 2 * 2 * 3 * 3


def _repeated_image_run(cluster, node_id, budget_mb):
    ex = cluster.add_executor(node_id, cores=2, memory_mb=4096, warm_pool_budget_mb=budget_mb)
    from hpcfaas.client import open_function
    fs = spec("builtin/noop", memory_mb=64)
    latencies = []
    h = open_function(fs, cluster.url, mode="warm")
    try:
        for _ in range(200):
            t0 = time.perf_counter()
            assert h.invoke(b"").ok
            latencies.append(time.perf_counter() - t0)
    finally:
        h.close()
    ex.stop()
    return ex.cold_starts, statistics.mean(latencies)


@pytest.mark.criterion(11, "warm pool cuts cold starts from 200 to 1 and lowers mean latency")
def test_warm_pool_effect(cluster):
    cold_disabled, mean_disabled = _repeated_image_run(cluster, "wp-off", 0)
    cold_enabled, mean_enabled = _repeated_image_run(cluster, "wp-on", 1024)
    assert cold_disabled == 200
    assert cold_enabled == 1
    assert mean_enabled < mean_disabled


@pytest.mark.criterion(12, "simulator runs with equal seed and config write identical reports")
def test_simulator_determinism(tmp_path):
    doc = {
        "cluster": {"nodes": 4, "cores": 36},
        "horizon_s": 7200,
        "batch_jobs": [{"job_id": f"j{i}", "arrival_s": 300 * i, "duration_s": 1800,
                        "nodes": 1 + i % 3, "cores_per_node": 24 + i, "shared_flag": i % 2 == 0}
                       for i in range(8)],
        "function_generator": {"count": 2000, "rate_per_s": 0.5, "cores": 2, "exec_ms": 4000},
    }
    outputs = []
    for run in ("a", "b"):
        metrics = [run_simulation(SimWorkload.from_dict(doc, seed=12), s)
                   for s in ("exclusive", "ideal_partial", "colocated")]
        csv_path, json_path = write_reports(metrics, tmp_path / run)
        outputs.append((csv_path.read_bytes(), json_path.read_bytes()))
    assert outputs[0] == outputs[1]
