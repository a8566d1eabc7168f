"""Deterministic discrete-event replay of batch jobs and a function stream.

Scenarios:

exclusive
    batch jobs own whole nodes and are billed for them; functions run nowhere.
ideal_partial
    same placement, but jobs are billed only for the cores they request.
colocated
    as ideal_partial, plus functions are placed by the resource manager and
    co-location policy onto idle nodes and the unused cores of shared jobs.

Events at the same instant are ordered job end, job start, function end,
function start, then by id, so freed resources are visible to arrivals at
that instant and nothing is ever transiently oversubscribed.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from ..core import FunctionSpec, ResourceVector, ValidationError, WorkloadSignature
from ..manager import NoCapacityError, PolicyDeniedError, ResourceManager
from ..policy import ColocationPolicy, ColocationRecord, HistoryStore, JobDescriptor, PolicyConfig
from .trace import NodeStatus

SCENARIOS = ("exclusive", "ideal_partial", "colocated")

JOB_END, JOB_START, FN_END, FN_START = 0, 1, 2, 3


class SimulationError(Exception):
    """An internal invariant broke; always a bug, never bad input."""


@dataclass(frozen=True)
class ClusterConfig:
    nodes: int = 2
    cores: int = 36
    memory_mb: int = 128 * 1024
    gpus: int = 0

    @property
    def node_total(self) -> ResourceVector:
        return ResourceVector(self.cores, self.memory_mb, self.gpus)

    @classmethod
    def from_dict(cls, d: dict) -> ClusterConfig:
        return cls(int(d.get("nodes", 2)), int(d.get("cores", 36)),
                   int(d.get("memory_mb", 128 * 1024)), int(d.get("gpus", 0)))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class BatchJob:
    job_id: str
    arrival_s: float
    duration_s: float
    nodes: int
    cores_per_node: int
    memory_mb_per_node: int = 0
    gpus_per_node: int = 0
    shared_flag: bool = False
    sig: Optional[WorkloadSignature] = None
    partition: str = ""
    # Trace-derived occupancy is pinned to specific nodes; None lets the scheduler choose.
    node_ids: Optional[tuple] = None
    down: bool = False

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValidationError(f"job {self.job_id}: duration must be positive")
        if self.nodes < 1 or self.cores_per_node < 0:
            raise ValidationError(f"job {self.job_id}: bad node or core count")

    @property
    def per_node(self) -> ResourceVector:
        return ResourceVector(self.cores_per_node, self.memory_mb_per_node, self.gpus_per_node)

    @property
    def signature(self) -> WorkloadSignature:
        return self.sig or WorkloadSignature(self.job_id, WorkloadSignature.bucket(
            self.nodes * self.cores_per_node))

    @classmethod
    def from_dict(cls, d: dict, index: int = 0) -> BatchJob:
        try:
            return cls(
                job_id=str(d.get("job_id", f"job-{index}")),
                arrival_s=float(d["arrival_s"]),
                duration_s=float(d["duration_s"]),
                nodes=int(d["nodes"]),
                cores_per_node=int(d["cores_per_node"]),
                memory_mb_per_node=int(d.get("memory_mb_per_node", 0)),
                gpus_per_node=int(d.get("gpus_per_node", 0)),
                shared_flag=bool(d.get("shared_flag", False)),
                sig=WorkloadSignature.from_dict(d["sig"]) if d.get("sig") else None,
                partition=str(d.get("partition", "")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed batch job #{index}: {exc}") from None

    def to_dict(self) -> dict:
        d = {"job_id": self.job_id, "arrival_s": self.arrival_s, "duration_s": self.duration_s,
             "nodes": self.nodes, "cores_per_node": self.cores_per_node,
             "memory_mb_per_node": self.memory_mb_per_node, "gpus_per_node": self.gpus_per_node,
             "shared_flag": self.shared_flag, "partition": self.partition}
        if self.sig is not None:
            d["sig"] = self.sig.to_dict()
        return d


@dataclass(frozen=True)
class FunctionArrival:
    fn_id: str
    arrival_s: float
    spec: FunctionSpec
    exec_ms: float
    sig: Optional[WorkloadSignature] = None

    def __post_init__(self):
        if self.exec_ms <= 0:
            raise ValidationError(f"function {self.fn_id}: exec_ms must be positive")

    @classmethod
    def from_dict(cls, d: dict, index: int = 0) -> FunctionArrival:
        try:
            return cls(
                fn_id=str(d.get("fn_id", f"fn-{index}")),
                arrival_s=float(d["arrival_s"]),
                spec=FunctionSpec.from_dict(d["spec"]),
                exec_ms=float(d["exec_ms"]),
                sig=WorkloadSignature.from_dict(d["sig"]) if d.get("sig") else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed function arrival #{index}: {exc}") from None

    def to_dict(self) -> dict:
        d = {"fn_id": self.fn_id, "arrival_s": self.arrival_s, "spec": self.spec.to_dict(),
             "exec_ms": self.exec_ms}
        if self.sig is not None:
            d["sig"] = self.sig.to_dict()
        return d


@dataclass
class SimWorkload:
    batch_jobs: list = field(default_factory=list)
    function_stream: list = field(default_factory=list)
    cluster: Optional[ClusterConfig] = None
    horizon_s: Optional[float] = None

    @classmethod
    def from_dict(cls, d: dict, seed: int = 0) -> SimWorkload:
        if not isinstance(d, dict):
            raise ValidationError("workload must be a JSON object")
        jobs = [BatchJob.from_dict(j, i) for i, j in enumerate(d.get("batch_jobs", []))]
        fns = [FunctionArrival.from_dict(f, i) for i, f in enumerate(d.get("function_stream", []))]
        if d.get("function_generator"):
            fns.extend(generate_function_stream(seed=seed, **d["function_generator"]))
        cluster = ClusterConfig.from_dict(d["cluster"]) if d.get("cluster") else None
        horizon = d.get("horizon_s")
        return cls(jobs, fns, cluster, float(horizon) if horizon is not None else None)

    @classmethod
    def load(cls, path, seed: int = 0) -> SimWorkload:
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh), seed)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None

    def to_dict(self) -> dict:
        d = {"batch_jobs": [j.to_dict() for j in self.batch_jobs],
             "function_stream": [f.to_dict() for f in self.function_stream]}
        if self.cluster is not None:
            d["cluster"] = self.cluster.to_dict()
        if self.horizon_s is not None:
            d["horizon_s"] = self.horizon_s
        return d


def generate_function_stream(count: int, rate_per_s: float, cores: int = 1, memory_mb: int = 0,
                             exec_ms: float = 1000.0, start_s: float = 0.0, seed: int = 0,
                             image_ref: str = "builtin/busy", jitter: bool = True) -> list:
    """Poisson arrivals (or a fixed cadence with ``jitter=False``) of identical functions."""
    rng = random.Random(seed)
    spec = FunctionSpec("sim-fn", image_ref, ResourceVector(cores, memory_mb, 0),
                        max(1, int(math.ceil(exec_ms * 2))))
    out, t = [], float(start_s)
    for i in range(int(count)):
        out.append(FunctionArrival(f"fn-{i}", t, spec, float(exec_ms)))
        t += rng.expovariate(rate_per_s) if jitter else 1.0 / rate_per_s
    return out


@dataclass
class SimConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    history: tuple = ()
    reserved_serving_cores: int = 0
    queue_functions: bool = False
    queue_timeout_s: float = 0.0
    trace_jobs_shared: bool = False


@dataclass(frozen=True)
class SimMetrics:
    scenario: str
    core_utilization: float
    memory_utilization: float
    functions_completed: int
    functions_rejected: int
    batch_core_hours_billed: float
    node_throughput_relative: float
    functions_aborted: int = 0
    jobs_rejected: int = 0
    horizon_s: float = 0.0

    def __post_init__(self):
        for name in ("core_utilization", "memory_utilization"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> SimMetrics:
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


def trace_to_jobs(streams: dict, cluster: ClusterConfig, shared: bool = False,
                  interval_s: Optional[float] = None) -> list:
    """Represent a trace's busy and down stretches as node-pinned pseudo jobs."""
    from .trace import infer_interval
    step = interval_s or infer_interval(streams) or 120.0
    jobs = []
    for node_id in sorted(streams):
        stream = streams[node_id]
        i = 0
        while i < len(stream):
            s = stream[i]
            j = i
            while (j + 1 < len(stream) and stream[j + 1].state is s.state
                   and stream[j + 1].free_cores == s.free_cores
                   and stream[j + 1].free_memory_mb == s.free_memory_mb
                   and math.isclose(stream[j + 1].t_s - stream[j].t_s, step)):
                j += 1
            if s.state is not NodeStatus.IDLE:
                down = s.state is NodeStatus.DOWN
                cores = cluster.cores if down else max(0, cluster.cores - s.free_cores)
                mem = cluster.memory_mb if down else max(0, cluster.memory_mb - s.free_memory_mb)
                jobs.append(BatchJob(
                    job_id=f"trace-{node_id}-{len(jobs)}", arrival_s=s.t_s,
                    duration_s=stream[j].t_s + step - s.t_s, nodes=1,
                    cores_per_node=min(cores, cluster.cores), memory_mb_per_node=min(mem, cluster.memory_mb),
                    shared_flag=shared and not down, node_ids=(node_id,), down=down))
            i = j + 1
    return jobs


class _Node:
    __slots__ = ("node_id", "total", "job", "fn_cores", "fn_mem")

    def __init__(self, node_id, total):
        self.node_id = node_id
        self.total = total
        self.job = None
        self.fn_cores = 0
        self.fn_mem = 0


class _Run:
    """One simulation; not reusable."""

    def __init__(self, workload: SimWorkload, scenario: str, config: SimConfig,
                 node_ids: Optional[list] = None):
        if scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {', '.join(SCENARIOS)}")
        self.scenario = scenario
        self.config = config
        self.workload = workload
        cluster = workload.cluster or ClusterConfig()
        if node_ids is None:
            width = len(str(cluster.nodes - 1))
            node_ids = [f"nid{i:0{width}d}" for i in range(cluster.nodes)]
        self.nodes = {nid: _Node(nid, cluster.node_total) for nid in node_ids}
        self.order = list(node_ids)
        self.now = 0.0
        self.events: list = []
        self._seq = 0
        self.batch_queue: deque = deque()
        self.fn_queue: deque = deque()
        self.running_fns: dict = {}     # fn_id -> (lease_id, node_id, cores, mem, start)
        self.completed = 0
        self.rejected = 0
        self.aborted = 0
        self.jobs_rejected = 0
        self.billed_core_s = 0.0
        self.job_segments: list = []    # (start, end, cores, mem) per job for the cross-check
        self.fn_segments: list = []
        self.area_cores = 0.0
        self.area_mem = 0.0
        self.batch_area = 0.0
        self.down_area_cores = 0.0
        self.down_area_mem = 0.0
        self._last = 0.0
        self.horizon = self._horizon()
        self.rm = None
        if scenario == "colocated":
            history = HistoryStore()
            for rec in config.history:
                history.record_run(rec if isinstance(rec, ColocationRecord)
                                   else ColocationRecord.from_dict(rec))
            self.policy = ColocationPolicy(config.policy, history)
            self.rm = ResourceManager(self.policy, clock=lambda: int(round(self.now * 1000)),
                                      idle_lease_timeout_s=1e12)
            for nid in self.order:
                self.rm.register_node({"node_id": nid, "total": self.nodes[nid].total.to_dict(),
                                       "reserved_serving_cores": config.reserved_serving_cores})

    def _horizon(self) -> float:
        if self.workload.horizon_s is not None:
            return float(self.workload.horizon_s)
        ends = [j.arrival_s + j.duration_s for j in self.workload.batch_jobs]
        if not ends:
            ends = [f.arrival_s + f.exec_ms / 1000.0 for f in self.workload.function_stream]
        return max(ends, default=0.0)

    # -- bookkeeping -----------------------------------------------------------

    def _push(self, t, kind, key, payload):
        self._seq += 1
        heapq.heappush(self.events, (t, kind, key, self._seq, payload))

    def _used(self):
        cores = mem = batch = 0
        for n in self.nodes.values():
            if n.job is not None and not n.job.down:
                cores += n.job.cores_per_node
                mem += n.job.memory_mb_per_node
                batch += n.job.cores_per_node
            cores += n.fn_cores
            mem += n.fn_mem
        return cores, mem, batch

    def _down(self):
        down = [n for n in self.nodes.values() if n.job is not None and n.job.down]
        return sum(n.total.cores for n in down), sum(n.total.memory_mb for n in down)

    def _advance(self, t):
        t_clip = min(t, self.horizon)
        if t_clip > self._last:
            dt = t_clip - self._last
            cores, mem, batch = self._used()
            dcores, dmem = self._down()
            self.area_cores += cores * dt
            self.area_mem += mem * dt
            self.batch_area += batch * dt
            self.down_area_cores += dcores * dt
            self.down_area_mem += dmem * dt
            self._last = t_clip
        self.now = t

    def _check(self):
        for n in self.nodes.values():
            cores = n.fn_cores + (n.job.cores_per_node if n.job else 0)
            mem = n.fn_mem + (n.job.memory_mb_per_node if n.job else 0)
            if cores > n.total.cores or mem > n.total.memory_mb:
                raise SimulationError(f"node {n.node_id} oversubscribed at t={self.now}")

    # -- batch jobs ------------------------------------------------------------

    def _feasible(self, job: BatchJob) -> bool:
        total = next(iter(self.nodes.values())).total if self.nodes else None
        if total is None or job.nodes > len(self.nodes):
            return False
        if job.node_ids is not None and any(nid not in self.nodes for nid in job.node_ids):
            return False
        return (job.cores_per_node <= total.cores and job.memory_mb_per_node <= total.memory_mb
                and job.gpus_per_node <= total.gpus)

    def _try_start_jobs(self):
        while self.batch_queue:
            job = self.batch_queue[0]
            if job.node_ids is not None:
                chosen = list(job.node_ids)
                if any(self.nodes[nid].job is not None for nid in chosen):
                    return
            else:
                free = [nid for nid in self.order if self.nodes[nid].job is None]
                if len(free) < job.nodes:
                    return
                chosen = free[:job.nodes]
            self.batch_queue.popleft()
            self._start_job(job, chosen)

    def _start_job(self, job: BatchJob, chosen):
        end = self.now + job.duration_s
        for nid in chosen:
            node = self.nodes[nid]
            node.job = job
            if self.rm is not None:
                desc = JobDescriptor(job.job_id, job.signature, job.nodes, job.shared_flag,
                                     job.partition, job.per_node)
                for lease_id in self.rm.attach_job(nid, desc):
                    self._abort_fn(lease_id)
        if not job.down:
            node_cores = self.nodes[chosen[0]].total.cores
            billed = node_cores if self.scenario == "exclusive" else job.cores_per_node
            self.billed_core_s += job.nodes * billed * job.duration_s
            self.job_segments.append((self.now, end, job.cores_per_node * job.nodes,
                                      job.memory_mb_per_node * job.nodes))
        self._push(end, JOB_END, job.job_id, (job, tuple(chosen)))

    def _end_job(self, job: BatchJob, chosen):
        for nid in chosen:
            node = self.nodes[nid]
            if node.job is job:
                node.job = None
                if self.rm is not None:
                    self.rm.attach_job(nid, None)
        self._try_start_jobs()

    # -- functions -------------------------------------------------------------

    def _abort_fn(self, lease_id):
        for fn_id, (lid, nid, cores, mem, start) in list(self.running_fns.items()):
            if lid == lease_id:
                del self.running_fns[fn_id]
                node = self.nodes[nid]
                node.fn_cores -= cores
                node.fn_mem -= mem
                self.fn_segments.append((start, self.now, cores, mem))
                self.aborted += 1
                return

    def _try_place(self, fn: FunctionArrival) -> bool:
        try:
            lease = self.rm.acquire_lease(fn.spec, fn.fn_id)
        except (NoCapacityError, PolicyDeniedError):
            return False
        node = self.nodes[lease.node_id]
        slowdown = 1.0
        if node.job is not None:
            est = self.policy.estimate_slowdown(node.job.signature, fn.sig or fn.spec.signature)
            if est is not None:
                slowdown = est
        req = fn.spec.required
        node.fn_cores += req.cores
        node.fn_mem += req.memory_mb
        self.running_fns[fn.fn_id] = (lease.lease_id, node.node_id, req.cores, req.memory_mb, self.now)
        self._push(self.now + fn.exec_ms * slowdown / 1000.0, FN_END, fn.fn_id, lease.lease_id)
        return True

    def _end_fn(self, fn_id, lease_id):
        entry = self.running_fns.get(fn_id)
        if entry is None or entry[0] != lease_id:
            return  # aborted earlier by a batch job
        del self.running_fns[fn_id]
        _, nid, cores, mem, start = entry
        node = self.nodes[nid]
        node.fn_cores -= cores
        node.fn_mem -= mem
        self.rm.release_lease(lease_id)
        self.fn_segments.append((start, self.now, cores, mem))
        self.completed += 1

    def _drain_fn_queue(self):
        while self.fn_queue:
            fn, expires = self.fn_queue[0]
            if self.now > expires:
                self.fn_queue.popleft()
                self.rejected += 1
                continue
            if not self._try_place(fn):
                return
            self.fn_queue.popleft()

    # -- main loop -------------------------------------------------------------

    def run(self) -> SimMetrics:
        for i, job in enumerate(self.workload.batch_jobs):
            self._push(job.arrival_s, JOB_START, (i, job.job_id), job)
        for i, fn in enumerate(self.workload.function_stream):
            self._push(fn.arrival_s, FN_START, (i, fn.fn_id), fn)
        while self.events:
            t, kind, key, _, payload = heapq.heappop(self.events)
            self._advance(t)
            if kind == JOB_END:
                self._end_job(*payload)
                if self.rm is not None:
                    self._drain_fn_queue()
            elif kind == JOB_START:
                if not self._feasible(payload):
                    self.jobs_rejected += 1
                else:
                    self.batch_queue.append(payload)
                    self._try_start_jobs()
            elif kind == FN_END:
                self._end_fn(key, payload)
                self._drain_fn_queue()
            elif kind == FN_START:
                if self.rm is None:
                    self.rejected += 1
                elif self.fn_queue and self.config.queue_functions:
                    self.fn_queue.append((payload, self.now + self.config.queue_timeout_s))
                elif not self._try_place(payload):
                    if self.config.queue_functions:
                        self.fn_queue.append((payload, self.now + self.config.queue_timeout_s))
                    else:
                        self.rejected += 1
            self._check()
        self.rejected += len(self.fn_queue)
        self.jobs_rejected += len(self.batch_queue)
        self._advance(max(self.now, self.horizon))
        return self._metrics()

    def _cross_check(self):
        def clipped(segments):
            c = m = 0.0
            for start, end, cores, mem in segments:
                dt = max(0.0, min(end, self.horizon) - max(start, 0.0))
                c += cores * dt
                m += mem * dt
            return c, m
        jc, jm = clipped(self.job_segments)
        fc, fm = clipped(self.fn_segments)
        for name, a, b in (("cores", self.area_cores, jc + fc), ("memory", self.area_mem, jm + fm)):
            if not math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-6):
                raise SimulationError(f"{name} accounting mismatch: {a} vs {b}")

    def _metrics(self) -> SimMetrics:
        self._cross_check()
        n = len(self.nodes)
        total = next(iter(self.nodes.values())).total if n else ResourceVector(0, 0, 0)
        cap_cores = n * total.cores * self.horizon - self.down_area_cores
        cap_mem = n * total.memory_mb * self.horizon - self.down_area_mem
        core_util = self.area_cores / cap_cores if cap_cores > 0 else 0.0
        mem_util = self.area_mem / cap_mem if cap_mem > 0 else 0.0
        throughput = self.area_cores / self.batch_area if self.batch_area > 0 else 0.0
        return SimMetrics(
            scenario=self.scenario,
            core_utilization=min(1.0, core_util),
            memory_utilization=min(1.0, mem_util),
            functions_completed=self.completed,
            functions_rejected=self.rejected,
            batch_core_hours_billed=self.billed_core_s / 3600.0,
            node_throughput_relative=throughput,
            functions_aborted=self.aborted,
            jobs_rejected=self.jobs_rejected,
            horizon_s=float(self.horizon),
        )


def run_simulation(workload: Optional[SimWorkload] = None, scenario: str = "colocated",
                   config: Optional[SimConfig] = None, trace: Optional[dict] = None) -> SimMetrics:
    """Replay ``workload`` (and/or a loaded ``trace``) under ``scenario``."""
    workload = workload or SimWorkload()
    config = config or SimConfig()
    node_ids = None
    if trace:
        cluster = workload.cluster or ClusterConfig(nodes=len(trace))
        node_ids = sorted(trace)
        pseudo = trace_to_jobs(trace, cluster, config.trace_jobs_shared)
        horizon = workload.horizon_s
        if horizon is None:
            horizon = max((j.arrival_s + j.duration_s for j in pseudo), default=0.0)
            last = max((s[-1].t_s for s in trace.values() if s), default=0.0)
            from .trace import infer_interval
            horizon = max(horizon, last + (infer_interval(trace) or 120.0))
        workload = SimWorkload(pseudo + list(workload.batch_jobs), list(workload.function_stream),
                               cluster, horizon)
    return _Run(workload, scenario, config, node_ids).run()


# -- idle-node throughput ----------------------------------------------------------

# Relative node throughput measured with n co-located copies of serial NAS
# kernels on a 2x18-core node (n -> throughput relative to a single copy).
NAS_IDLE_NODE_TABLE = {
    "BT.W": {1: 1.0, 2: 1.95, 4: 3.8, 8: 6.9, 12: 9.5, 16: 11.7, 24: 17.37, 32: 23.3},
    "CG.A": {1: 1.0, 2: 1.85, 4: 2.8, 8: 4.8, 12: 5.8, 16: 6.0, 24: 8.5, 32: 11.4},
    "EP.W": {1: 1.0, 2: 2.0, 4: 3.78, 8: 6.8, 12: 10.2, 16: 13.6, 24: 20.4, 32: 27.2},
    "LU.W": {1: 1.0, 2: 1.9, 4: 3.76, 8: 6.7, 12: 9.96, 24: 19.7},
}


def efficiency_curve(table) -> dict:
    """Convert a throughput table {n: T(n)} to an efficiency table {n: T(n)/n}."""
    return {int(n): float(t) / int(n) for n, t in table.items()}


def _interpolate(points: dict, k: int) -> float:
    xs = sorted(points)
    if k <= xs[0]:
        return points[xs[0]]
    if k >= xs[-1]:
        return points[xs[-1]]
    for lo, hi in zip(xs, xs[1:]):
        if lo <= k <= hi:
            w = (k - lo) / (hi - lo)
            return points[lo] + w * (points[hi] - points[lo])
    raise AssertionError("unreachable")


def idle_node_throughput(n_functions: int, per_function_runtime_ms: Optional[float] = None,
                         node_cores: int = 36, efficiency=None) -> float:
    """Node throughput with ``n_functions`` co-runners, relative to one function alone.

    ``efficiency`` is None (perfect scaling), a constant in (0, 1], a
    throughput table ``{n: T(n)}`` or the name of a row of
    NAS_IDLE_NODE_TABLE.  Efficiency is interpolated linearly between table
    points.  Functions beyond ``node_cores`` time-share and add nothing.
    ``per_function_runtime_ms`` does not change the relative figure; it is
    validated so callers can use the same arguments with ``functions_per_second``.
    """
    if n_functions < 1:
        raise ValidationError("n_functions must be at least 1")
    if node_cores < 1:
        raise ValidationError("node_cores must be at least 1")
    if per_function_runtime_ms is not None and per_function_runtime_ms <= 0:
        raise ValidationError("per_function_runtime_ms must be positive")
    k = min(n_functions, node_cores)
    if efficiency is None:
        e = 1.0
    elif isinstance(efficiency, (int, float)):
        if not 0.0 < efficiency <= 1.0:
            raise ValidationError("efficiency must be in (0, 1]")
        e = 1.0 if k == 1 else float(efficiency)
    else:
        table = NAS_IDLE_NODE_TABLE[efficiency] if isinstance(efficiency, str) else efficiency
        e = _interpolate(efficiency_curve(table), k)
    return k * e


def functions_per_second(n_functions: int, per_function_runtime_ms: float, node_cores: int = 36,
                         efficiency=None) -> float:
    rel = idle_node_throughput(n_functions, per_function_runtime_ms, node_cores, efficiency)
    return rel * 1000.0 / per_function_runtime_ms
