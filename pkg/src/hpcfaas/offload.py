"""Offload admission: when is it worth sending tasks to remote functions.

A remote invocation pays its round trip ``t_inv_ms + l_ms`` plus the time
to push its input over the link.  Offloading only makes sense while enough
local work remains to hide that cost, so the planner balances

    n_local * t_local_ms >= t_inv_ms + l_ms

against the number of transfers the link can carry.  All times are
milliseconds, sizes MB (10**6 bytes) and bandwidth MB/s.
"""

from __future__ import annotations

import heapq
import math
import statistics
from dataclasses import dataclass

from .core import ValidationError


class EmptySampleError(ValidationError):
    code = "empty-sample"


class ZeroPayloadError(ValidationError):
    code = "zero-payload"


@dataclass(frozen=True)
class OffloadParams:
    t_local_ms: float
    t_inv_ms: float
    l_ms: float
    b_mb_s: float
    data_inv_mb: float

    def __post_init__(self):
        if not self.t_local_ms > 0:
            raise ValidationError("t_local_ms must be positive")
        if not self.b_mb_s > 0:
            raise ValidationError("b_mb_s must be positive")
        if not self.data_inv_mb >= 0:
            raise ValidationError("data_inv_mb must be non-negative")
        if not (self.t_inv_ms >= 0 and self.l_ms >= 0):
            raise ValidationError("t_inv_ms and l_ms must be non-negative")

    @property
    def transfer_ms(self) -> float:
        """Time one invocation payload occupies the link."""
        return self.data_inv_mb / self.b_mb_s * 1000.0

    @property
    def round_trip_ms(self) -> float:
        return self.t_inv_ms + self.l_ms


@dataclass(frozen=True)
class NetworkEstimate:
    """Measured half of the parameters; the caller adds the task profile."""

    l_ms: float
    b_mb_s: float
    t_inv_ms: float

    def complete(self, t_local_ms: float, data_inv_mb: float) -> OffloadParams:
        return OffloadParams(t_local_ms, self.t_inv_ms, self.l_ms, self.b_mb_s, data_inv_mb)


@dataclass(frozen=True)
class PartitionPlan:
    local_tasks: int
    remote_tasks: int
    expected_makespan_ms: float

    def to_dict(self) -> dict:
        return {"local": self.local_tasks, "remote": self.remote_tasks,
                "expected_makespan_ms": self.expected_makespan_ms}


@dataclass(frozen=True)
class SimulatedPlan:
    makespan_ms: float
    local_finish_ms: float
    remote_finish_ms: float
    remote_last_sent_ms: float

    @property
    def wait_ms(self) -> float:
        """Time the application sits idle after its local work is done."""
        return max(0.0, self.remote_finish_ms - self.local_finish_ms)


def estimate_params(latency_samples, bandwidth_samples, exec_samples) -> NetworkEstimate:
    for name, samples in (("latency", latency_samples), ("bandwidth", bandwidth_samples),
                          ("exec", exec_samples)):
        if not samples:
            raise EmptySampleError(f"no {name} samples")
    return NetworkEstimate(
        l_ms=statistics.median(latency_samples),
        b_mb_s=statistics.median(bandwidth_samples),
        t_inv_ms=statistics.median(exec_samples),
    )


def min_local_batch(p: OffloadParams) -> int:
    need = p.t_inv_ms + p.l_ms
    n = max(0, math.ceil(need / p.t_local_ms))
    # ceil() of a float quotient can be one off; settle on the inequality itself.
    while n > 0 and (n - 1) * p.t_local_ms >= need:
        n -= 1
    while n * p.t_local_ms < need:
        n += 1
    return n


def max_remote_inflight(p: OffloadParams) -> int:
    if p.data_inv_mb <= 0:
        raise ZeroPayloadError("data_inv_mb must be positive")
    n = max(0, math.floor(p.b_mb_s / p.data_inv_mb))
    while n > 0 and n * p.data_inv_mb > p.b_mb_s:
        n -= 1
    while (n + 1) * p.data_inv_mb <= p.b_mb_s:
        n += 1
    return n


def _hidden_by_local(total: int, remote: int, p: OffloadParams) -> bool:
    return (total - remote) * p.t_local_ms >= remote * p.transfer_ms + p.round_trip_ms


def _max_hidden_remote(total: int, p: OffloadParams, upper: int) -> int:
    """Largest remote count <= upper whose pipeline finishes under local work."""
    approx = (total * p.t_local_ms - p.round_trip_ms) / (p.t_local_ms + p.transfer_ms)
    r = min(upper, max(0, math.floor(approx)))
    while r > 0 and not _hidden_by_local(total, r, p):
        r -= 1
    while r < upper and _hidden_by_local(total, r + 1, p):
        r += 1
    return r


def expected_makespan(local: int, remote: int, p: OffloadParams) -> float:
    local_ms = local * p.t_local_ms
    if remote == 0:
        return local_ms
    return max(local_ms, p.round_trip_ms + remote * p.transfer_ms)


def partition_work(total_tasks: int, p: OffloadParams) -> PartitionPlan:
    """Split ``total_tasks`` independent tasks between local and remote.

    Remote count is bounded by the tasks left after the first ``n_local``,
    by the link capacity, and by what the remaining local tasks can hide:
    every remote result is back before the local stream runs dry.
    """
    if total_tasks < 0:
        raise ValidationError("total_tasks must be non-negative")
    n_local = min_local_batch(p)
    if total_tasks <= n_local:
        return PartitionPlan(total_tasks, 0, expected_makespan(total_tasks, 0, p))
    upper = min(total_tasks - n_local, max_remote_inflight(p))
    remote = _max_hidden_remote(total_tasks, p, upper)
    local = total_tasks - remote
    return PartitionPlan(local, remote, expected_makespan(local, remote, p))


def simulate_plan(plan: PartitionPlan, p: OffloadParams) -> SimulatedPlan:
    """Event-driven replay of a plan.

    One local worker runs its tasks back to back.  Remote inputs leave over
    a single link one after another; each invocation then takes ``t_inv_ms``
    on its own executor and the round-trip latency ``l_ms`` before the
    result is back.
    """
    events = []  # (time, seq, kind, task)
    seq = 0

    def push(t, kind, task):
        nonlocal seq
        heapq.heappush(events, (t, seq, kind, task))
        seq += 1

    if plan.local_tasks:
        push(p.t_local_ms, "local_done", 0)
    if plan.remote_tasks:
        push(p.transfer_ms, "sent", 0)

    local_finish = 0.0
    remote_finish = 0.0
    last_sent = 0.0
    while events:
        t, _, kind, task = heapq.heappop(events)
        if kind == "local_done":
            local_finish = t
            if task + 1 < plan.local_tasks:
                push((task + 2) * p.t_local_ms, "local_done", task + 1)
        elif kind == "sent":
            last_sent = t
            push(t + p.round_trip_ms, "result", task)
            if task + 1 < plan.remote_tasks:
                push((task + 2) * p.transfer_ms, "sent", task + 1)
        elif kind == "result":
            remote_finish = t
    return SimulatedPlan(max(local_finish, remote_finish), local_finish, remote_finish, last_sent)
