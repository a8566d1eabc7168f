"""Node inventory, lease table, placement and per-resource billing.

``ResourceManager`` holds all state behind one lock, so every public
operation is atomic to concurrent callers.  Node draining is the one
operation that waits on the outside world: the node is marked ``draining``
under the lock, the executor is asked to drain with the lock released, and
the node is retired under the lock again.
"""

from __future__ import annotations

import enum
import itertools
import logging
import threading
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .core import (ZERO, FaasError, FunctionKind, FunctionSpec, Lease, LeaseState,
                   ResourceVector, ValidationError, now_ms, rv_fits)
from .policy import ColocationPolicy, JobDescriptor

log = logging.getLogger(__name__)


class DuplicateNodeError(FaasError):
    code = "duplicate-node"


class MalformedDescriptorError(ValidationError):
    code = "malformed-descriptor"


class UnknownNodeError(FaasError):
    code = "unknown-node"


class NodeStateError(FaasError):
    code = "node-state"


class NoCapacityError(FaasError):
    code = "no-capacity"


class PolicyDeniedError(FaasError):
    code = "policy-denied"


class UnknownLeaseError(FaasError):
    code = "unknown-lease"


class DoubleReleaseError(FaasError):
    code = "double-release"


class Sharing(str, enum.Enum):
    OPT_IN = "opt_in"
    EXCLUSIVE = "exclusive"


class NodeState(str, enum.Enum):
    AVAILABLE = "available"
    DRAINING = "draining"
    REMOVED = "removed"


@dataclass
class NodeRecord:
    node_id: str
    total: ResourceVector
    leased: ResourceVector = ZERO
    warm_images: frozenset = frozenset()
    reserved_serving_cores: int = 1
    availability_hint_s: Optional[float] = None
    sharing: Sharing = Sharing.OPT_IN
    state: NodeState = NodeState.AVAILABLE
    endpoint: Optional[str] = None
    job: Optional[JobDescriptor] = None
    registered_at: int = 0

    @property
    def occupied(self) -> ResourceVector:
        """Everything not available to new leases: leases, batch job, serving cores."""
        used = self.leased + ResourceVector(self.reserved_serving_cores, 0, 0)
        if self.job is not None:
            used = used + self.job.resources_per_node
        return used

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "total": self.total.to_dict(),
            "leased": self.leased.to_dict(),
            "warm_images": sorted(self.warm_images),
            "reserved_serving_cores": self.reserved_serving_cores,
            "availability_hint_s": self.availability_hint_s,
            "sharing": self.sharing.value,
            "state": self.state.value,
            "endpoint": self.endpoint,
            "job": self.job.to_dict() if self.job else None,
        }


def parse_node_descriptor(data: dict) -> NodeRecord:
    """Build a NodeRecord from a registration payload (REST or config)."""
    if not isinstance(data, dict):
        raise MalformedDescriptorError("descriptor must be an object")
    try:
        node_id = data["node_id"]
        total = ResourceVector.from_dict(data["total"])
        sharing = Sharing(data.get("sharing", Sharing.OPT_IN.value))
        reserved = int(data.get("reserved_serving_cores", 1))
        hint = data.get("availability_hint_s")
        hint = float(hint) if hint is not None else None
        job = JobDescriptor.from_dict(data["job"]) if data.get("job") else None
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise MalformedDescriptorError(f"malformed node descriptor: {exc}") from None
    if not isinstance(node_id, str) or not node_id:
        raise MalformedDescriptorError("node_id must be a non-empty string")
    return NodeRecord(
        node_id=node_id,
        total=total,
        warm_images=frozenset(data.get("warm_images", ())),
        reserved_serving_cores=reserved,
        availability_hint_s=hint,
        sharing=sharing,
        endpoint=data.get("endpoint"),
        job=job,
    )


@dataclass(frozen=True)
class UsageLedgerEntry:
    lease_id: str
    core_ms: int
    memory_mb_ms: int
    gpu_ms: int

    def to_dict(self) -> dict:
        return {"core_ms": self.core_ms, "memory_mb_ms": self.memory_mb_ms, "gpu_ms": self.gpu_ms}


@dataclass(frozen=True)
class DrainReport:
    aborted: int = 0
    completed: int = 0

    def __add__(self, other):
        return DrainReport(self.aborted + other.aborted, self.completed + other.completed)

    def to_dict(self) -> dict:
        return {"aborted": self.aborted, "completed": self.completed}


def bill(resources: ResourceVector, active_ms: int, lease_id: str = "") -> UsageLedgerEntry:
    """Each dimension is billed on its own: amount times active time."""
    return UsageLedgerEntry(lease_id, resources.cores * active_ms,
                            resources.memory_mb * active_ms, resources.gpus * active_ms)


# Drainer: (node record snapshot, immediate) -> DrainReport.  Called without the lock.
Drainer = Callable[[NodeRecord, bool], DrainReport]
# Revoker: (node record snapshot, lease id); best-effort notification.
Revoker = Callable[[NodeRecord, str], None]


@dataclass
class _LeaseEntry:
    lease: Lease
    last_activity: int


class ResourceManager:
    def __init__(self, policy: Optional[ColocationPolicy] = None,
                 clock: Callable[[], int] = now_ms,
                 idle_lease_timeout_s: float = 300.0,
                 drainer: Optional[Drainer] = None,
                 revoker: Optional[Revoker] = None,
                 journal: Optional[Callable] = None):
        self.policy = policy or ColocationPolicy()
        self.clock = clock
        self.idle_lease_timeout_ms = int(idle_lease_timeout_s * 1000)
        self.drainer = drainer
        self.revoker = revoker
        # Called under the lock with (op, args, result) in commit order.
        self.journal = journal
        self._lock = threading.RLock()
        self._nodes: dict = {}
        self._leases: dict = {}
        self._ids = itertools.count(1)

    def _journal(self, op, args, result):
        if self.journal is not None:
            self.journal(op, args, result)

    # -- nodes ---------------------------------------------------------------

    def register_node(self, descriptor) -> str:
        node = descriptor if isinstance(descriptor, NodeRecord) else parse_node_descriptor(descriptor)
        if node.total.is_zero():
            raise MalformedDescriptorError("node has no resources")
        if node.reserved_serving_cores < 0 or node.reserved_serving_cores > node.total.cores:
            raise MalformedDescriptorError("reserved_serving_cores out of range")
        with self._lock:
            old = self._nodes.get(node.node_id)
            if old is not None and old.state is not NodeState.REMOVED:
                raise DuplicateNodeError(f"node {node.node_id} already registered")
            node = replace(node, leased=ZERO, state=NodeState.AVAILABLE,
                           registered_at=self.clock())
            self._nodes[node.node_id] = node
            self._journal("register", (node.node_id,), node.node_id)
            log.info("registered node %s total=%s", node.node_id, node.total.encode())
            return node.node_id

    def remove_node(self, node_id: str, immediate: bool = False,
                    deadline_s: Optional[float] = None) -> DrainReport:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None or node.state is NodeState.REMOVED:
                raise UnknownNodeError(f"unknown node {node_id}")
            if node.state is not NodeState.AVAILABLE:
                raise NodeStateError(f"node {node_id} is already {node.state.value}")
            node.state = NodeState.DRAINING
            now = self.clock()
            for entry in self._leases.values():
                lease = entry.lease
                if lease.node_id == node_id and lease.state is LeaseState.ACTIVE:
                    lease.transition(LeaseState.DRAINING, now)
            snapshot = replace(node)

        report = DrainReport()
        if self.drainer is not None and snapshot.endpoint:
            try:
                report = self._drain(snapshot, immediate, deadline_s)
            except Exception:
                log.exception("drain of node %s failed; retiring it anyway", node_id)

        with self._lock:
            now = self.clock()
            for entry in self._leases.values():
                lease = entry.lease
                if lease.node_id == node_id and lease.state is not LeaseState.TERMINATED:
                    lease.transition(LeaseState.TERMINATED, now)
            node.leased = ZERO
            node.state = NodeState.REMOVED
            self._journal("remove", (node_id, immediate), report)
        return report

    def _drain(self, node: NodeRecord, immediate: bool, deadline_s: Optional[float]) -> DrainReport:
        if immediate or deadline_s is None:
            return self.drainer(node, immediate)
        # Graceful with an escalation deadline.
        result = {}
        worker = threading.Thread(target=lambda: result.update(r=self.drainer(node, False)),
                                  daemon=True)
        worker.start()
        worker.join(deadline_s)
        if worker.is_alive():
            log.warning("node %s missed drain deadline, escalating", node.node_id)
            self.drainer(node, True)
            worker.join()
        return result.get("r", DrainReport())

    def list_nodes(self) -> list:
        with self._lock:
            return [replace(n) for n in self._nodes.values() if n.state is not NodeState.REMOVED]

    def get_node(self, node_id: str) -> NodeRecord:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None or node.state is NodeState.REMOVED:
                raise UnknownNodeError(f"unknown node {node_id}")
            return replace(node)

    def set_warm_images(self, node_id: str, images) -> None:
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None or node.state is NodeState.REMOVED:
                raise UnknownNodeError(f"unknown node {node_id}")
            node.warm_images = frozenset(images)

    def attach_job(self, node_id: str, job: Optional[JobDescriptor]) -> list:
        """Place (or clear, with None) the batch job occupying a node.

        Leases that no longer fit beside the job, or any lease at all when the
        job did not opt in to sharing, are terminated.  Returns their ids.
        """
        with self._lock:
            node = self._nodes.get(node_id)
            if node is None or node.state is NodeState.REMOVED:
                raise UnknownNodeError(f"unknown node {node_id}")
            node.job = job
            evicted = []
            if job is not None:
                shared = job.shared_flag or job.partition == self.policy.config.shared_partition
                now = self.clock()
                # Newest leases go first: they have done the least work.
                for entry in reversed(list(self._leases.values())):
                    lease = entry.lease
                    if lease.node_id != node_id or lease.state is LeaseState.TERMINATED:
                        continue
                    if shared and rv_fits(node.total, node.occupied):
                        break
                    lease.transition(LeaseState.TERMINATED, now)
                    node.leased = node.leased - lease.resources
                    evicted.append(lease.lease_id)
            self._journal("attach_job", (node_id, job), evicted)
            return evicted

    # -- leases --------------------------------------------------------------

    def _preference_key(self, node: NodeRecord, spec: FunctionSpec, now: int):
        warm = spec.image_ref in node.warm_images
        hint = node.availability_hint_s
        if hint is None:
            remaining = 0.0
        else:
            remaining = max(0.0, hint - (now - node.registered_at) / 1000.0)
        return (not warm, -remaining, node.node_id)

    def _place(self, spec: FunctionSpec, func_samples=None):
        """Pick a node for ``spec``; returns (node, None) or (None, error)."""
        now = self.clock()
        candidates = [n for n in self._nodes.values()
                      if n.state is NodeState.AVAILABLE and n.sharing is Sharing.OPT_IN]
        candidates.sort(key=lambda n: self._preference_key(n, spec, now))
        denial = None
        for node in candidates:
            if not rv_fits(node.total, node.occupied):
                continue
            if not rv_fits(node.total - node.occupied, spec.required):
                continue
            verdict = self.policy.decide_colocation(node.total, node.leased, node.job,
                                                    spec, func_samples)
            if verdict.allowed:
                return node, None
            if verdict.reason != "no-capacity" and denial is None:
                denial = verdict.reason
        if denial is not None:
            return None, PolicyDeniedError(denial)
        return None, NoCapacityError("no eligible node")

    def acquire_lease(self, spec: FunctionSpec, client_id: str = "", func_samples=None) -> Lease:
        if not isinstance(spec, FunctionSpec):
            raise ValidationError("expected a FunctionSpec")
        with self._lock:
            node, error = self._place(spec, func_samples)
            if error is not None:
                self._journal("acquire", (spec, client_id), error)
                raise error
            now = self.clock()
            lease = Lease(
                lease_id=f"lease-{next(self._ids)}",
                node_id=node.node_id,
                function_id=spec.function_id,
                resources=spec.required,
                client_id=client_id,
                endpoint=node.endpoint or f"sim://{node.node_id}",
                created_at=now,
                spec=spec,
            )
            lease.transition(LeaseState.ACTIVE, now)
            node.leased = node.leased + spec.required
            self._leases[lease.lease_id] = _LeaseEntry(lease, now)
            self._journal("acquire", (spec, client_id), lease.snapshot())
            return lease.snapshot()

    def release_lease(self, lease_id: str) -> UsageLedgerEntry:
        with self._lock:
            entry = self._leases.get(lease_id)
            if entry is None:
                raise UnknownLeaseError(f"unknown lease {lease_id}")
            lease = entry.lease
            if lease.state is LeaseState.TERMINATED:
                raise DoubleReleaseError(f"lease {lease_id} already terminated")
            now = self.clock()
            lease.transition(LeaseState.TERMINATED, now)
            node = self._nodes.get(lease.node_id)
            if node is not None and node.state is not NodeState.REMOVED:
                node.leased = node.leased - lease.resources
            usage = self._usage(lease)
            self._journal("release", (lease_id,), usage)
            snapshot = replace(node) if node is not None else None
        if self.revoker is not None and snapshot is not None and snapshot.endpoint:
            try:
                self.revoker(snapshot, lease_id)
            except Exception:
                log.warning("could not notify %s about released lease %s", lease.node_id, lease_id)
        return usage

    def _usage(self, lease: Lease) -> UsageLedgerEntry:
        end = lease.terminated_at if lease.terminated_at is not None else self.clock()
        start = lease.activated_at if lease.activated_at is not None else end
        active = max(0, end - start)
        return bill(lease.resources, active, lease.lease_id)

    def usage(self, lease_id: str) -> UsageLedgerEntry:
        with self._lock:
            entry = self._leases.get(lease_id)
            if entry is None:
                raise UnknownLeaseError(f"unknown lease {lease_id}")
            return self._usage(entry.lease)

    def lookup_lease(self, lease_id: str) -> Lease:
        """Lease snapshot for executors binding a connection; counts as activity."""
        with self._lock:
            entry = self._leases.get(lease_id)
            if entry is None:
                raise UnknownLeaseError(f"unknown lease {lease_id}")
            entry.last_activity = self.clock()
            return entry.lease.snapshot()

    def touch_lease(self, lease_id: str) -> None:
        with self._lock:
            entry = self._leases.get(lease_id)
            if entry is None:
                raise UnknownLeaseError(f"unknown lease {lease_id}")
            entry.last_activity = self.clock()

    def reap_idle_leases(self) -> list:
        """Release leases with no activity for longer than the idle timeout."""
        with self._lock:
            now = self.clock()
            stale = [lid for lid, e in self._leases.items()
                     if e.lease.state in (LeaseState.ACTIVE, LeaseState.DRAINING)
                     and now - e.last_activity > self.idle_lease_timeout_ms]
        released = []
        for lease_id in stale:
            try:
                self.release_lease(lease_id)
                released.append(lease_id)
            except (DoubleReleaseError, UnknownLeaseError):
                pass
        return released

    def leases(self) -> list:
        with self._lock:
            return [e.lease.snapshot() for e in self._leases.values()]


def memory_service_spec(function_id: str, memory_mb: int, max_duration_ms: int = 3_600_000) -> FunctionSpec:
    """Spec for a memory-service lease: one core to serve, plus the block."""
    return FunctionSpec(function_id, "builtin/memsvc", ResourceVector(1, memory_mb, 0),
                        max_duration_ms, FunctionKind.MEMORY_SERVICE)
