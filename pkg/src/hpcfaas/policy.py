"""Co-location admission for functions next to batch jobs.

A verdict is reached through fixed gates: the job must have opted in to
sharing, must not be a hero job, and must leave room for the function.
Past that, recorded co-location history decides; only when no history
exists for the (job, function) pair are counter-based stress vectors
compared.
"""

from __future__ import annotations

import json
import math
import os
import statistics
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import (FunctionSpec, ResourceVector, ValidationError, WorkloadSignature,
                   rv_fits)


class EmptySampleError(ValidationError):
    code = "empty-sample"


@dataclass(frozen=True)
class CounterSample:
    flops_rate: float
    mem_access_rate: float
    net_bytes_rate: float
    sampled_at: int = 0

    def __post_init__(self):
        for name in ("flops_rate", "mem_access_rate", "net_bytes_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"{name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"flops_rate": self.flops_rate, "mem_access_rate": self.mem_access_rate,
                "net_bytes_rate": self.net_bytes_rate, "sampled_at": self.sampled_at}

    @classmethod
    def from_dict(cls, d: dict) -> CounterSample:
        return cls(float(d["flops_rate"]), float(d["mem_access_rate"]),
                   float(d["net_bytes_rate"]), int(d.get("sampled_at", 0)))


@dataclass(frozen=True)
class StressVector:
    cpu: float
    memory: float
    network: float

    def __post_init__(self):
        for name in ("cpu", "memory", "network"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"stress {name} outside [0, 1]")

    def as_tuple(self):
        return (self.cpu, self.memory, self.network)


@dataclass(frozen=True)
class ColocationRecord:
    batch_sig: WorkloadSignature
    func_sig: WorkloadSignature
    exclusive_runtime_ms: float
    colocated_runtime_ms: float
    samples: tuple = ()

    def __post_init__(self):
        if not (self.exclusive_runtime_ms > 0 and self.colocated_runtime_ms > 0):
            raise ValidationError("runtimes must be positive")
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def slowdown(self) -> float:
        return self.colocated_runtime_ms / self.exclusive_runtime_ms

    def to_dict(self) -> dict:
        return {
            "batch_sig": self.batch_sig.to_dict(),
            "func_sig": self.func_sig.to_dict(),
            "exclusive_runtime_ms": self.exclusive_runtime_ms,
            "colocated_runtime_ms": self.colocated_runtime_ms,
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ColocationRecord:
        return cls(
            WorkloadSignature.from_dict(d["batch_sig"]),
            WorkloadSignature.from_dict(d["func_sig"]),
            d["exclusive_runtime_ms"],
            d["colocated_runtime_ms"],
            tuple(CounterSample.from_dict(s) for s in d.get("samples", ())),
        )


@dataclass(frozen=True)
class JobDescriptor:
    job_id: str
    sig: WorkloadSignature
    nodes_allocated: int
    shared_flag: bool = False
    partition: str = ""
    resources_per_node: ResourceVector = ResourceVector()
    samples: tuple = ()

    def __post_init__(self):
        if self.nodes_allocated < 1:
            raise ValidationError("nodes_allocated must be >= 1")
        object.__setattr__(self, "samples", tuple(self.samples))

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "sig": self.sig.to_dict(),
            "nodes_allocated": self.nodes_allocated,
            "shared_flag": self.shared_flag,
            "partition": self.partition,
            "resources_per_node": self.resources_per_node.to_dict(),
            "samples": [s.to_dict() for s in self.samples],
        }

    @classmethod
    def from_dict(cls, d: dict) -> JobDescriptor:
        try:
            return cls(
                job_id=str(d["job_id"]),
                sig=WorkloadSignature.from_dict(d["sig"]),
                nodes_allocated=int(d["nodes_allocated"]),
                shared_flag=bool(d.get("shared_flag", False)),
                partition=str(d.get("partition", "")),
                resources_per_node=ResourceVector.from_dict(d.get("resources_per_node", {})),
                samples=tuple(CounterSample.from_dict(s) for s in d.get("samples", ())),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed job descriptor: {exc}") from None


@dataclass(frozen=True)
class Verdict:
    allowed: bool
    reason: str = ""
    used_history: bool = False

    def __bool__(self):
        return self.allowed


ALLOW = Verdict(True)


def percentile_nearest_rank(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the smallest value with at least q% at or below it."""
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[rank - 1]


def model_stress(samples: Iterable[CounterSample]) -> StressVector:
    samples = list(samples)
    if not samples:
        raise EmptySampleError("no counter samples")
    return StressVector(
        cpu=percentile_nearest_rank([s.flops_rate for s in samples], 90),
        memory=percentile_nearest_rank([s.mem_access_rate for s in samples], 90),
        network=percentile_nearest_rank([s.net_bytes_rate for s in samples], 90),
    )


def stress_conflict(a: StressVector, b: StressVector) -> bool:
    return any(x + y > 1.0 for x, y in zip(a.as_tuple(), b.as_tuple()))


class HistoryStore:
    """Co-location history keyed by (batch signature, function signature).

    With a ``path`` every record is appended to a JSON-lines file and the
    file is replayed on construction.
    """

    def __init__(self, path: Optional[os.PathLike] = None):
        self._lock = threading.Lock()
        self._records: dict = {}
        self._count = 0
        self._path = Path(path) if path else None
        if self._path and self._path.exists():
            with open(self._path) as fh:
                for line in fh:
                    if line.strip():
                        self._add(ColocationRecord.from_dict(json.loads(line)))

    def _add(self, rec: ColocationRecord) -> int:
        self._records.setdefault((rec.batch_sig, rec.func_sig), []).append(rec)
        self._count += 1
        return self._count

    def record_run(self, rec: ColocationRecord) -> int:
        if not isinstance(rec, ColocationRecord):
            raise ValidationError("expected a ColocationRecord")
        with self._lock:
            if self._path:
                with open(self._path, "a") as fh:
                    fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
            return self._add(rec)

    def records(self, batch_sig, func_sig) -> list:
        with self._lock:
            return list(self._records.get((batch_sig, func_sig), ()))

    def estimate_slowdown(self, batch_sig, func_sig) -> Optional[float]:
        """Median slowdown over matching records, or None without history."""
        recs = self.records(batch_sig, func_sig)
        if not recs:
            return None
        return statistics.median(r.slowdown for r in recs)

    def __len__(self):
        with self._lock:
            return self._count


@dataclass
class PolicyConfig:
    slowdown_threshold: float = 1.10
    hero_nodes: int = 256
    shared_partition: str = "shared"

    @classmethod
    def from_env(cls, env=None) -> PolicyConfig:
        env = os.environ if env is None else env
        cfg = cls()
        if "POLICY_SLOWDOWN_THRESHOLD" in env:
            cfg.slowdown_threshold = float(env["POLICY_SLOWDOWN_THRESHOLD"])
        if "POLICY_HERO_NODES" in env:
            cfg.hero_nodes = int(env["POLICY_HERO_NODES"])
        if "POLICY_SHARED_PARTITION" in env:
            cfg.shared_partition = env["POLICY_SHARED_PARTITION"]
        return cfg


@dataclass
class ColocationPolicy:
    config: PolicyConfig = field(default_factory=PolicyConfig)
    history: HistoryStore = field(default_factory=HistoryStore)
    # Counter profiles gathered when a function image is registered.
    profiles: dict = field(default_factory=dict)

    def record_run(self, rec: ColocationRecord) -> int:
        return self.history.record_run(rec)

    def estimate_slowdown(self, batch_sig, func_sig) -> Optional[float]:
        return self.history.estimate_slowdown(batch_sig, func_sig)

    def record_profile(self, sig: WorkloadSignature, samples) -> None:
        self.profiles[sig] = tuple(samples)

    def decide_colocation(self, node_total: ResourceVector, node_leased: ResourceVector,
                          job: Optional[JobDescriptor], func: FunctionSpec,
                          func_samples=None) -> Verdict:
        cfg = self.config
        occupied = node_leased
        if job is not None:
            if not (job.shared_flag or job.partition == cfg.shared_partition):
                return Verdict(False, "not-opted-in")
            if job.nodes_allocated > cfg.hero_nodes:
                return Verdict(False, "hero-job-exempt")
            occupied = occupied + job.resources_per_node
        if not rv_fits(node_total, occupied) or not rv_fits(node_total - occupied, func.required):
            return Verdict(False, "no-capacity")
        if job is None:
            # Idle node: nobody to interfere with.
            return ALLOW

        slowdown = self.estimate_slowdown(job.sig, func.signature)
        if slowdown is not None:
            if slowdown > cfg.slowdown_threshold:
                return Verdict(False, "interference", used_history=True)
            return Verdict(True, used_history=True)

        if func_samples is None:
            func_samples = self.profiles.get(func.signature)
        job_samples = job.samples or self.profiles.get(job.sig)
        if not func_samples or not job_samples:
            # Unprofiled pair: admit, the run itself produces the first record.
            return ALLOW
        if stress_conflict(model_stress(job_samples), model_stress(func_samples)):
            return Verdict(False, "stress-conflict")
        return ALLOW


def decide_colocation(node, job, func, func_samples=None, policy: Optional[ColocationPolicy] = None):
    """Functional entry point taking a node record with ``total``/``leased``."""
    policy = policy or ColocationPolicy()
    return policy.decide_colocation(node.total, node.leased, job, func, func_samples)
