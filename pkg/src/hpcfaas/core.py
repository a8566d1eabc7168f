"""Shared domain types and resource arithmetic."""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Optional


class FaasError(Exception):
    """Base class for every error raised by this package."""

    code = "error"

    def __init__(self, reason: str = ""):
        super().__init__(reason or self.code)
        self.reason = reason or self.code


class UnderflowError(FaasError):
    code = "underflow"


class ValidationError(FaasError):
    code = "invalid"


def now_ms() -> int:
    return time.monotonic_ns() // 1_000_000


@dataclass(frozen=True, order=True)
class ResourceVector:
    cores: int = 0
    memory_mb: int = 0
    gpus: int = 0

    def __post_init__(self):
        for name in ("cores", "memory_mb", "gpus"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                raise ValidationError(f"{name} must be an integer, got {value!r}")
            if value < 0:
                raise ValidationError(f"{name} must be non-negative, got {value}")

    def __add__(self, other: ResourceVector) -> ResourceVector:
        return ResourceVector(self.cores + other.cores,
                              self.memory_mb + other.memory_mb,
                              self.gpus + other.gpus)

    def __sub__(self, other: ResourceVector) -> ResourceVector:
        return rv_sub(self, other)

    def is_zero(self) -> bool:
        return self.cores == 0 and self.memory_mb == 0 and self.gpus == 0

    def encode(self) -> str:
        return f"cores={self.cores},memory_mb={self.memory_mb},gpus={self.gpus}"

    @classmethod
    def parse(cls, text: str) -> ResourceVector:
        """Parse the ``cores=<n>,memory_mb=<n>,gpus=<n>`` encoding.

        Missing keys default to zero; unknown keys are rejected.
        """
        values = {}
        for part in text.split(","):
            part = part.strip()
            if not part:
                continue
            key, sep, raw = part.partition("=")
            key = key.strip()
            if not sep or key not in ("cores", "memory_mb", "gpus"):
                raise ValidationError(f"bad resource vector component {part!r}")
            try:
                values[key] = int(raw)
            except ValueError:
                raise ValidationError(f"bad integer in {part!r}") from None
        return cls(**values)

    def to_dict(self) -> dict:
        return {"cores": self.cores, "memory_mb": self.memory_mb, "gpus": self.gpus}

    @classmethod
    def from_dict(cls, data: dict) -> ResourceVector:
        if not isinstance(data, dict):
            raise ValidationError("resource vector must be an object")
        unknown = set(data) - {"cores", "memory_mb", "gpus"}
        if unknown:
            raise ValidationError(f"unknown resource fields {sorted(unknown)}")
        return cls(data.get("cores", 0), data.get("memory_mb", 0), data.get("gpus", 0))


ZERO = ResourceVector(0, 0, 0)


def rv_fits(avail: ResourceVector, req: ResourceVector) -> bool:
    return (req.cores <= avail.cores
            and req.memory_mb <= avail.memory_mb
            and req.gpus <= avail.gpus)


def rv_sub(a: ResourceVector, b: ResourceVector) -> ResourceVector:
    if not rv_fits(a, b):
        raise UnderflowError(f"cannot subtract {b.encode()} from {a.encode()}")
    return ResourceVector(a.cores - b.cores, a.memory_mb - b.memory_mb, a.gpus - b.gpus)


@dataclass(frozen=True)
class WorkloadSignature:
    """Identifies an application run class for co-location history."""

    app_id: str
    scale_class: int = 1
    input_class: str = ""

    def __post_init__(self):
        if not self.app_id:
            raise ValidationError("app_id must be non-empty")

    @staticmethod
    def bucket(ranks: int) -> int:
        """Round a rank count up to the next power of two."""
        if ranks <= 1:
            return 1
        return 1 << (ranks - 1).bit_length()

    def to_dict(self) -> dict:
        return {"app_id": self.app_id, "scale_class": self.scale_class,
                "input_class": self.input_class}

    @classmethod
    def from_dict(cls, data: dict) -> WorkloadSignature:
        return cls(str(data["app_id"]), int(data.get("scale_class", 1)),
                   str(data.get("input_class", "")))


class FunctionKind(str, enum.Enum):
    COMPUTE = "compute"
    MEMORY_SERVICE = "memory_service"


@dataclass(frozen=True)
class FunctionSpec:
    function_id: str
    image_ref: str
    required: ResourceVector
    max_duration_ms: int
    kind: FunctionKind = FunctionKind.COMPUTE
    # None means "derive from image_ref" (see ``signature``).
    sig: Optional[WorkloadSignature] = None

    def __post_init__(self):
        if not self.function_id or not self.image_ref:
            raise ValidationError("function_id and image_ref must be non-empty")
        if not isinstance(self.max_duration_ms, int) or self.max_duration_ms <= 0:
            raise ValidationError("max_duration_ms must be a positive integer")
        if self.required.cores < 1:
            raise ValidationError("functions require at least one core")
        object.__setattr__(self, "kind", FunctionKind(self.kind))

    @property
    def signature(self) -> WorkloadSignature:
        return self.sig or WorkloadSignature(self.image_ref)

    def to_dict(self) -> dict:
        out = {
            "function_id": self.function_id,
            "image_ref": self.image_ref,
            "required": self.required.to_dict(),
            "max_duration_ms": self.max_duration_ms,
            "kind": self.kind.value,
        }
        if self.sig is not None:
            out["sig"] = self.sig.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> FunctionSpec:
        try:
            sig = data.get("sig")
            return cls(
                function_id=data["function_id"],
                image_ref=data["image_ref"],
                required=ResourceVector.from_dict(data["required"]),
                max_duration_ms=data["max_duration_ms"],
                kind=FunctionKind(data.get("kind", "compute")),
                sig=WorkloadSignature.from_dict(sig) if sig else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed function spec: {exc}") from None


class LeaseState(str, enum.Enum):
    PENDING = "pending"
    ACTIVE = "active"
    DRAINING = "draining"
    TERMINATED = "terminated"


_LEASE_TRANSITIONS = {
    LeaseState.PENDING: {LeaseState.ACTIVE, LeaseState.TERMINATED},
    LeaseState.ACTIVE: {LeaseState.DRAINING, LeaseState.TERMINATED},
    LeaseState.DRAINING: {LeaseState.TERMINATED},
    LeaseState.TERMINATED: set(),
}


class IllegalTransition(FaasError):
    code = "illegal-transition"


@dataclass
class Lease:
    lease_id: str
    node_id: str
    function_id: str
    resources: ResourceVector
    client_id: str = ""
    state: LeaseState = LeaseState.PENDING
    endpoint: Optional[str] = None
    created_at: int = 0
    activated_at: Optional[int] = None
    terminated_at: Optional[int] = None
    spec: Optional[FunctionSpec] = None

    def transition(self, new_state: LeaseState, at: int) -> None:
        if new_state not in _LEASE_TRANSITIONS[self.state]:
            raise IllegalTransition(f"lease {self.lease_id}: {self.state.value} -> {new_state.value}")
        if new_state is LeaseState.ACTIVE:
            if self.endpoint is None:
                raise IllegalTransition(f"lease {self.lease_id} has no endpoint")
            self.activated_at = at
        if new_state is LeaseState.TERMINATED:
            self.terminated_at = at
        self.state = new_state

    def snapshot(self) -> Lease:
        return replace(self)

    def to_dict(self) -> dict:
        return {
            "lease_id": self.lease_id,
            "node_id": self.node_id,
            "function_id": self.function_id,
            "client_id": self.client_id,
            "resources": self.resources.to_dict(),
            "state": self.state.value,
            "endpoint": self.endpoint,
            "created_at": self.created_at,
            "terminated_at": self.terminated_at,
            "function": self.spec.to_dict() if self.spec else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Lease:
        fn = data.get("function")
        return cls(
            lease_id=data["lease_id"],
            node_id=data["node_id"],
            function_id=data["function_id"],
            resources=ResourceVector.from_dict(data["resources"]),
            client_id=data.get("client_id", ""),
            state=LeaseState(data["state"]),
            endpoint=data.get("endpoint"),
            created_at=data.get("created_at", 0),
            terminated_at=data.get("terminated_at"),
            spec=FunctionSpec.from_dict(fn) if fn else None,
        )


@dataclass(frozen=True)
class Invocation:
    invocation_id: int
    lease_id: str
    payload: bytes
    submitted_at: int = 0


class InvocationStatus(enum.IntEnum):
    OK = 0
    ERROR = 1
    TERMINATED = 2


@dataclass(frozen=True)
class Timings:
    queue_ms: int = 0
    sandbox_ms: int = 0
    exec_ms: int = 0

    @property
    def cold_start(self) -> bool:
        return self.sandbox_ms > 0


@dataclass(frozen=True)
class InvocationResult:
    invocation_id: int
    status: InvocationStatus
    payload: bytes = b""
    timings: Timings = field(default_factory=Timings)

    def __post_init__(self):
        object.__setattr__(self, "status", InvocationStatus(self.status))
        if self.status is InvocationStatus.TERMINATED and self.payload:
            raise ValidationError("terminated results carry no payload")

    @property
    def ok(self) -> bool:
        return self.status is InvocationStatus.OK
