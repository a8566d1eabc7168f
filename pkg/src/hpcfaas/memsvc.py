"""Memory-service functions: leased blocks of node memory with put/get access.

Operations are served directly by the executor and never enter user code.
A block can be reclaimed (written to a swap file, memory released) when
the batch system wants its memory back; the next access restores it.
"""

from __future__ import annotations

import enum
import itertools
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .core import FaasError, FunctionKind, Lease, LeaseState

MIB = 1 << 20


class MemoryServiceError(FaasError):
    code = "memsvc"


class OverLeaseError(MemoryServiceError):
    code = "over-lease"


class InvalidLeaseError(MemoryServiceError):
    code = "invalid-lease"


class InvalidSizeError(MemoryServiceError):
    code = "invalid-size"


class OutOfBoundsError(MemoryServiceError):
    code = "out-of-bounds"


class TerminatedLeaseError(MemoryServiceError):
    code = "terminated-lease"


class AlreadySwappedError(MemoryServiceError):
    code = "already-swapped"


class UnknownBlockError(MemoryServiceError):
    code = "unknown-block"


class SwapIOError(MemoryServiceError):
    code = "io-error"


ERRORS = {cls.code: cls for cls in (OverLeaseError, InvalidLeaseError, InvalidSizeError,
                                     OutOfBoundsError, TerminatedLeaseError, AlreadySwappedError,
                                     UnknownBlockError, SwapIOError, MemoryServiceError)}


class BlockState(str, enum.Enum):
    RESIDENT = "resident"
    SWAPPED = "swapped"


@dataclass
class MemoryBlock:
    block_id: int
    size_bytes: int
    owner_lease_id: str
    state: BlockState = BlockState.RESIDENT
    swap_path: Optional[Path] = None
    data: Optional[bytearray] = None
    lock: threading.Lock = None
    terminated: bool = False


@dataclass(frozen=True)
class SwapReceipt:
    block_id: int
    swap_path: Path
    size_bytes: int


def default_swap_dir() -> Path:
    return Path(os.environ.get("MEMSVC_SWAP_DIR") or Path(tempfile.gettempdir()) / "hpcfaas-swap")


class MemoryService:
    def __init__(self, swap_dir: Optional[os.PathLike] = None):
        self.swap_dir = Path(swap_dir) if swap_dir else default_swap_dir()
        self._lock = threading.Lock()
        self._blocks: dict = {}
        self._by_lease: dict = {}
        self._terminated_leases: set = set()
        self._ids = itertools.count(1)

    def allocate_block(self, lease: Lease, size_bytes: int) -> MemoryBlock:
        if lease.state is not LeaseState.ACTIVE or lease.lease_id in self._terminated_leases:
            raise InvalidLeaseError(f"lease {lease.lease_id} is not active")
        if lease.spec is not None and lease.spec.kind is not FunctionKind.MEMORY_SERVICE:
            raise InvalidLeaseError(f"lease {lease.lease_id} is not a memory-service lease")
        if size_bytes <= 0:
            raise InvalidSizeError("block size must be positive")
        with self._lock:
            in_use = sum(self._blocks[b].size_bytes for b in self._by_lease.get(lease.lease_id, ()))
            if in_use + size_bytes > lease.resources.memory_mb * MIB:
                raise OverLeaseError(
                    f"{in_use + size_bytes} bytes exceed lease of {lease.resources.memory_mb} MiB")
            block = MemoryBlock(next(self._ids), size_bytes, lease.lease_id,
                                data=bytearray(size_bytes), lock=threading.Lock())
            self._blocks[block.block_id] = block
            self._by_lease.setdefault(lease.lease_id, []).append(block.block_id)
            return block

    def block(self, block_id: int) -> MemoryBlock:
        with self._lock:
            block = self._blocks.get(block_id)
        if block is None:
            raise UnknownBlockError(f"unknown block {block_id}")
        return block

    def _resolve(self, block) -> MemoryBlock:
        if isinstance(block, int):
            return self.block(block)
        return block

    @staticmethod
    def _check_range(block: MemoryBlock, offset: int, length: int) -> None:
        if offset < 0 or length < 0 or offset + length > block.size_bytes:
            raise OutOfBoundsError(
                f"range [{offset}, {offset + length}) outside block of {block.size_bytes} bytes")

    def _ensure_resident(self, block: MemoryBlock) -> None:
        if block.state is BlockState.SWAPPED:
            try:
                with open(block.swap_path, "rb") as fh:
                    data = bytearray(fh.read())
            except OSError as exc:
                raise SwapIOError(f"restore of block {block.block_id} failed: {exc}") from None
            if len(data) != block.size_bytes:
                raise SwapIOError(f"swap file of block {block.block_id} is truncated")
            block.data = data
            block.state = BlockState.RESIDENT
            block.swap_path.unlink(missing_ok=True)
            block.swap_path = None

    def put(self, block, offset: int, data: bytes) -> None:
        block = self._resolve(block)
        with block.lock:
            if block.terminated:
                raise TerminatedLeaseError(f"lease {block.owner_lease_id} terminated")
            self._check_range(block, offset, len(data))
            self._ensure_resident(block)
            block.data[offset:offset + len(data)] = data

    def get(self, block, offset: int, length: int) -> bytes:
        block = self._resolve(block)
        with block.lock:
            if block.terminated:
                raise TerminatedLeaseError(f"lease {block.owner_lease_id} terminated")
            self._check_range(block, offset, length)
            self._ensure_resident(block)
            return bytes(block.data[offset:offset + length])

    def reclaim(self, block) -> SwapReceipt:
        block = self._resolve(block)
        with block.lock:
            if block.terminated:
                raise TerminatedLeaseError(f"lease {block.owner_lease_id} terminated")
            if block.state is BlockState.SWAPPED:
                raise AlreadySwappedError(f"block {block.block_id} already swapped")
            path = self.swap_dir / f"block-{os.getpid()}-{block.block_id}.swap"
            try:
                self.swap_dir.mkdir(parents=True, exist_ok=True)
                with open(path, "wb") as fh:
                    fh.write(block.data)
                    fh.flush()
                    os.fsync(fh.fileno())
            except OSError as exc:
                path.unlink(missing_ok=True)
                raise SwapIOError(f"swap of block {block.block_id} failed: {exc}") from None
            block.swap_path = path
            block.state = BlockState.SWAPPED
            block.data = None
            return SwapReceipt(block.block_id, path, block.size_bytes)

    def resident_bytes(self) -> int:
        with self._lock:
            blocks = list(self._blocks.values())
        return sum(b.size_bytes for b in blocks
                   if b.state is BlockState.RESIDENT and not b.terminated)

    def reclaim_bytes(self, target_bytes: int) -> int:
        """Swap out resident blocks (oldest first) until ``target_bytes`` are freed."""
        freed = 0
        with self._lock:
            blocks = list(self._blocks.values())
        for block in blocks:
            if freed >= target_bytes:
                break
            if block.state is BlockState.RESIDENT and not block.terminated:
                try:
                    self.reclaim(block)
                    freed += block.size_bytes
                except (AlreadySwappedError, TerminatedLeaseError):
                    pass
        return freed

    def blocks_of(self, lease_id: str) -> list:
        with self._lock:
            return [self._blocks[b] for b in self._by_lease.get(lease_id, ())]

    def terminate_lease(self, lease_id: str) -> int:
        """Fail all further access to the lease's blocks and delete their storage."""
        with self._lock:
            self._terminated_leases.add(lease_id)
            ids = self._by_lease.pop(lease_id, [])
            blocks = [self._blocks[b] for b in ids]
        for block in blocks:
            with block.lock:
                block.terminated = True
                block.data = None
                if block.swap_path is not None:
                    block.swap_path.unlink(missing_ok=True)
                    block.swap_path = None
        return len(blocks)

    def terminate_all(self) -> int:
        with self._lock:
            leases = list(self._by_lease)
        return sum(self.terminate_lease(lid) for lid in leases)
