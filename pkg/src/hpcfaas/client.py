"""Client library: lease a function, talk to its executor directly.

    h = open_function(spec, "http://rm:8000")
    result = h.invoke(b"abc")
    ticket = h.invoke_async(b"xyz")
    while (r := h.poll(ticket)) is None:
        do_local_work()
    h.close()

When the lease is cancelled (terminated replies, a lease-cancel notice, a
"draining" rejection, or a lost connection) the handle leases again and
resends whatever was still outstanding.  Application errors are never
retried.
"""

from __future__ import annotations

import itertools
import os
import select
import socket
import time
import uuid
from dataclasses import dataclass
from typing import Optional

from . import protocol as p
from .core import FaasError, FunctionSpec, InvocationResult, InvocationStatus, Lease
from .manager import DoubleReleaseError, NoCapacityError, PolicyDeniedError, UnknownLeaseError

RM_ENV = "RFAAS_RM_ENDPOINT"

_MODES = {"default": p.BIND_DEFAULT, "warm": p.BIND_WARM, "hot": p.BIND_HOT, "cold": p.BIND_COLD}


class ExhaustedRetries(FaasError):
    code = "exhausted-retries"


class StaleTicketError(FaasError):
    code = "stale-ticket"


class BindRefused(FaasError):
    code = "bind-refused"


class LeaseLost(FaasError):
    code = "lease-lost"


@dataclass(frozen=True)
class RetryPolicy:
    max_releases: int = 3
    backoff_ms: int = 100


@dataclass(frozen=True)
class Ticket:
    invocation_id: int


def _resolve_rm(rm):
    if rm is None:
        rm = os.environ.get(RM_ENV)
        if not rm:
            raise FaasError(f"no resource manager given and {RM_ENV} is not set")
    if isinstance(rm, str):
        from .rest import RMClient
        return RMClient(rm)
    return rm


class FunctionHandle:
    """A leased function plus its open channel.  Use from one thread at a time."""

    def __init__(self, spec: FunctionSpec, rm=None, retry: RetryPolicy = RetryPolicy(),
                 mode: str = "default", client_id: Optional[str] = None,
                 max_payload: int = p.MAX_PAYLOAD, connect_timeout: float = 10.0):
        if mode not in _MODES:
            raise ValueError(f"mode must be one of {sorted(_MODES)}")
        self.spec = spec
        self.rm = _resolve_rm(rm)
        self.retry_policy = retry
        self.mode = mode
        self.client_id = client_id or f"client-{uuid.uuid4().hex[:8]}"
        self.max_payload = max_payload
        self.connect_timeout = connect_timeout
        self.current_lease: Optional[Lease] = None
        self.channel: Optional[socket.socket] = None
        self.connect_ms: Optional[float] = None
        self.leases_acquired = 0
        self._ids = itertools.count(1)
        self._reader = p.FrameReader("client", max_payload)
        self._pending: dict = {}      # invocation id -> payload, in submission order
        self._results: dict = {}      # invocation id -> InvocationResult | FaasError
        self._consumed: set = set()
        self._memop_replies: list = []
        self._failures = 0

    # -- connection management -------------------------------------------------

    def connect(self) -> None:
        """Acquire a lease and bind a channel to its executor."""
        lease = self.rm.acquire_lease(self.spec, self.client_id)
        self.attach(lease, release_on_failure=True)

    def attach(self, lease: Lease, release_on_failure: bool = False) -> None:
        """Bind a channel to an already granted lease."""
        start = time.perf_counter()
        try:
            sock = socket.create_connection(p.parse_endpoint(lease.endpoint), self.connect_timeout)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(p.encode_bind(lease.lease_id, _MODES[self.mode]))
            reader = p.FrameReader("client", self.max_payload)
            ack = p.recv_message(sock, reader, self.connect_timeout)
        except (OSError, FaasError) as exc:
            if release_on_failure:
                self._release_quietly(lease.lease_id)
            raise LeaseLost(f"cannot reach executor at {lease.endpoint}: {exc}") from None
        if not isinstance(ack, p.BindAck) or not ack.ok:
            sock.close()
            if release_on_failure:
                self._release_quietly(lease.lease_id)
            raise BindRefused(getattr(ack, "reason", "unexpected reply"))
        sock.settimeout(None)
        self.connect_ms = (time.perf_counter() - start) * 1000.0
        self.current_lease = lease
        self.channel = sock
        self._reader = reader
        self.leases_acquired += 1

    def _release_quietly(self, lease_id: str) -> None:
        try:
            self.rm.release_lease(lease_id)
        except (UnknownLeaseError, DoubleReleaseError):
            pass
        except FaasError:
            pass

    def _drop_channel(self) -> None:
        if self.channel is not None:
            try:
                self.channel.close()
            except OSError:
                pass
        self.channel = None
        if self.current_lease is not None:
            self._release_quietly(self.current_lease.lease_id)
        self.current_lease = None
        self._reader = p.FrameReader("client", self.max_payload)

    def _recover(self) -> None:
        """Lease again and resend outstanding requests; fails them all when out of retries."""
        self._drop_channel()
        last_error: Optional[Exception] = None
        while self._failures < self.retry_policy.max_releases:
            self._failures += 1
            time.sleep(self.retry_policy.backoff_ms * self._failures / 1000.0)
            try:
                self.connect()
            except (NoCapacityError, PolicyDeniedError, BindRefused, LeaseLost) as exc:
                last_error = exc
                continue
            try:
                for inv_id, payload in list(self._pending.items()):
                    self._send_request(inv_id, payload)
            except OSError as exc:
                last_error = exc
                self._drop_channel()
                continue
            return
        error = ExhaustedRetries(f"lease lost {self._failures} times"
                                 + (f"; last error: {last_error}" if last_error else ""))
        for inv_id in list(self._pending):
            self._results[inv_id] = error
        self._pending.clear()
        self._failures = 0

    def _ensure_channel(self) -> None:
        if self.channel is None:
            if self.leases_acquired == 0:
                self.connect()
            else:
                self._recover()
                if self.channel is None:
                    raise ExhaustedRetries("could not re-acquire a lease")

    # -- invocations -----------------------------------------------------------

    def _send_request(self, inv_id: int, payload: bytes) -> None:
        self.channel.sendall(p.encode_request(inv_id, self.spec.function_id, payload,
                                              self.max_payload))

    def invoke_async(self, payload: bytes) -> Ticket:
        if len(payload) > self.max_payload:
            raise p.ProtocolError(f"payload of {len(payload)} bytes exceeds {self.max_payload}")
        self._ensure_channel()
        inv_id = next(self._ids)
        self._pending[inv_id] = payload
        try:
            self._send_request(inv_id, payload)
        except OSError:
            self._recover()
        return Ticket(inv_id)

    def poll(self, ticket: Ticket) -> Optional[InvocationResult]:
        """Non-blocking: the result once available, else None."""
        result = self._take(ticket)
        if result is None:
            self._pump(0.0)
            result = self._take(ticket)
        return result

    def wait(self, ticket: Ticket, timeout: Optional[float] = None) -> InvocationResult:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            result = self._take(ticket)
            if result is not None:
                return result
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TimeoutError(f"invocation {ticket.invocation_id} still pending")
            self._pump(remaining)

    def invoke(self, payload: bytes) -> InvocationResult:
        return self.wait(self.invoke_async(payload))

    def _take(self, ticket: Ticket):
        inv_id = ticket.invocation_id
        if inv_id in self._consumed:
            raise StaleTicketError(f"ticket {inv_id} was already consumed")
        if inv_id in self._results:
            result = self._results.pop(inv_id)
            self._consumed.add(inv_id)
            if isinstance(result, Exception):
                raise result
            return result
        if inv_id not in self._pending:
            raise StaleTicketError(f"unknown ticket {inv_id}")
        return None

    def _pump(self, timeout: Optional[float]) -> None:
        """Read whatever the executor sent; block up to ``timeout`` for the first byte."""
        if self.channel is None:
            if self._pending:
                self._recover()
            return
        lost = False
        try:
            ready, _, _ = select.select([self.channel], [], [], timeout)
            if not ready:
                return
            data = self.channel.recv(1 << 20)
            if not data:
                lost = True
            else:
                self._reader.feed(data)
                while (msg := self._reader.next()) is not None:
                    if self._on_message(msg):
                        lost = True
        except (OSError, p.ProtocolError):
            lost = True
        if lost:
            if self._pending:
                self._recover()
            else:
                self._drop_channel()

    def _on_message(self, msg) -> bool:
        """Handle one message; True if the lease is gone."""
        if isinstance(msg, p.MemOpReply):
            self._memop_replies.append(msg)
            return False
        if not isinstance(msg, InvocationResult):
            raise p.ProtocolError(f"unexpected {type(msg).__name__}")
        if msg.invocation_id == p.NOTICE_ID:
            return True
        if msg.invocation_id not in self._pending:
            return False
        if msg.status is InvocationStatus.TERMINATED:
            return True
        if msg.status is InvocationStatus.ERROR and msg.payload == b"draining":
            # Stays pending.  Work still running on this lease finishes first;
            # the cancel notice that follows triggers the redirect.
            return False
        del self._pending[msg.invocation_id]
        self._results[msg.invocation_id] = msg
        self._failures = 0
        return False

    @property
    def pending(self) -> int:
        return len(self._pending)

    # -- memory service --------------------------------------------------------

    def _memop(self, op: int, block_id: int = 0, offset: int = 0, length: int = 0,
               data: bytes = b"") -> p.MemOpReply:
        from .memsvc import ERRORS, MemoryServiceError, TerminatedLeaseError
        if self.channel is None:
            if self.leases_acquired:
                raise TerminatedLeaseError("memory lease is gone")
            self.connect()
        try:
            self.channel.sendall(p.encode_memop(op, block_id, offset, length, data))
            while not self._memop_replies:
                ready, _, _ = select.select([self.channel], [], [])
                chunk = self.channel.recv(1 << 20)
                if not chunk:
                    raise OSError("connection closed")
                self._reader.feed(chunk)
                while (msg := self._reader.next()) is not None:
                    if self._on_message(msg):
                        raise OSError("lease cancelled")
        except OSError:
            self._drop_channel()
            raise TerminatedLeaseError("memory lease was cancelled") from None
        reply = self._memop_replies.pop(0)
        if reply.status != 0:
            code, _, reason = reply.data.decode(errors="replace").partition(": ")
            raise ERRORS.get(code, MemoryServiceError)(reason)
        return reply

    def alloc(self, size_bytes: int) -> int:
        return self._memop(p.MEM_ALLOC, length=size_bytes).block_id

    def put(self, block_id: int, offset: int, data: bytes) -> None:
        self._memop(p.MEM_PUT, block_id, offset, data=data)

    def get(self, block_id: int, offset: int, length: int) -> bytes:
        return self._memop(p.MEM_GET, block_id, offset, length).data

    def reclaim(self, block_id: int) -> None:
        self._memop(p.MEM_RECLAIM, block_id)

    # -- teardown --------------------------------------------------------------

    def close(self) -> None:
        """Close the channel and release the lease."""
        self._drop_channel()

    def detach(self) -> None:
        """Close the channel but keep the lease (it can be attached to again)."""
        if self.channel is not None:
            self.channel.close()
        self.channel = None
        self.current_lease = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_function(spec: FunctionSpec, rm_endpoint=None, **kwargs) -> FunctionHandle:
    """Lease ``spec`` and connect to its executor."""
    handle = FunctionHandle(spec, rm_endpoint, **kwargs)
    handle.connect()
    return handle


open = open_function  # noqa: A001 - mirrors the library's documented entry point
