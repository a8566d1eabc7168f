"""Per-node executor: serves lease-bound connections from sandboxed processes.

Each client connection gets its own thread running a small event loop over
the socket, a wake-up pipe and the sandboxes currently executing for it.
Requests queue per connection and run up to ``lease.cores`` at a time.

Connection modes:

hot
    the connection keeps a dedicated sandbox between invocations, and both
    the loop and the sandbox poll without sleeping for ``hot_spin_us`` after
    each message before falling back to a blocking wait.
warm
    the loop blocks; after each invocation the sandbox goes back to the
    shared warm pool and is checked out again for the next one.
cold
    every invocation spawns a fresh sandbox that is killed afterwards
    (benchmark baseline).
"""

from __future__ import annotations

import logging
import math
import os
import selectors
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import protocol as p
from .core import (FaasError, FunctionKind, InvocationResult, InvocationStatus, Lease, LeaseState,
                   ResourceVector, Timings, ValidationError)
from .functions import BUILTIN_REGISTRY
from .manager import DrainReport, UnknownLeaseError
from .memsvc import MemoryService, MemoryServiceError
from .sandbox import (OP_DEADLINE, OP_FAIL, OP_OK, Sandbox, SandboxError)
from .warmpool import WarmPool

log = logging.getLogger(__name__)

MODES = ("hot", "warm", "cold")
_BIND_MODES = {p.BIND_WARM: "warm", p.BIND_HOT: "hot", p.BIND_COLD: "cold"}

DRAINING = b"draining"


class RegistrationError(FaasError):
    code = "registration"


def _detect_resources() -> ResourceVector:
    cores = os.cpu_count() or 1
    try:
        mem = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES") // (1 << 20)
    except (ValueError, OSError):
        mem = 1024
    return ResourceVector(cores, int(mem), 0)


@dataclass
class ExecutorConfig:
    node_id: str
    rm_endpoint: Optional[str] = None
    listen_addr: str = "127.0.0.1:0"
    warm_pool_budget_mb: int = 1024
    serving_cores: int = 1
    function_registry: dict = field(default_factory=lambda: dict(BUILTIN_REGISTRY))
    mode: str = "warm"
    resources: Optional[ResourceVector] = None
    availability_hint_s: Optional[float] = None
    sharing: str = "opt_in"
    max_payload: int = p.MAX_PAYLOAD
    deadline_slack_ms: int = 50
    hot_spin_us: int = 50_000
    touch_interval_s: float = 30.0
    swap_dir: Optional[str] = None

    def __post_init__(self):
        if self.serving_cores < 1:
            raise ValidationError("serving_cores must be at least 1")
        if self.warm_pool_budget_mb < 0:
            raise ValidationError("warm_pool_budget_mb must be non-negative")
        if self.mode not in ("hot", "warm"):
            raise ValidationError(f"mode must be hot or warm, not {self.mode!r}")


@dataclass
class _Running:
    invocation_id: int
    sandbox: Sandbox
    started: float
    hard_deadline: float
    queue_ms: int
    sandbox_ms: int


_SOCK, _WAKE = "sock", "wake"


class _Session:
    """One lease-bound client connection."""

    def __init__(self, ex: Executor, sock: socket.socket, lease: Lease, mode: str,
                 reader: p.FrameReader):
        self.ex = ex
        self.sock = sock
        self.lease = lease
        self.spec = lease.spec
        self.mode = mode
        self.slots = max(1, lease.resources.cores)
        self.reader = reader
        self.queue: deque = deque()
        self.running: dict = {}
        self.idle: list = []
        self.closing = False
        self.notice = False
        self.client_gone = False
        self.revoked = False
        self.graceful = False
        self.last_activity = time.perf_counter()
        self.invocations = 0
        self._wake_r, self._wake_w = os.pipe()
        os.set_blocking(self._wake_r, False)
        os.set_blocking(self._wake_w, False)
        self.sel = selectors.DefaultSelector()

    def wake(self):
        try:
            os.write(self._wake_w, b"x")
        except (BlockingIOError, OSError):
            pass

    # -- loop ------------------------------------------------------------------

    def run(self):
        self.sock.setblocking(False)
        self.sel.register(self.sock, selectors.EVENT_READ, _SOCK)
        self.sel.register(self._wake_r, selectors.EVENT_READ, _WAKE)
        try:
            self._on_wake()  # a drain may have started before we registered
            if self.reader.buf:
                self._parse()
            self._loop()
        except Exception:
            log.exception("session for %s failed", self.lease.lease_id)
            self._abort_all()
        finally:
            self._finish()

    def _loop(self):
        spin_s = self.ex.config.hot_spin_us / 1e6 if self.mode == "hot" else 0.0
        while True:
            self._start_queued()
            if self.client_gone or (self.closing and not self.running):
                return
            if spin_s and time.perf_counter() - self.last_activity < spin_s:
                events = self.sel.select(0)
                if not events:
                    self._check_deadlines()
                    os.sched_yield()
                    continue
            else:
                events = self.sel.select(self._timeout())
            for key, _ in events:
                if key.data is _SOCK:
                    self._on_socket()
                elif key.data is _WAKE:
                    self._on_wake()
                elif self.running.get(key.data.sandbox.fileno()) is key.data:
                    self._on_sandbox(key.data)
                if self.client_gone:
                    return
            self._check_deadlines()

    def _timeout(self):
        if not self.running:
            return None
        soonest = min(r.hard_deadline for r in self.running.values())
        return max(0.0, soonest - time.perf_counter())

    # -- I/O -------------------------------------------------------------------

    def _send(self, data: bytes):
        if self.client_gone:
            return
        view = memoryview(data)
        try:
            while view:
                try:
                    n = self.sock.send(view)
                except BlockingIOError:
                    _, writable, _ = _select_write(self.sock, 30.0)
                    if not writable:
                        raise OSError("client stopped reading")
                    continue
                view = view[n:]
        except OSError:
            self.client_gone = True

    def _reply(self, inv_id: int, status: InvocationStatus, payload: bytes = b"",
               timings: Timings = Timings()):
        self._send(p.encode_response(InvocationResult(inv_id, status, payload, timings)))

    def _on_socket(self):
        try:
            data = self.sock.recv(1 << 20)
        except BlockingIOError:
            return
        except OSError:
            data = b""
        if not data:
            self._client_lost()
            return
        self.last_activity = time.perf_counter()
        self.reader.feed(data)
        self._parse()

    def _parse(self):
        while not self.client_gone:
            try:
                msg = self.reader.next()
            except p.PayloadTooLarge as exc:
                self._reply(exc.invocation_id, InvocationStatus.ERROR, b"payload-too-large")
                self._protocol_abort()
                return
            except (p.ProtocolError, UnicodeDecodeError) as exc:
                log.warning("protocol error on %s: %s", self.lease.lease_id, exc)
                self._protocol_abort()
                return
            if msg is None:
                return
            self._on_message(msg)

    def _on_message(self, msg):
        if isinstance(msg, p.Request):
            if self.closing or self.ex.drain_mode is not None:
                self._reply(msg.invocation_id, InvocationStatus.ERROR, DRAINING)
            elif self.spec.kind is FunctionKind.MEMORY_SERVICE:
                self._reply(msg.invocation_id, InvocationStatus.ERROR, b"not-invocable")
            elif msg.function_id != self.lease.function_id:
                self._reply(msg.invocation_id, InvocationStatus.ERROR, b"unknown-function")
            else:
                self.queue.append((msg, time.perf_counter()))
        elif isinstance(msg, p.MemOp):
            self._send(self.ex.memop(self.lease, msg))
        else:
            log.warning("unexpected %s on lease connection", type(msg).__name__)
            self._protocol_abort()

    def _client_lost(self):
        self.client_gone = True
        for run in list(self.running.values()):
            self._drop(run, kill=True)
        self.queue.clear()

    def _protocol_abort(self):
        self._abort_all(count=False)
        self.notice = False

    # -- drain and revoke ------------------------------------------------------

    def _on_wake(self):
        try:
            while os.read(self._wake_r, 64):
                pass
        except (BlockingIOError, OSError):
            pass
        mode = self.ex.drain_mode
        if self.revoked:
            self._abort_all(count=False)
        elif mode == "immediate":
            self._abort_all(count=True)
        elif mode == "graceful" and not self.graceful:
            self.graceful = True
            self.closing = True
            self.notice = True
            while self.queue:
                req, _ = self.queue.popleft()
                self._reply(req.invocation_id, InvocationStatus.ERROR, DRAINING)
                self.ex._count(aborted=1)

    def _abort_all(self, count: bool = True):
        for run in list(self.running.values()):
            self._drop(run, kill=True)
            self._reply(run.invocation_id, InvocationStatus.TERMINATED)
            if count:
                self.ex._count(aborted=1)
        while self.queue:
            req, _ = self.queue.popleft()
            self._reply(req.invocation_id, InvocationStatus.TERMINATED)
            if count:
                self.ex._count(aborted=1)
        self.closing = True
        self.notice = True

    # -- execution -------------------------------------------------------------

    def _checkout(self):
        if self.mode != "cold":
            if self.idle:
                return self.idle.pop(), 0
            sb = self.ex._pool_checkout(self.spec.image_ref)
            if sb is not None:
                return sb, 0
        sb = self.ex._spawn(self.spec)
        return sb, max(1, math.ceil(sb.spawn_ms))

    def _start_queued(self):
        while self.queue and len(self.running) < self.slots and not self.closing:
            req, arrived = self.queue.popleft()
            queue_ms = int((time.perf_counter() - arrived) * 1000)
            try:
                sb, sandbox_ms = self._checkout()
                sb.set_spin(self.ex.config.hot_spin_us if self.mode == "hot" else 0)
                started = time.perf_counter()
                sb.start_exec(req.payload, self.spec.max_duration_ms)
            except (SandboxError, OSError, TimeoutError) as exc:
                self._reply(req.invocation_id, InvocationStatus.ERROR,
                            f"sandbox: {exc}".encode())
                continue
            limit = (self.spec.max_duration_ms + self.ex.config.deadline_slack_ms / 2) / 1000.0
            run = _Running(req.invocation_id, sb, started, started + limit, queue_ms, sandbox_ms)
            self.running[sb.fileno()] = run
            self.sel.register(sb.fileno(), selectors.EVENT_READ, run)
            self.invocations += 1

    def _on_sandbox(self, run: _Running):
        try:
            reply = run.sandbox.poll_reply()
        except EOFError:
            reply = (None, b"")
        if reply is None:
            return
        op, body = reply
        exec_ms = max(1, math.ceil((time.perf_counter() - run.started) * 1000))
        timings = Timings(run.queue_ms, run.sandbox_ms, exec_ms)
        if op == OP_OK:
            status, payload, reusable = InvocationStatus.OK, body, True
        elif op == OP_DEADLINE:
            status, payload, reusable = InvocationStatus.ERROR, b"deadline", True
        elif op == OP_FAIL:
            status, payload, reusable = InvocationStatus.ERROR, b"function-error: " + body, True
        else:
            status, payload, reusable = InvocationStatus.ERROR, b"sandbox-crashed", False
        self._drop(run, kill=not reusable or self.mode == "cold")
        self.last_activity = time.perf_counter()
        self._reply(run.invocation_id, status, payload, timings)
        if self.graceful:
            self.ex._count(completed=1)

    def _check_deadlines(self):
        if not self.running:
            return
        now = time.perf_counter()
        for run in list(self.running.values()):
            if now >= run.hard_deadline:
                exec_ms = max(1, math.ceil((now - run.started) * 1000))
                self._drop(run, kill=True)
                self._reply(run.invocation_id, InvocationStatus.ERROR, b"deadline",
                            Timings(run.queue_ms, run.sandbox_ms, exec_ms))
                if self.graceful:
                    self.ex._count(completed=1)

    def _drop(self, run: _Running, kill: bool):
        fd = run.sandbox.fileno()
        self.running.pop(fd, None)
        try:
            self.sel.unregister(fd)
        except (KeyError, ValueError):
            pass
        if kill:
            self.ex._kill(run.sandbox)
        elif self.mode == "hot" or self.queue:
            run.sandbox.finish()
            self.idle.append(run.sandbox)
        else:
            self.ex._pool_checkin(run.sandbox)

    def _finish(self):
        for run in list(self.running.values()):
            self._drop(run, kill=True)
        for sb in self.idle:
            if self.mode == "cold":
                self.ex._kill(sb)
            else:
                self.ex._pool_checkin(sb)
        self.idle = []
        if self.notice and not self.client_gone:
            self._reply(p.NOTICE_ID, InvocationStatus.TERMINATED)
        self.sel.close()
        for fd in (self._wake_r, self._wake_w):
            os.close(fd)
        try:
            self.sock.close()
        except OSError:
            pass
        self.ex._session_done(self)


def _select_write(sock, timeout):
    import select
    return select.select([], [sock], [], timeout)


class Executor:
    """Executor for one node.  ``rm`` is an RMClient or an in-process ResourceManager."""

    def __init__(self, config: ExecutorConfig, rm=None,
                 lease_lookup: Optional[Callable[[str], Lease]] = None):
        self.config = config
        if rm is None and config.rm_endpoint:
            from .rest import RMClient
            rm = RMClient(config.rm_endpoint)
        self.rm = rm
        self.lease_lookup = lease_lookup or (rm.lookup_lease if rm is not None else None)
        self.pool = WarmPool(config.warm_pool_budget_mb)
        self.memsvc = MemoryService(config.swap_dir)
        self.drain_mode: Optional[str] = None
        self.report: Optional[DrainReport] = None
        self.cold_starts = 0
        self._lock = threading.Condition()
        self._sessions: set = set()
        self._live: set = set()
        self._aborted = 0
        self._completed = 0
        self._drained = threading.Event()
        self._stopping = threading.Event()
        self._images_dirty = threading.Event()
        self._pushed_images: frozenset = frozenset()
        self._listener: Optional[socket.socket] = None
        self._wake_r, self._wake_w = os.pipe()
        self._threads: list = []
        self.endpoint: Optional[str] = None
        self._deregister_thread: Optional[threading.Thread] = None

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> Executor:
        host, port = p.parse_endpoint(self.config.listen_addr)
        self._listener = socket.create_server((host, port), backlog=128, reuse_port=False)
        bound_host, bound_port = self._listener.getsockname()[:2]
        self.endpoint = f"{bound_host}:{bound_port}"
        self._spawn_thread(self._accept_loop, "executor-accept")
        if self.rm is not None:
            from .rest import node_descriptor
            desc = node_descriptor(self.config.node_id, self.config.resources or _detect_resources(),
                                   self.endpoint, self.config.serving_cores,
                                   self.config.availability_hint_s, self.config.sharing)
            try:
                self.rm.register_node(desc)
            except FaasError as exc:
                self._close_listener()
                raise RegistrationError(f"could not register {self.config.node_id}: {exc}") from None
            self._spawn_thread(self._rm_sync_loop, "executor-rm-sync")
        log.info("executor %s serving on %s", self.config.node_id, self.endpoint)
        return self

    def serve(self) -> DrainReport:
        """Start and block until drained."""
        if self._listener is None:
            self.start()
        self._drained.wait()
        return self.report

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._drained.wait(timeout)

    def _spawn_thread(self, target, name, *args):
        t = threading.Thread(target=target, args=args, name=name, daemon=True)
        t.start()
        self._threads.append(t)
        return t

    def _close_listener(self):
        os.write(self._wake_w, b"x")
        with self._lock:
            listener, self._listener = self._listener, None
        if listener is not None:
            listener.close()

    def _accept_loop(self):
        sel = selectors.DefaultSelector()
        listener = self._listener
        sel.register(listener, selectors.EVENT_READ, "listen")
        sel.register(self._wake_r, selectors.EVENT_READ, "wake")
        try:
            while True:
                events = sel.select()
                if any(k.data == "wake" for k, _ in events) or self._listener is None:
                    return
                try:
                    conn, _ = listener.accept()
                except OSError:
                    continue
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                threading.Thread(target=self._handle_conn, args=(conn,), daemon=True,
                                 name="executor-conn").start()
        finally:
            sel.close()

    def _handle_conn(self, conn: socket.socket):
        reader = p.FrameReader("server", self.config.max_payload)
        try:
            msg = p.recv_message(conn, reader, timeout=30.0)
        except (p.ProtocolError, p.ConnectionClosed, OSError, UnicodeDecodeError):
            conn.close()
            return
        conn.settimeout(None)
        try:
            if isinstance(msg, p.Admin):
                report = self.drain(msg.immediate)
                conn.sendall(p.encode_admin_reply(report.aborted, report.completed))
            elif isinstance(msg, p.Revoke):
                self.revoke_lease(msg.lease_id)
                conn.sendall(p.encode_bind_ack(True))
            elif isinstance(msg, p.Bind):
                session = self._bind(conn, msg, reader)
                if session is not None:
                    session.run()
                    return
            else:
                log.warning("unexpected first message %s", type(msg).__name__)
        except OSError:
            pass
        conn.close()

    def _bind(self, conn, bind: p.Bind, reader) -> Optional[_Session]:
        def refuse(reason):
            conn.sendall(p.encode_bind_ack(False, reason))
            return None

        if self.drain_mode is not None:
            return refuse("draining")
        if self.lease_lookup is None:
            return refuse("no resource manager to validate leases")
        try:
            lease = self.lease_lookup(bind.lease_id)
        except UnknownLeaseError as exc:
            return refuse(f"unknown-lease: {exc.reason}")
        except FaasError as exc:
            return refuse(f"{exc.code}: {exc.reason}")
        if lease.node_id != self.config.node_id or lease.state is not LeaseState.ACTIVE:
            return refuse(f"unknown-lease: {bind.lease_id} is not active on {self.config.node_id}")
        if lease.spec is None:
            return refuse("lease carries no function spec")
        if (lease.spec.kind is FunctionKind.COMPUTE
                and lease.spec.image_ref not in self.config.function_registry):
            return refuse(f"unknown-image: {lease.spec.image_ref}")
        mode = _BIND_MODES.get(bind.mode, self.config.mode)
        session = _Session(self, conn, lease, mode, reader)
        with self._lock:
            if self.drain_mode is not None:
                return refuse("draining")
            self._sessions.add(session)
        conn.sendall(p.encode_bind_ack(True))
        return session

    def _session_done(self, session: _Session):
        with self._lock:
            self._sessions.discard(session)
            self._lock.notify_all()

    # -- sandboxes -------------------------------------------------------------

    def entry_point(self, image_ref: str) -> str:
        try:
            return self.config.function_registry[image_ref]
        except KeyError:
            raise ValidationError(f"unknown image {image_ref}") from None

    def _spawn(self, spec) -> Sandbox:
        sb = Sandbox(spec.image_ref, self.entry_point(spec.image_ref), spec.required.memory_mb)
        with self._lock:
            self._live.add(sb)
            self.cold_starts += 1
        try:
            sb.spawn()
        except BaseException:
            self._kill(sb)
            raise
        return sb

    def _kill(self, sb: Sandbox):
        sb.kill()
        with self._lock:
            self._live.discard(sb)

    def _pool_checkout(self, image_ref: str) -> Optional[Sandbox]:
        while True:
            entry = self.pool.acquire(image_ref)
            if entry is None:
                return None
            if entry.handle.alive:
                self._mark_images()
                return entry.handle
            self._kill(entry.handle)

    def _pool_checkin(self, sb: Sandbox) -> list:
        if self.drain_mode is not None or not sb.alive:
            self._kill(sb)
            return []
        sb.finish()
        try:
            sb.set_spin(0)
        except OSError:
            self._kill(sb)
            return []
        evicted = self.pool.insert(sb.image_ref, sb.memory_mb, sb.sandbox_id, sb)
        for entry in evicted:
            self._kill(entry.handle)
        self._mark_images()
        return [e.sandbox_id for e in evicted]

    def warm_pool_insert(self, image_ref: str, memory_mb: Optional[int] = None) -> list:
        """Spawn a sandbox for ``image_ref`` and retain it warm; returns evicted sandbox ids."""
        from .core import FunctionSpec
        mem = 0 if memory_mb is None else memory_mb
        spec = FunctionSpec(f"prewarm:{image_ref}", image_ref, ResourceVector(1, mem, 0), 1)
        sb = self._spawn(spec)
        self.cold_starts -= 1  # prewarming is not an invocation cold start
        return self._pool_checkin(sb)

    prewarm = warm_pool_insert

    def shed_warm_pool(self, target_free_mb: int) -> int:
        evicted = self.pool.shed(target_free_mb)
        for entry in evicted:
            self._kill(entry.handle)
        if evicted:
            self._mark_images()
        return sum(e.memory_mb for e in evicted)

    def shed_memory(self, target_mb: int) -> int:
        """Free memory for the batch job: warm sandboxes first, then swap memory blocks."""
        freed = self.shed_warm_pool(target_mb)
        if freed < target_mb:
            freed += self.memsvc.reclaim_bytes((target_mb - freed) << 20) >> 20
        return freed

    def live_sandboxes(self) -> int:
        with self._lock:
            return sum(1 for sb in self._live if sb.alive)

    # -- memory service --------------------------------------------------------

    def memop(self, lease: Lease, op: p.MemOp) -> bytes:
        try:
            if lease.spec is None or lease.spec.kind is not FunctionKind.MEMORY_SERVICE:
                from .memsvc import InvalidLeaseError
                raise InvalidLeaseError(f"lease {lease.lease_id} is not a memory-service lease")
            block_id, data = op.block_id, b""
            if op.op == p.MEM_ALLOC:
                block_id = self.memsvc.allocate_block(lease, op.length).block_id
            else:
                block = self.memsvc.block(op.block_id)
                if block.owner_lease_id != lease.lease_id:
                    from .memsvc import InvalidLeaseError
                    raise InvalidLeaseError(f"block {op.block_id} belongs to another lease")
                if op.op == p.MEM_PUT:
                    self.memsvc.put(block, op.offset, op.data)
                elif op.op == p.MEM_GET:
                    data = self.memsvc.get(block, op.offset, op.length)
                elif op.op == p.MEM_RECLAIM:
                    self.memsvc.reclaim(block)
                else:
                    raise MemoryServiceError(f"unknown memory op {op.op}")
            return p.encode_memop_reply(0, block_id, data)
        except MemoryServiceError as exc:
            return p.encode_memop_reply(1, op.block_id, f"{exc.code}: {exc.reason}".encode())

    # -- lease revocation and drain --------------------------------------------

    def revoke_lease(self, lease_id: str) -> None:
        with self._lock:
            sessions = [s for s in self._sessions if s.lease.lease_id == lease_id]
        for s in sessions:
            s.revoked = True
            s.wake()
        self.memsvc.terminate_lease(lease_id)

    def _count(self, aborted: int = 0, completed: int = 0):
        with self._lock:
            self._aborted += aborted
            self._completed += completed

    def drain(self, immediate: bool = False) -> DrainReport:
        """Stop serving.  Safe to call repeatedly; an immediate call escalates a graceful one."""
        with self._lock:
            first = self.drain_mode is None
            if first or (immediate and self.drain_mode == "graceful"):
                self.drain_mode = "immediate" if immediate else "graceful"
            sessions = list(self._sessions)
        for s in sessions:
            s.wake()
        if not first:
            self._drained.wait()
            return self.report
        self._close_listener()
        with self._lock:
            while self._sessions:
                self._lock.wait()
        for entry in self.pool.drain():
            self._kill(entry.handle)
        with self._lock:
            leftovers = list(self._live)
        for sb in leftovers:
            self._kill(sb)
        self.memsvc.terminate_all()
        with self._lock:
            self.report = DrainReport(self._aborted, self._completed)
        self._stopping.set()
        self._images_dirty.set()
        if self.rm is not None:
            self._deregister_thread = threading.Thread(target=self._deregister, daemon=True,
                                                       name="executor-deregister")
            self._deregister_thread.start()
        self._drained.set()
        log.info("executor %s drained: %s", self.config.node_id, self.report)
        return self.report

    def wait_deregistered(self, timeout: Optional[float] = None) -> None:
        """Block until the post-drain deregistration request has finished."""
        if self._deregister_thread is not None:
            self._deregister_thread.join(timeout)

    def stop(self) -> DrainReport:
        return self.drain(immediate=True)

    def _deregister(self):
        try:
            self.rm.remove_node(self.config.node_id)
        except FaasError as exc:
            log.debug("deregistration of %s: %s", self.config.node_id, exc)
        except Exception:
            log.debug("deregistration of %s failed", self.config.node_id, exc_info=True)

    # -- resource manager sync -------------------------------------------------

    def _mark_images(self):
        if self.rm is not None and frozenset(self.pool.images()) != self._pushed_images:
            self._images_dirty.set()

    def _rm_sync_loop(self):
        last_touch = time.monotonic()
        seen: dict = {}
        while not self._stopping.is_set():
            self._images_dirty.wait(self.config.touch_interval_s)
            if self._stopping.is_set():
                return
            if self._images_dirty.is_set():
                self._images_dirty.clear()
                images = frozenset(self.pool.images())
                if images != self._pushed_images:
                    try:
                        self.rm.set_warm_images(self.config.node_id, images)
                        self._pushed_images = images
                    except Exception as exc:
                        log.debug("warm image sync failed: %s", exc)
            if time.monotonic() - last_touch >= self.config.touch_interval_s:
                last_touch = time.monotonic()
                with self._lock:
                    sessions = list(self._sessions)
                for s in sessions:
                    lid = s.lease.lease_id
                    if s.invocations != seen.get(lid):
                        seen[lid] = s.invocations
                        try:
                            self.rm.touch_lease(lid)
                        except Exception as exc:
                            log.debug("touch of %s failed: %s", lid, exc)

    def __enter__(self):
        if self._listener is None:
            self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
