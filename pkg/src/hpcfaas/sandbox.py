"""Sandboxes: one OS process hosting one function entry point.

The executor talks to a sandbox over its stdin/stdout pipes with frames of
``len u32 | op u8 | body``.  Parent to child:

    I  entry point "module:attr"                 -> R (ready) | E error text
    X  max_duration_ms u32 | payload             -> O payload | F error text | D (deadline)
    M  spin_us u32   (0 = block on reads)           no reply

User code never sees the protocol descriptors: inside the child fd 1 is
pointed at stderr so stray prints cannot corrupt frames.
"""

from __future__ import annotations

import itertools
import os
import select
import struct
import subprocess
import sys
import time

_FRAME = struct.Struct(">IB")
_U32 = struct.Struct(">I")

OP_INIT, OP_EXEC, OP_MODE = b"I"[0], b"X"[0], b"M"[0]
OP_READY, OP_ERROR, OP_OK, OP_FAIL, OP_DEADLINE = b"R"[0], b"E"[0], b"O"[0], b"F"[0], b"D"[0]

_BOOT = ("import os, sys; sys.path[:0] = os.environ.get('HPCFAAS_SANDBOX_PATH', '').split(os.pathsep); "
         "from hpcfaas.sandbox import child_main; child_main()")


def _frame(op: int, body: bytes = b"") -> bytes:
    return _FRAME.pack(len(body) + 1, op) + body


# -- child side ----------------------------------------------------------------

class DeadlineExceeded(BaseException):
    """Raised inside user code when its time limit expires."""


def _read_exact(fd: int, n: int, spin_us: int) -> bytes:
    out = bytearray()
    spin_until = time.perf_counter() + spin_us / 1e6 if spin_us else 0.0
    while len(out) < n:
        if spin_us:
            try:
                chunk = os.read(fd, n - len(out))
            except BlockingIOError:
                if time.perf_counter() < spin_until:
                    os.sched_yield()
                    continue
                os.set_blocking(fd, True)
                try:
                    chunk = os.read(fd, n - len(out))
                finally:
                    os.set_blocking(fd, False)
        else:
            chunk = os.read(fd, n - len(out))
        if not chunk:
            raise EOFError
        out += chunk
    return bytes(out)


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        try:
            n = os.write(fd, view)
        except BlockingIOError:
            select.select([], [fd], [])
            continue
        view = view[n:]


def child_main() -> None:
    import importlib
    import signal

    proto_in = os.dup(0)
    proto_out = os.dup(1)
    devnull = os.open(os.devnull, os.O_RDONLY)
    os.dup2(devnull, 0)
    os.dup2(2, 1)

    def on_alarm(signum, frame):
        raise DeadlineExceeded()

    signal.signal(signal.SIGALRM, on_alarm)
    fn = None
    spin_us = 0
    while True:
        try:
            length, op = _FRAME.unpack(_read_exact(proto_in, _FRAME.size, spin_us))
            body = _read_exact(proto_in, length - 1, spin_us) if length > 1 else b""
        except EOFError:
            return
        if op == OP_INIT:
            try:
                module, _, attr = body.decode().partition(":")
                fn = getattr(importlib.import_module(module), attr)
                reply = _frame(OP_READY)
            except Exception as exc:
                reply = _frame(OP_ERROR, f"{type(exc).__name__}: {exc}".encode())
            _write_all(proto_out, reply)
        elif op == OP_MODE:
            new_spin = _U32.unpack(body)[0]
            if new_spin and not spin_us:
                os.set_blocking(proto_in, False)
            elif spin_us and not new_spin:
                os.set_blocking(proto_in, True)
            spin_us = new_spin
        elif op == OP_EXEC:
            (limit_ms,) = _U32.unpack_from(body, 0)
            payload = body[_U32.size:]
            try:
                signal.setitimer(signal.ITIMER_REAL, limit_ms / 1000.0)
                try:
                    out = fn(payload)
                finally:
                    signal.setitimer(signal.ITIMER_REAL, 0)
                if out is None:
                    out = b""
                elif isinstance(out, str):
                    out = out.encode()
                reply = _frame(OP_OK, bytes(out))
            except DeadlineExceeded:
                reply = _frame(OP_DEADLINE)
            except Exception as exc:
                reply = _frame(OP_FAIL, f"{type(exc).__name__}: {exc}".encode())
            _write_all(proto_out, reply)


# -- parent side ---------------------------------------------------------------

class SandboxError(Exception):
    pass


def _sandbox_env() -> dict:
    env = dict(os.environ)
    env["HPCFAAS_SANDBOX_PATH"] = os.pathsep.join(p for p in sys.path if p)
    return env


_ids = itertools.count(1)


class Sandbox:
    """Parent-side handle of a sandbox process."""

    def __init__(self, image_ref: str, entry_point: str, memory_mb: int = 0):
        self.sandbox_id = next(_ids)
        self.image_ref = image_ref
        self.entry_point = entry_point
        self.memory_mb = memory_mb
        self.state = "cold"
        self.last_used_at = 0.0
        self.spawn_ms = 0.0
        self.proc = None
        self._buf = bytearray()
        self._spin_us = 0

    def spawn(self, timeout: float = 30.0) -> float:
        """Start the process and wait for it to load the entry point."""
        start = time.perf_counter()
        self.proc = subprocess.Popen(
            [sys.executable, "-S", "-c", _BOOT],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
            env=_sandbox_env(), bufsize=0, close_fds=True,
        )
        self._in = self.proc.stdin.fileno()
        self._out = self.proc.stdout.fileno()
        os.set_blocking(self._out, False)
        self.send(OP_INIT, self.entry_point.encode())
        op, body = self.wait_reply(timeout)
        if op != OP_READY:
            self.kill()
            raise SandboxError(body.decode(errors="replace") or "sandbox failed to start")
        self.spawn_ms = (time.perf_counter() - start) * 1000.0
        self.state = "warm"
        self.last_used_at = time.monotonic()
        return self.spawn_ms

    def fileno(self) -> int:
        return self._out

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def send(self, op: int, body: bytes = b"") -> None:
        _write_all(self._in, _frame(op, body))

    def set_spin(self, spin_us: int) -> None:
        if spin_us != self._spin_us:
            self._spin_us = spin_us
            self.send(OP_MODE, _U32.pack(spin_us))

    def start_exec(self, payload: bytes, max_duration_ms: int) -> None:
        self.state = "busy"
        self.send(OP_EXEC, _U32.pack(max_duration_ms) + payload)

    def poll_reply(self):
        """Non-blocking: (op, body) when a full reply is buffered, else None.

        Raises EOFError when the process has gone away.
        """
        while True:
            if len(self._buf) >= _FRAME.size:
                length, op = _FRAME.unpack_from(self._buf, 0)
                end = _U32.size + length
                if len(self._buf) >= end:
                    body = bytes(self._buf[_FRAME.size:end])
                    del self._buf[:end]
                    return op, body
            try:
                chunk = os.read(self._out, 1 << 20)
            except BlockingIOError:
                return None
            if not chunk:
                raise EOFError("sandbox exited")
            self._buf += chunk

    def wait_reply(self, timeout: float):
        deadline = time.monotonic() + timeout
        while True:
            reply = self.poll_reply()
            if reply is not None:
                return reply
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise TimeoutError("sandbox did not reply")
            select.select([self._out], [], [], remaining)

    def finish(self) -> None:
        self.state = "warm"
        self.last_used_at = time.monotonic()

    def kill(self) -> None:
        self.state = "dead"
        if self.proc is None:
            return
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            pass
        for stream in (self.proc.stdin, self.proc.stdout):
            try:
                stream.close()
            except OSError:
                pass

    def __repr__(self):
        return f"<Sandbox {self.sandbox_id} {self.image_ref} {self.state}>"
