"""Binary wire protocol between clients, executors and the resource manager.

Every frame starts with the same 8-byte header, big-endian::

    magic u32 = 0x52464153 ("RFAS") | version u16 = 1 | msg_type u16

followed by a body that depends on ``msg_type``:

    1 REQUEST      invocation_id u64 | function_id_len u16 | function_id | payload_len u32 | payload
    2 RESPONSE     invocation_id u64 | status u8 | queue_ms u32 | sandbox_ms u32 | exec_ms u32
                   | payload_len u32 | payload
    3 ADMIN        mode u8 (0 graceful, 1 immediate)
      ADMIN reply  aborted u32 | completed u32
    4 MEMOP        op u8 | block_id u64 | offset u64 | len u32 | data (len bytes for put)
      MEMOP reply  status u8 | block_id u64 | len u32 | data
    5 BIND         lease_id_len u16 | lease_id | mode u8 (0 default, 1 warm, 2 hot, 3 cold)
    6 BIND_ACK     status u8 | reason_len u16 | reason
    8 REVOKE       lease_id_len u16 | lease_id        (resource manager -> executor)

A RESPONSE with invocation_id 0 and status terminated is an unsolicited
notice that the connection's lease was cancelled.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass

from .core import FaasError, InvocationResult, InvocationStatus, Timings

MAGIC = 0x52464153
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

REQUEST = 1
RESPONSE = 2
ADMIN = 3
MEMOP = 4
BIND = 5
BIND_ACK = 6
REVOKE = 8

HEADER = struct.Struct(">IHH")
REQUEST_HEAD = struct.Struct(">QH")
RESPONSE_HEAD = struct.Struct(">QBIIII")
ADMIN_REPLY = struct.Struct(">II")
MEMOP_HEAD = struct.Struct(">BQQI")
MEMOP_REPLY_HEAD = struct.Struct(">BQI")
U8 = struct.Struct(">B")
U16 = struct.Struct(">H")
U32 = struct.Struct(">I")

BIND_DEFAULT, BIND_WARM, BIND_HOT, BIND_COLD = 0, 1, 2, 3
MEM_PUT, MEM_GET, MEM_ALLOC, MEM_RECLAIM = 0, 1, 2, 3

NOTICE_ID = 0


class ProtocolError(FaasError):
    code = "protocol"


class PayloadTooLarge(ProtocolError):
    """An oversized request; carries its id so the server can reply before closing."""

    def __init__(self, reason: str, invocation_id: int = 0):
        super().__init__(reason)
        self.invocation_id = invocation_id


class ConnectionClosed(FaasError):
    code = "connection-closed"


def header(msg_type: int) -> bytes:
    return HEADER.pack(MAGIC, VERSION, msg_type)


def encode_request(invocation_id: int, function_id: str, payload: bytes,
                   max_payload: int = MAX_PAYLOAD) -> bytes:
    if len(payload) > max_payload:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {max_payload}")
    fid = function_id.encode()
    return b"".join((header(REQUEST), REQUEST_HEAD.pack(invocation_id, len(fid)), fid,
                     U32.pack(len(payload)), payload))


def _clamp(ms: int) -> int:
    return max(0, min(int(ms), 0xFFFFFFFF))


def encode_response(result: InvocationResult) -> bytes:
    t = result.timings
    return b"".join((header(RESPONSE),
                     RESPONSE_HEAD.pack(result.invocation_id, int(result.status), _clamp(t.queue_ms),
                                        _clamp(t.sandbox_ms), _clamp(t.exec_ms), len(result.payload)),
                     result.payload))


def encode_admin(immediate: bool) -> bytes:
    return header(ADMIN) + U8.pack(1 if immediate else 0)


def encode_admin_reply(aborted: int, completed: int) -> bytes:
    return header(ADMIN) + ADMIN_REPLY.pack(aborted, completed)


def encode_memop(op: int, block_id: int = 0, offset: int = 0, length: int = 0,
                 data: bytes = b"") -> bytes:
    if op == MEM_PUT:
        length = len(data)
    return header(MEMOP) + MEMOP_HEAD.pack(op, block_id, offset, length) + data


def encode_memop_reply(status: int, block_id: int, data: bytes = b"") -> bytes:
    return header(MEMOP) + MEMOP_REPLY_HEAD.pack(status, block_id, len(data)) + data


def encode_bind(lease_id: str, mode: int = BIND_DEFAULT) -> bytes:
    lid = lease_id.encode()
    return header(BIND) + U16.pack(len(lid)) + lid + U8.pack(mode)


def encode_bind_ack(ok: bool, reason: str = "") -> bytes:
    r = reason.encode()
    return header(BIND_ACK) + U8.pack(0 if ok else 1) + U16.pack(len(r)) + r


def encode_revoke(lease_id: str) -> bytes:
    lid = lease_id.encode()
    return header(REVOKE) + U16.pack(len(lid)) + lid


@dataclass(frozen=True)
class Request:
    invocation_id: int
    function_id: str
    payload: bytes


@dataclass(frozen=True)
class MemOp:
    op: int
    block_id: int
    offset: int
    length: int
    data: bytes


@dataclass(frozen=True)
class MemOpReply:
    status: int
    block_id: int
    data: bytes


@dataclass(frozen=True)
class Bind:
    lease_id: str
    mode: int


@dataclass(frozen=True)
class BindAck:
    ok: bool
    reason: str


@dataclass(frozen=True)
class Admin:
    immediate: bool


@dataclass(frozen=True)
class AdminReply:
    aborted: int
    completed: int


@dataclass(frozen=True)
class Revoke:
    lease_id: str


class FrameReader:
    """Incremental decoder: feed bytes, pull complete messages.

    ``role`` selects how the ambiguous message types (ADMIN, MEMOP) are read:
    a "server" sees requests, a "client" sees replies.
    """

    def __init__(self, role: str = "server", max_payload: int = MAX_PAYLOAD):
        if role not in ("server", "client"):
            raise ValueError(role)
        self.role = role
        self.max_payload = max_payload
        self.buf = bytearray()

    def feed(self, data: bytes) -> None:
        self.buf += data

    def _need(self, n: int) -> bool:
        return len(self.buf) >= n

    def next(self):
        """Return the next complete message or None if more bytes are needed."""
        if not self._need(HEADER.size):
            return None
        magic, version, msg_type = HEADER.unpack_from(self.buf, 0)
        if magic != MAGIC:
            raise ProtocolError(f"bad magic 0x{magic:08x}")
        if version != VERSION:
            raise ProtocolError(f"unsupported version {version}")
        pos = HEADER.size
        parser = _PARSERS.get((msg_type, self.role)) or _PARSERS.get((msg_type, None))
        if parser is None:
            raise ProtocolError(f"unexpected message type {msg_type}")
        parsed = parser(self, pos)
        if parsed is None:
            return None
        msg, end = parsed
        del self.buf[:end]
        return msg

    def _payload_len(self, n: int) -> int:
        if n > self.max_payload:
            raise ProtocolError(f"payload of {n} bytes exceeds {self.max_payload}")
        return n

    def _request(self, pos):
        if not self._need(pos + REQUEST_HEAD.size):
            return None
        inv_id, fid_len = REQUEST_HEAD.unpack_from(self.buf, pos)
        pos += REQUEST_HEAD.size
        if not self._need(pos + fid_len + 4):
            return None
        fid = bytes(self.buf[pos:pos + fid_len]).decode()
        pos += fid_len
        (plen,) = U32.unpack_from(self.buf, pos)
        if plen > self.max_payload:
            raise PayloadTooLarge(f"payload of {plen} bytes exceeds {self.max_payload}", inv_id)
        pos += 4
        if not self._need(pos + plen):
            return None
        return Request(inv_id, fid, bytes(self.buf[pos:pos + plen])), pos + plen

    def _response(self, pos):
        if not self._need(pos + RESPONSE_HEAD.size):
            return None
        inv_id, status, q, s, e, plen = RESPONSE_HEAD.unpack_from(self.buf, pos)
        plen = self._payload_len(plen)
        pos += RESPONSE_HEAD.size
        if not self._need(pos + plen):
            return None
        payload = bytes(self.buf[pos:pos + plen])
        try:
            status = InvocationStatus(status)
        except ValueError:
            raise ProtocolError(f"bad status {status}") from None
        return InvocationResult(inv_id, status, payload, Timings(q, s, e)), pos + plen

    def _admin(self, pos):
        if not self._need(pos + 1):
            return None
        (mode,) = U8.unpack_from(self.buf, pos)
        return Admin(bool(mode)), pos + 1

    def _admin_reply(self, pos):
        if not self._need(pos + ADMIN_REPLY.size):
            return None
        return AdminReply(*ADMIN_REPLY.unpack_from(self.buf, pos)), pos + ADMIN_REPLY.size

    def _memop(self, pos):
        if not self._need(pos + MEMOP_HEAD.size):
            return None
        op, block_id, offset, length = MEMOP_HEAD.unpack_from(self.buf, pos)
        pos += MEMOP_HEAD.size
        data_len = self._payload_len(length) if op == MEM_PUT else 0
        if not self._need(pos + data_len):
            return None
        return MemOp(op, block_id, offset, length, bytes(self.buf[pos:pos + data_len])), pos + data_len

    def _memop_reply(self, pos):
        if not self._need(pos + MEMOP_REPLY_HEAD.size):
            return None
        status, block_id, length = MEMOP_REPLY_HEAD.unpack_from(self.buf, pos)
        length = self._payload_len(length)
        pos += MEMOP_REPLY_HEAD.size
        if not self._need(pos + length):
            return None
        return MemOpReply(status, block_id, bytes(self.buf[pos:pos + length])), pos + length

    def _string16(self, pos):
        if not self._need(pos + 2):
            return None
        (n,) = U16.unpack_from(self.buf, pos)
        pos += 2
        if not self._need(pos + n):
            return None
        return bytes(self.buf[pos:pos + n]).decode(), pos + n

    def _bind(self, pos):
        parsed = self._string16(pos)
        if parsed is None:
            return None
        lease_id, pos = parsed
        if not self._need(pos + 1):
            return None
        (mode,) = U8.unpack_from(self.buf, pos)
        return Bind(lease_id, mode), pos + 1

    def _bind_ack(self, pos):
        if not self._need(pos + 1):
            return None
        (status,) = U8.unpack_from(self.buf, pos)
        parsed = self._string16(pos + 1)
        if parsed is None:
            return None
        reason, pos = parsed
        return BindAck(status == 0, reason), pos

    def _revoke(self, pos):
        parsed = self._string16(pos)
        if parsed is None:
            return None
        return Revoke(parsed[0]), parsed[1]


_PARSERS = {
    (REQUEST, None): FrameReader._request,
    (RESPONSE, None): FrameReader._response,
    (ADMIN, "server"): FrameReader._admin,
    (ADMIN, "client"): FrameReader._admin_reply,
    (MEMOP, "server"): FrameReader._memop,
    (MEMOP, "client"): FrameReader._memop_reply,
    (BIND, None): FrameReader._bind,
    (BIND_ACK, None): FrameReader._bind_ack,
    (REVOKE, None): FrameReader._revoke,
}


def recv_message(sock: socket.socket, reader: FrameReader, timeout: float = None):
    """Blocking read of one message from ``sock``."""
    msg = reader.next()
    if msg is not None:
        return msg
    sock.settimeout(timeout)
    while True:
        chunk = sock.recv(65536)
        if not chunk:
            raise ConnectionClosed("peer closed the connection")
        reader.feed(chunk)
        msg = reader.next()
        if msg is not None:
            return msg


def parse_endpoint(endpoint: str):
    host, _, port = endpoint.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad endpoint {endpoint!r}")
    return host.strip("[]"), int(port)


def request_once(endpoint: str, data: bytes, timeout: float = 30.0):
    """Open a connection, send one frame, read one client-side reply."""
    host, port = parse_endpoint(endpoint)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        sock.sendall(data)
        return recv_message(sock, FrameReader("client"), timeout)
