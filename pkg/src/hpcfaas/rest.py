"""HTTP/JSON front end of the resource manager, and the matching client.

Routes::

    POST   /v1/nodes                    register a node          201 {node_id}
    GET    /v1/nodes                    list nodes               200 [NodeRecord...]
    DELETE /v1/nodes/{id}?immediate=…   drain and remove         200 {aborted, completed}
    PUT    /v1/nodes/{id}/warm_images   executor warm-pool sync  200 {}
    POST   /v1/leases                   acquire                  201 {lease_id, node_id, endpoint}
    GET    /v1/leases/{id}              lookup (410 once over)   200 Lease
    POST   /v1/leases/{id}/touch        keep-alive               200 {}
    DELETE /v1/leases/{id}              release and bill         200 {core_ms, memory_mb_ms, gpu_ms}

Errors carry ``{"code": ..., "reason": ...}``.
"""

from __future__ import annotations

import json
import logging
import threading
import urllib.error
import urllib.parse
import urllib.request
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from . import manager as m
from . import protocol
from .core import FaasError, FunctionSpec, Lease, LeaseState, ResourceVector, ValidationError

log = logging.getLogger(__name__)

_STATUS = {
    "duplicate-node": HTTPStatus.CONFLICT,
    "malformed-descriptor": HTTPStatus.BAD_REQUEST,
    "invalid": HTTPStatus.BAD_REQUEST,
    "unknown-node": HTTPStatus.NOT_FOUND,
    "unknown-lease": HTTPStatus.NOT_FOUND,
    "node-state": HTTPStatus.CONFLICT,
    "no-capacity": HTTPStatus.CONFLICT,
    "policy-denied": HTTPStatus.CONFLICT,
    "double-release": HTTPStatus.CONFLICT,
    "terminated": HTTPStatus.GONE,
}

_ERRORS = {
    "duplicate-node": m.DuplicateNodeError,
    "malformed-descriptor": m.MalformedDescriptorError,
    "invalid": ValidationError,
    "unknown-node": m.UnknownNodeError,
    "unknown-lease": m.UnknownLeaseError,
    "node-state": m.NodeStateError,
    "no-capacity": m.NoCapacityError,
    "policy-denied": m.PolicyDeniedError,
    "double-release": m.DoubleReleaseError,
}


class LeaseGoneError(m.UnknownLeaseError):
    code = "terminated"


_ERRORS["terminated"] = LeaseGoneError


class RMUnavailable(FaasError):
    code = "rm-unavailable"


def executor_drainer(node: m.NodeRecord, immediate: bool) -> m.DrainReport:
    """Ask the node's executor to drain over the admin channel."""
    try:
        reply = protocol.request_once(node.endpoint, protocol.encode_admin(immediate), timeout=None)
    except (ConnectionRefusedError, protocol.ConnectionClosed):
        # Executor already gone (e.g. it drained itself and is now deregistering).
        return m.DrainReport()
    if not isinstance(reply, protocol.AdminReply):
        raise protocol.ProtocolError(f"unexpected admin reply {reply!r}")
    return m.DrainReport(reply.aborted, reply.completed)


def executor_revoker(node: m.NodeRecord, lease_id: str) -> None:
    def send():
        try:
            protocol.request_once(node.endpoint, protocol.encode_revoke(lease_id), timeout=10)
        except OSError as exc:
            log.debug("revoke of %s on %s failed: %s", lease_id, node.node_id, exc)
        except FaasError:
            pass
    threading.Thread(target=send, daemon=True, name=f"revoke-{lease_id}").start()


class _Handler(BaseHTTPRequestHandler):
    server_version = "hpcfaas-rm/0.1"
    rm: m.ResourceManager = None

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status, body=None):
        data = b"" if body is None else json.dumps(body).encode()
        self.send_response(int(status))
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, exc: FaasError):
        status = _STATUS.get(exc.code, HTTPStatus.BAD_REQUEST if isinstance(exc, ValidationError)
                             else HTTPStatus.INTERNAL_SERVER_ERROR)
        code = exc.code if exc.code in _STATUS else ("invalid" if isinstance(exc, ValidationError)
                                                     else exc.code)
        self._send(status, {"code": code, "reason": exc.reason})

    def _json(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"bad JSON: {exc}") from None

    def _route(self, method):
        url = urllib.parse.urlsplit(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = urllib.parse.parse_qs(url.query)
        if parts[:1] != ["v1"] or len(parts) < 2:
            return self._send(HTTPStatus.NOT_FOUND, {"code": "not-found", "reason": url.path})
        try:
            handler = getattr(self, f"_{method}_{parts[1]}", None)
            if handler is None:
                return self._send(HTTPStatus.NOT_FOUND, {"code": "not-found", "reason": url.path})
            return handler(parts[2:], query)
        except FaasError as exc:
            return self._error(exc)
        except Exception as exc:  # keep the server alive, report the failure
            log.exception("request %s %s failed", method, self.path)
            return self._send(HTTPStatus.INTERNAL_SERVER_ERROR, {"code": "internal", "reason": str(exc)})

    def do_GET(self):
        self._route("get")

    def do_POST(self):
        self._route("post")

    def do_PUT(self):
        self._route("put")

    def do_DELETE(self):
        self._route("delete")

    # -- nodes

    def _post_nodes(self, rest, query):
        node_id = self.rm.register_node(self._json())
        self._send(HTTPStatus.CREATED, {"node_id": node_id})

    def _get_nodes(self, rest, query):
        if rest:
            return self._send(HTTPStatus.OK, self.rm.get_node(rest[0]).to_dict())
        self._send(HTTPStatus.OK, [n.to_dict() for n in self.rm.list_nodes()])

    def _put_nodes(self, rest, query):
        if len(rest) != 2 or rest[1] != "warm_images":
            raise ValidationError("expected /v1/nodes/{id}/warm_images")
        body = self._json()
        self.rm.set_warm_images(rest[0], body.get("images", []))
        self._send(HTTPStatus.OK, {})

    def _delete_nodes(self, rest, query):
        if len(rest) != 1:
            raise ValidationError("expected /v1/nodes/{id}")
        immediate = query.get("immediate", ["false"])[0].lower() in ("1", "true", "yes")
        deadline = query.get("deadline_s", [None])[0]
        report = self.rm.remove_node(rest[0], immediate,
                                     float(deadline) if deadline is not None else None)
        self._send(HTTPStatus.OK, report.to_dict())

    # -- leases

    def _post_leases(self, rest, query):
        if rest:
            if len(rest) == 2 and rest[1] == "touch":
                self.rm.touch_lease(rest[0])
                return self._send(HTTPStatus.OK, {})
            raise ValidationError("unknown lease action")
        body = self._json()
        if not isinstance(body.get("function"), dict):
            raise ValidationError("missing function spec")
        spec = FunctionSpec.from_dict(body["function"])
        lease = self.rm.acquire_lease(spec, str(body.get("client_id", "")))
        self._send(HTTPStatus.CREATED, {"lease_id": lease.lease_id, "node_id": lease.node_id,
                                        "endpoint": lease.endpoint, "lease": lease.to_dict()})

    def _get_leases(self, rest, query):
        if len(rest) != 1:
            return self._send(HTTPStatus.OK, [l.to_dict() for l in self.rm.leases()])
        lease = self.rm.lookup_lease(rest[0])
        if lease.state is LeaseState.TERMINATED:
            raise LeaseGoneError(f"lease {lease.lease_id} is terminated")
        self._send(HTTPStatus.OK, lease.to_dict())

    def _delete_leases(self, rest, query):
        if len(rest) != 1:
            raise ValidationError("expected /v1/leases/{id}")
        self._send(HTTPStatus.OK, self.rm.release_lease(rest[0]).to_dict())


class RMServer:
    """Runs a ResourceManager behind an HTTP server on a background thread."""

    def __init__(self, rm: Optional[m.ResourceManager] = None, listen: str = "127.0.0.1:0",
                 reap_interval_s: float = 5.0):
        self.rm = rm or m.ResourceManager(drainer=executor_drainer, revoker=executor_revoker)
        host, port = protocol.parse_endpoint(listen)
        handler = type("Handler", (_Handler,), {"rm": self.rm})
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.reap_interval_s = reap_interval_s
        self._stop = threading.Event()
        self._threads = []

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> RMServer:
        t = threading.Thread(target=self.httpd.serve_forever, name="rm-http", daemon=True)
        t.start()
        r = threading.Thread(target=self._reaper, name="rm-reaper", daemon=True)
        r.start()
        self._threads = [t, r]
        log.info("resource manager listening on %s", self.url)
        return self

    def _reaper(self):
        while not self._stop.wait(self.reap_interval_s):
            for lease_id in self.rm.reap_idle_leases():
                log.info("released idle lease %s", lease_id)

    def serve_forever(self):
        self.start()
        self._stop.wait()

    def stop(self):
        self._stop.set()
        self.httpd.shutdown()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class RMClient:
    """JSON client for the resource manager REST API."""

    def __init__(self, base_url: str, timeout: Optional[float] = 60.0):
        if "://" not in base_url:
            base_url = "http://" + base_url
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def _call(self, method: str, path: str, body=None, timeout=...):
        data = None if body is None else json.dumps(body).encode()
        req = urllib.request.Request(self.base_url + path, data=data, method=method,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout if timeout is ... else timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            try:
                err = json.loads(raw)
            except ValueError:
                err = {"code": "http", "reason": f"{exc.code} {raw[:200]!r}"}
            cls = _ERRORS.get(err.get("code"), FaasError)
            error = cls(err.get("reason", ""))
            if cls is FaasError:
                error.code = err.get("code", "error")
            raise error from None
        except (urllib.error.URLError, OSError) as exc:
            raise RMUnavailable(f"{self.base_url}: {exc}") from None
        return json.loads(raw) if raw else None

    def register_node(self, descriptor: dict) -> str:
        return self._call("POST", "/v1/nodes", descriptor)["node_id"]

    def remove_node(self, node_id: str, immediate: bool = False,
                    deadline_s: Optional[float] = None) -> m.DrainReport:
        q = {"immediate": "true" if immediate else "false"}
        if deadline_s is not None:
            q["deadline_s"] = str(deadline_s)
        body = self._call("DELETE", f"/v1/nodes/{node_id}?{urllib.parse.urlencode(q)}", timeout=None)
        return m.DrainReport(body["aborted"], body["completed"])

    def list_nodes(self) -> list:
        return self._call("GET", "/v1/nodes")

    def set_warm_images(self, node_id: str, images) -> None:
        self._call("PUT", f"/v1/nodes/{node_id}/warm_images", {"images": sorted(images)})

    def acquire_lease(self, spec: FunctionSpec, client_id: str = "") -> Lease:
        body = self._call("POST", "/v1/leases", {"function": spec.to_dict(), "client_id": client_id})
        return Lease.from_dict(body["lease"])

    def release_lease(self, lease_id: str) -> m.UsageLedgerEntry:
        body = self._call("DELETE", f"/v1/leases/{lease_id}")
        return m.UsageLedgerEntry(lease_id, body["core_ms"], body["memory_mb_ms"], body["gpu_ms"])

    def lookup_lease(self, lease_id: str) -> Lease:
        return Lease.from_dict(self._call("GET", f"/v1/leases/{lease_id}"))

    def touch_lease(self, lease_id: str) -> None:
        self._call("POST", f"/v1/leases/{lease_id}/touch", {})


def node_descriptor(node_id: str, total: ResourceVector, endpoint: Optional[str] = None,
                    reserved_serving_cores: int = 1, availability_hint_s=None,
                    sharing: str = "opt_in", job=None) -> dict:
    desc = {"node_id": node_id, "total": total.to_dict(),
            "reserved_serving_cores": reserved_serving_cores, "sharing": sharing}
    if endpoint:
        desc["endpoint"] = endpoint
    if availability_hint_s is not None:
        desc["availability_hint_s"] = availability_hint_s
    if job is not None:
        desc["job"] = job.to_dict()
    return desc
