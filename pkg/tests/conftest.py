from __future__ import annotations

import os
import socket

import pytest

from hpcfaas import protocol as p
from hpcfaas.core import FunctionSpec, ResourceVector
from hpcfaas.executor import Executor, ExecutorConfig
from hpcfaas.rest import RMClient, RMServer


def spec(image="builtin/noop", cores=1, memory_mb=64, max_duration_ms=10_000, fid=None):
    return FunctionSpec(fid or image.split("/")[-1], image, ResourceVector(cores, memory_mb, 0),
                        max_duration_ms)


class Cluster:
    """A resource manager on loopback plus any number of executors."""

    def __init__(self):
        self.server = RMServer(reap_interval_s=3600).start()
        self.url = self.server.url
        self.rm = RMClient(self.url)
        self.executors = []

    def add_executor(self, node_id, cores=4, memory_mb=4096, **kw) -> Executor:
        cfg = ExecutorConfig(node_id=node_id, resources=ResourceVector(cores, memory_mb, 0), **kw)
        ex = Executor(cfg, rm=RMClient(self.url)).start()
        self.executors.append(ex)
        return ex

    def close(self):
        for ex in self.executors:
            ex.stop()
        self.server.stop()


@pytest.fixture
def cluster():
    c = Cluster()
    yield c
    c.close()


class RawChannel:
    """Speaks the wire protocol directly, with no retry logic in the way."""

    def __init__(self, lease, mode=p.BIND_DEFAULT, timeout=10.0):
        self.sock = socket.create_connection(p.parse_endpoint(lease.endpoint), timeout)
        self.reader = p.FrameReader("client")
        self.timeout = timeout
        self.function_id = lease.function_id
        self.sock.sendall(p.encode_bind(lease.lease_id, mode))
        ack = self.recv()
        assert isinstance(ack, p.BindAck) and ack.ok, ack

    def send(self, invocation_id, payload=b"", function_id=None):
        self.sock.sendall(p.encode_request(invocation_id, function_id or self.function_id, payload))

    def recv(self, timeout=None):
        return p.recv_message(self.sock, self.reader, timeout or self.timeout)

    def close(self):
        self.sock.close()


def sandbox_children() -> list:
    """PIDs of live sandbox processes parented by this test process."""
    me = os.getpid()
    pids = []
    for entry in os.listdir("/proc"):
        if not entry.isdigit():
            continue
        try:
            with open(f"/proc/{entry}/stat") as fh:
                stat = fh.read()
            with open(f"/proc/{entry}/cmdline", "rb") as fh:
                cmdline = fh.read()
        except OSError:
            continue
        fields = stat.rsplit(")", 1)[1].split()
        state, ppid = fields[0], int(fields[1])
        if ppid == me and state != "Z" and b"HPCFAAS_SANDBOX_PATH" in cmdline:
            pids.append(int(entry))
    return pids


# -- one PASS/FAIL line per acceptance criterion in the terminal summary ----------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, label): acceptance criterion")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, label = marker.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        item.config._criteria[number] = (label, status)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        label, status = criteria[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {label}")
