from __future__ import annotations

import json
import urllib.error
import urllib.request

import pytest

from hpcfaas.core import FunctionSpec, LeaseState, ResourceVector, WorkloadSignature
from hpcfaas.manager import (DoubleReleaseError, DrainReport, DuplicateNodeError,
                             MalformedDescriptorError, NodeStateError, NoCapacityError,
                             PolicyDeniedError, ResourceManager, UnknownLeaseError,
                             UnknownNodeError, bill)
from hpcfaas.policy import JobDescriptor
from hpcfaas.rest import LeaseGoneError, RMClient, RMServer, node_descriptor


class Clock:
    def __init__(self):
        self.now = 0

    def __call__(self):
        return self.now


def fn(cores=1, mem=0, gpus=0, image="builtin/noop"):
    return FunctionSpec("f", image, ResourceVector(cores, mem, gpus), 1000)


def node(node_id="n1", cores=8, mem=4096, gpus=0, **kw):
    return node_descriptor(node_id, ResourceVector(cores, mem, gpus), **kw)


def test_register_rejects_duplicates_and_garbage():
    rm = ResourceManager()
    assert rm.register_node(node()) == "n1"
    with pytest.raises(DuplicateNodeError):
        rm.register_node(node())
    for bad in ({}, {"node_id": "x"}, {"node_id": "", "total": {"cores": 1}},
                {"node_id": "x", "total": {"cores": -1}}, {"node_id": "x", "total": {}},
                {"node_id": "x", "total": {"cores": 2}, "reserved_serving_cores": 3}):
        with pytest.raises(MalformedDescriptorError):
            rm.register_node(bad)


def test_serving_cores_are_held_back():
    rm = ResourceManager()
    rm.register_node(node(cores=4, reserved_serving_cores=1))
    rm.acquire_lease(fn(3))
    with pytest.raises(NoCapacityError):
        rm.acquire_lease(fn(1))


def test_release_bills_each_dimension():
    clock = Clock()
    rm = ResourceManager(clock=clock)
    rm.register_node(node(gpus=2))
    lease = rm.acquire_lease(fn(2, 1024, 1))
    clock.now = 1500
    usage = rm.release_lease(lease.lease_id)
    assert (usage.core_ms, usage.memory_mb_ms, usage.gpu_ms) == (3000, 1536000, 1500)
    assert rm.get_node("n1").leased == ResourceVector()
    with pytest.raises(DoubleReleaseError):
        rm.release_lease(lease.lease_id)
    with pytest.raises(UnknownLeaseError):
        rm.release_lease("nope")
    assert bill(ResourceVector(0, 0, 1), 10).gpu_ms == 10


def test_warm_nodes_preferred_then_longest_availability():
    rm = ResourceManager()
    rm.register_node(node("a", availability_hint_s=100))
    rm.register_node(node("b", availability_hint_s=5000))
    rm.register_node(node("c"))
    assert rm.acquire_lease(fn()).node_id == "b"
    rm.set_warm_images("c", ["builtin/echo"])
    assert rm.acquire_lease(fn(image="builtin/echo")).node_id == "c"


def test_exclusive_nodes_never_receive_leases():
    rm = ResourceManager()
    rm.register_node(node(sharing="exclusive"))
    with pytest.raises(NoCapacityError):
        rm.acquire_lease(fn())


def test_policy_denial_propagates_reason():
    rm = ResourceManager()
    hero = JobDescriptor("big", WorkloadSignature("app"), 512, shared_flag=True,
                         resources_per_node=ResourceVector(2, 0, 0))
    rm.register_node(node(job=hero))
    with pytest.raises(PolicyDeniedError, match="hero-job-exempt"):
        rm.acquire_lease(fn())


def test_attach_job_evicts_newest_leases_first():
    rm = ResourceManager()
    rm.register_node(node(cores=9))
    first = rm.acquire_lease(fn(4))
    second = rm.acquire_lease(fn(4))
    job = JobDescriptor("j", WorkloadSignature("app"), 1, shared_flag=True,
                        resources_per_node=ResourceVector(4, 0, 0))
    assert rm.attach_job("n1", job) == [second.lease_id]
    assert rm.lookup_lease(first.lease_id).state is LeaseState.ACTIVE
    private = JobDescriptor("p", WorkloadSignature("app"), 1)
    assert rm.attach_job("n1", private) == [first.lease_id]


def test_remove_node_terminates_leases_and_rejects_second_removal():
    calls = []

    def drainer(rec, immediate):
        calls.append((rec.node_id, immediate))
        with pytest.raises(NodeStateError):
            rm.remove_node("n1")
        return DrainReport(1, 2)

    rm = ResourceManager(drainer=drainer)
    rm.register_node(node(endpoint="127.0.0.1:9"))
    lease = rm.acquire_lease(fn())
    assert rm.remove_node("n1", immediate=True) == DrainReport(1, 2)
    assert calls == [("n1", True)]
    assert rm.lookup_lease(lease.lease_id).state is LeaseState.TERMINATED
    with pytest.raises(UnknownNodeError):
        rm.remove_node("n1")
    assert rm.list_nodes() == []
    rm.register_node(node())  # a removed id can register again


def test_idle_leases_are_reaped():
    clock = Clock()
    rm = ResourceManager(clock=clock, idle_lease_timeout_s=10)
    rm.register_node(node())
    a = rm.acquire_lease(fn())
    b = rm.acquire_lease(fn())
    clock.now = 8000
    rm.touch_lease(b.lease_id)
    clock.now = 12000
    assert rm.reap_idle_leases() == [a.lease_id]


# -- REST front end --------------------------------------------------------------

@pytest.fixture
def server():
    srv = RMServer(reap_interval_s=3600).start()
    yield srv
    srv.stop()


def raw(server, method, path, body=None):
    data = None if body is None else json.dumps(body).encode()
    req = urllib.request.Request(server.url + path, data=data, method=method)
    try:
        with urllib.request.urlopen(req) as resp:
            return resp.status, json.loads(resp.read() or b"null")
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_rest_round_trip(server):
    client = RMClient(server.url)
    assert client.register_node(node()) == "n1"
    lease = client.acquire_lease(fn(2), "me")
    assert (lease.node_id, lease.client_id, lease.state) == ("n1", "me", LeaseState.ACTIVE)
    assert client.list_nodes()[0]["leased"]["cores"] == 2
    client.touch_lease(lease.lease_id)
    assert client.lookup_lease(lease.lease_id).spec == fn(2)
    assert client.release_lease(lease.lease_id).core_ms >= 0
    with pytest.raises(LeaseGoneError):
        client.lookup_lease(lease.lease_id)
    with pytest.raises(DoubleReleaseError):
        client.release_lease(lease.lease_id)
    assert client.remove_node("n1") == DrainReport()


def test_rest_status_codes(server):
    assert raw(server, "POST", "/v1/nodes", node())[0] == 201
    assert raw(server, "POST", "/v1/nodes", node()) == (409, {"code": "duplicate-node",
                                                            "reason": "node n1 already registered"})
    assert raw(server, "POST", "/v1/nodes", {"total": {}})[0] == 400
    assert raw(server, "POST", "/v1/leases", {"function": fn(99).to_dict()})[1]["code"] == "no-capacity"
    assert raw(server, "POST", "/v1/leases", {})[0] == 400
    assert raw(server, "DELETE", "/v1/leases/zzz")[0] == 404
    assert raw(server, "DELETE", "/v1/nodes/zzz")[0] == 404
    assert raw(server, "GET", "/v2/whatever")[0] == 404
    status, body = raw(server, "POST", "/v1/leases", {"function": fn().to_dict()})
    assert status == 201 and body["node_id"] == "n1"
    raw(server, "DELETE", f"/v1/leases/{body['lease_id']}")
    assert raw(server, "GET", f"/v1/leases/{body['lease_id']}")[0] == 410


def test_rest_client_reports_unreachable_manager():
    from hpcfaas.rest import RMUnavailable
    with pytest.raises(RMUnavailable):
        RMClient("http://127.0.0.1:1", timeout=2).list_nodes()


def test_multicore_node_offers_all_but_serving_cores():
    rm = ResourceManager()
    rm.register_node(node("daint", 36, 128000, reserved_serving_cores=1))
    rm.acquire_lease(fn(35))
    with pytest.raises(NoCapacityError):
        rm.acquire_lease(fn(1))


def test_partial_node_billing_saves_a_quarter():
    clock = Clock()
    rm = ResourceManager(clock=clock)
    rm.register_node(node("gpu", 12, 65536, 1, reserved_serving_cores=0))
    lease = rm.acquire_lease(fn(9))
    clock.now = 3_600_000
    usage = rm.release_lease(lease.lease_id)
    whole_node = bill(ResourceVector(12, 0, 0), 3_600_000)
    assert 1 - usage.core_ms / whole_node.core_ms == pytest.approx(0.25)
