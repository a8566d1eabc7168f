from __future__ import annotations

import json
import logging

import pytest
from hypothesis import given, settings, strategies as st

from hpcfaas.core import ValidationError
from hpcfaas.sim import (CSV_COLUMNS, NAS_IDLE_NODE_TABLE, BatchJob, ClusterConfig, NodeStatus,
                         SimConfig, SimMetrics, SimWorkload, TraceSample, estimate_idle_periods,
                         gen_trace, generate_function_stream, idle_node_throughput, load_trace,
                         report, run_simulation, write_trace)
from hpcfaas.sim.report import ReportIOError, from_json, to_csv
from hpcfaas.sim.simulator import functions_per_second, trace_to_jobs
from hpcfaas.sim.trace import TraceParseError, infer_interval

HEADER = "t_s,node_id,state,free_cores,free_memory_mb\n"


def stream(states, step=120.0, node="n0"):
    code = {"i": NodeStatus.IDLE, "b": NodeStatus.BUSY, "d": NodeStatus.DOWN}
    return [TraceSample(k * step, node, code[c], 36 if c == "i" else 0, 0)
            for k, c in enumerate(states)]


# -- traces -------------------------------------------------------------------------

def test_trace_round_trip(tmp_path):
    streams, _ = gen_trace(3, 1, seed=4)
    path = tmp_path / "t.csv"
    write_trace(streams, path)
    assert load_trace(path) == streams
    assert path.read_text().startswith(HEADER + "0,nid0,")


@pytest.mark.parametrize("body,line", [
    ("0,n0,idle,1,1\n0,n0,idle,1,1\n", 3),
    ("0,n0,asleep,1,1\n", 2),
    ("0,n0,idle,1\n", 2),
    ("0,n0,idle,-1,0\n", 2),
    ("x,n0,idle,1,1\n", 2),
])
def test_trace_parse_errors_carry_line(tmp_path, body, line):
    path = tmp_path / "bad.csv"
    path.write_text(HEADER + body)
    with pytest.raises(TraceParseError) as info:
        load_trace(path)
    assert info.value.line == line


def test_trace_header_and_missing_file(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("time,node\n")
    with pytest.raises(TraceParseError):
        load_trace(path)
    with pytest.raises(TraceParseError):
        load_trace(tmp_path / "missing.csv")


def test_gaps_are_warned_about(tmp_path, caplog):
    path = tmp_path / "gap.csv"
    path.write_text(HEADER + "0,n0,idle,1,1\n120,n0,idle,1,1\n240,n0,idle,1,1\n600,n0,busy,0,0\n")
    with caplog.at_level(logging.WARNING):
        streams = load_trace(path)
    assert infer_interval(streams) == 120
    assert "gap" in caplog.text


def test_estimator_runs_and_bounds():
    periods = estimate_idle_periods(stream("biiib" + "i"), 120)
    assert [(p.start_ub, p.duration_estimate_s) for p in periods] == [(120, 360), (600, 120)]
    first = periods[0]
    assert (first.start_lb, first.end_lb, first.end_ub) == (0, 360, 480)
    assert first.duration_bounds == (240, 480)
    assert estimate_idle_periods([], 120) == []


def test_missing_sample_ends_a_run():
    samples = stream("iiii")
    del samples[2]
    assert [p.duration_estimate_s for p in estimate_idle_periods(samples, 120)] == [240, 120]


@given(st.text(alphabet="ibd", max_size=60))
def test_estimated_samples_cover_idle_samples(states):
    periods = estimate_idle_periods(stream(states), 120)
    assert sum(p.duration_estimate_s for p in periods) == 120 * states.count("i")
    for p in periods:
        lo, hi = p.duration_bounds
        assert lo <= p.duration_estimate_s <= hi


def test_generator_is_seeded():
    a, wa = gen_trace(5, 2, seed=1)
    b, wb = gen_trace(5, 2, seed=1)
    c, _ = gen_trace(5, 2, seed=2)
    assert a == b and wa == wb and a != c
    assert len(a["nid0"]) == 60
    with pytest.raises(ValidationError):
        gen_trace(0, 1)


# -- simulator ----------------------------------------------------------------------

def two_node_job(**kw):
    return BatchJob("app", 0.0, 3600.0, 2, 32, **kw)


def test_exclusive_utilization_and_billing():
    m = run_simulation(SimWorkload([two_node_job()], [], ClusterConfig(2, 36), None), "exclusive")
    assert m.core_utilization == pytest.approx(64 / 72)
    assert m.batch_core_hours_billed == pytest.approx(72)
    assert m.node_throughput_relative == pytest.approx(1.0)


def test_non_shared_jobs_keep_functions_out():
    fns = generate_function_stream(100, 1.0, exec_ms=1000, jitter=False)
    work = SimWorkload([two_node_job()], fns, ClusterConfig(2, 36), 3600.0)
    m = run_simulation(work, "colocated")
    assert (m.functions_completed, m.functions_rejected) == (0, 100)
    m_shared = run_simulation(SimWorkload([two_node_job(shared_flag=True)], fns,
                                          ClusterConfig(2, 36), 3600.0), "colocated")
    assert m_shared.functions_completed == 100


def test_functions_on_idle_nodes_and_queueing():
    fns = generate_function_stream(10, 100.0, cores=36, exec_ms=1000, jitter=False)
    work = SimWorkload([], fns, ClusterConfig(1, 36), 10.0)
    assert run_simulation(work, "colocated").functions_completed == 1
    queued = run_simulation(work, "colocated", SimConfig(queue_functions=True, queue_timeout_s=60))
    assert (queued.functions_completed, queued.functions_rejected) == (10, 0)


def test_batch_job_evicts_functions():
    fns = generate_function_stream(1, 1.0, cores=8, exec_ms=100_000)
    job = BatchJob("late", 10.0, 100.0, 1, 32)
    m = run_simulation(SimWorkload([job], fns, ClusterConfig(1, 36), 200.0), "colocated")
    assert m.functions_aborted == 1 and m.functions_completed == 0


def test_fifo_batch_queue_and_rejections():
    jobs = [BatchJob("a", 0, 100, 2, 10), BatchJob("b", 1, 100, 1, 10),
            BatchJob("too-big", 2, 10, 5, 10)]
    m = run_simulation(SimWorkload(jobs, [], ClusterConfig(2, 10), 300.0), "exclusive")
    assert m.jobs_rejected == 1
    # a runs 0-100 on both nodes, b waits and runs 100-200 on one node.
    assert m.core_utilization == pytest.approx((2 * 10 * 100 + 10 * 100) / (2 * 10 * 300))


def test_trace_driven_run_excludes_down_time():
    streams = {"n0": stream("bbdd"), "n1": stream("iiii", node="n1")}
    jobs = trace_to_jobs(streams, ClusterConfig(2, 36))
    assert [(j.duration_s, j.down) for j in jobs] == [(240, False), (240, True)]
    m = run_simulation(SimWorkload(cluster=ClusterConfig(2, 36)), "exclusive", trace=streams)
    assert m.core_utilization == pytest.approx(36 * 240 / (2 * 36 * 480 - 36 * 240))


job_strategy = st.builds(
    lambda a, d, n, c, s: BatchJob(f"j{a}-{d}", float(a), float(d), n, c, shared_flag=s),
    st.integers(0, 500), st.integers(1, 400), st.integers(1, 3), st.integers(0, 16), st.booleans())


@settings(max_examples=40, deadline=None)
@given(st.lists(job_strategy, max_size=8), st.integers(0, 60), st.integers(1, 8),
       st.integers(0, 2**16))
def test_conservation_and_ordering(jobs, n_fns, fn_cores, seed):
    fns = generate_function_stream(n_fns, 0.2, cores=fn_cores, exec_ms=20_000, seed=seed)
    work = SimWorkload(jobs, fns, ClusterConfig(3, 16, 65536), None)
    results = {s: run_simulation(work, s) for s in ("exclusive", "ideal_partial", "colocated")}
    ex, ip, co = (results[s] for s in ("exclusive", "ideal_partial", "colocated"))
    assert co.core_utilization >= ip.core_utilization - 1e-12
    assert ip.core_utilization == pytest.approx(ex.core_utilization)
    assert ip.batch_core_hours_billed <= ex.batch_core_hours_billed + 1e-9
    assert co.functions_completed + co.functions_rejected + co.functions_aborted == n_fns


def test_workload_parsing(tmp_path):
    doc = {"batch_jobs": [{"arrival_s": 0, "duration_s": 10, "nodes": 1, "cores_per_node": 4}],
           "function_generator": {"count": 3, "rate_per_s": 1.0}, "horizon_s": 20}
    path = tmp_path / "w.json"
    path.write_text(json.dumps(doc))
    work = SimWorkload.load(path, seed=3)
    assert len(work.function_stream) == 3 and work.horizon_s == 20.0
    assert SimWorkload.from_dict(work.to_dict()).batch_jobs == work.batch_jobs
    with pytest.raises(ValidationError):
        SimWorkload.from_dict({"batch_jobs": [{"arrival_s": 0}]})
    path.write_text("{nope")
    with pytest.raises(ValidationError):
        SimWorkload.load(path)
    with pytest.raises(ValidationError):
        run_simulation(SimWorkload(), "sideways")


# -- idle-node throughput ------------------------------------------------------------

def test_idle_node_throughput_anchors():
    assert idle_node_throughput(1) == 1.0
    assert idle_node_throughput(8) == 8.0
    assert idle_node_throughput(100, node_cores=36) == 36.0
    assert idle_node_throughput(2, efficiency="BT.W") == pytest.approx(1.95)
    assert idle_node_throughput(24, efficiency="BT.W") == pytest.approx(17.37)
    assert idle_node_throughput(10, efficiency=0.5) == 5.0
    assert idle_node_throughput(1, efficiency=0.5) == 1.0
    assert functions_per_second(4, 250.0) == pytest.approx(16.0)
    with pytest.raises(ValidationError):
        idle_node_throughput(0)
    with pytest.raises(ValidationError):
        idle_node_throughput(2, efficiency=1.5)


@given(st.sampled_from(sorted(NAS_IDLE_NODE_TABLE)), st.integers(1, 35))
def test_interpolated_efficiency_stays_between_table_points(row, n):
    table = NAS_IDLE_NODE_TABLE[row]
    eff = {k: v / k for k, v in table.items()}
    e = idle_node_throughput(n, efficiency=row) / n
    assert min(eff.values()) - 1e-12 <= e <= max(eff.values()) + 1e-12


# -- reports --------------------------------------------------------------------------

def test_report_formats(tmp_path):
    m = SimMetrics("colocated", 0.5, 0.25, 3, 1, 12.0, 1.0)
    csv_path = report(m, "csv", tmp_path / "m.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "colocated,0.5,0.25,3,1,12.0"
    json_path = report([m], "json", tmp_path / "m.json")
    assert from_json(json_path.read_text()) == [m]
    assert to_csv([]) == ",".join(CSV_COLUMNS) + "\n"
    with pytest.raises(ValueError):
        report(m, "xml", tmp_path / "m.xml")
    (tmp_path / "file").write_text("")
    with pytest.raises(ReportIOError):
        report(m, "csv", tmp_path / "file" / "sub" / "m.csv")


def test_metrics_validation():
    with pytest.raises(ValidationError):
        SimMetrics("x", 1.5, 0, 0, 0, 0, 0)


def test_saturating_four_core_stream_fills_the_nodes():
    fns = generate_function_stream(2 * 3600, 2.0, cores=4, exec_ms=1000, jitter=False)
    work = SimWorkload([two_node_job(shared_flag=True)], fns, ClusterConfig(2, 36), 3600.0)
    ex = run_simulation(work, "exclusive")
    co = run_simulation(work, "colocated")
    assert co.core_utilization == pytest.approx(1.0, abs=1e-3)
    assert co.core_utilization - ex.core_utilization == pytest.approx(8 / 72, abs=1e-3)
    assert co.node_throughput_relative == pytest.approx(72 / 64, abs=1e-3)


def test_generated_idle_windows_are_mostly_short():
    _, windows = gen_trace(200, 48, seed=5)
    durations = sorted(w.duration_s for w in windows)
    share_short = sum(d < 600 for d in durations) / len(durations)
    assert 0.70 <= share_short <= 0.80
