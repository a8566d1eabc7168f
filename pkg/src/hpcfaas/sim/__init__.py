"""Trace analysis and discrete-event cluster simulation."""

from .report import CSV_COLUMNS, report, write_reports
from .simulator import (NAS_IDLE_NODE_TABLE, SCENARIOS, BatchJob, ClusterConfig, FunctionArrival,
                        SimConfig, SimMetrics, SimWorkload, generate_function_stream,
                        idle_node_throughput, run_simulation)
from .trace import (IdlePeriod, IdleWindow, NodeStatus, TraceSample, estimate_idle_periods,
                    gen_trace, load_trace, write_trace)

__all__ = [
    "CSV_COLUMNS", "report", "write_reports", "NAS_IDLE_NODE_TABLE", "SCENARIOS", "BatchJob",
    "ClusterConfig", "FunctionArrival", "SimConfig", "SimMetrics", "SimWorkload",
    "generate_function_stream", "idle_node_throughput", "run_simulation", "IdlePeriod",
    "IdleWindow", "NodeStatus", "TraceSample", "estimate_idle_periods", "gen_trace",
    "load_trace", "write_trace",
]
