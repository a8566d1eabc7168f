"""Node-state traces sampled at a fixed interval, and idle-period estimation.

A trace CSV has the header ``t_s,node_id,state,free_cores,free_memory_mb``
with ``state`` one of idle, busy, down.  Sampling only tells us the state at
the sample instants, so an idle period is known up to one interval at each
end: a run of k idle samples at t, t+Δ, ..., t+(k-1)Δ started somewhere in
[t-Δ, t] and ended somewhere in [t+(k-1)Δ, t+kΔ].  We estimate its length
as kΔ, the midpoint of the feasible range [(k-1)Δ, (k+1)Δ].
"""

from __future__ import annotations

import csv
import enum
import logging
import math
import random
import statistics
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..core import ValidationError

log = logging.getLogger(__name__)

TRACE_HEADER = ["t_s", "node_id", "state", "free_cores", "free_memory_mb"]
DEFAULT_INTERVAL_S = 120.0

# Idle windows are lognormal: median 345 s (5.75 min) and sigma chosen so
# that about three quarters of windows are shorter than ten minutes.
DEFAULT_IDLE_MEDIAN_S = 345.0
DEFAULT_IDLE_SIGMA = 0.82
DEFAULT_BUSY_MEDIAN_S = 3600.0
DEFAULT_BUSY_SIGMA = 1.0


class TraceParseError(ValidationError):
    code = "trace-parse"

    def __init__(self, reason: str, line: Optional[int] = None):
        super().__init__(f"line {line}: {reason}" if line is not None else reason)
        self.line = line


class NodeStatus(str, enum.Enum):
    IDLE = "idle"
    BUSY = "busy"
    DOWN = "down"


@dataclass(frozen=True)
class TraceSample:
    t_s: float
    node_id: str
    state: NodeStatus
    free_cores: int
    free_memory_mb: int


@dataclass(frozen=True)
class IdlePeriod:
    node_id: str
    start_lb: float
    start_ub: float
    end_lb: float
    end_ub: float
    duration_estimate_s: float

    @property
    def duration_bounds(self):
        return (self.end_lb - self.start_ub, self.end_ub - self.start_lb)


@dataclass(frozen=True)
class IdleWindow:
    """Ground truth from the generator: the node is idle on [start_s, end_s)."""
    node_id: str
    start_s: float
    end_s: float

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def load_trace(path, interval_s: Optional[float] = None) -> dict:
    """Read a trace CSV into ``{node_id: [TraceSample, ...]}`` (time-ordered per node).

    Timestamps must strictly increase per node.  Gaps or jitter against the
    sampling interval (``interval_s``, or the most common step) are logged as
    warnings.
    """
    streams: dict = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TraceParseError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRACE_HEADER:
            raise TraceParseError(f"expected header {','.join(TRACE_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(TRACE_HEADER):
                raise TraceParseError(f"expected {len(TRACE_HEADER)} fields, got {len(row)}", lineno)
            try:
                t = float(row[0])
                state = NodeStatus(row[2].strip())
                free_cores = int(row[3])
                free_mem = int(row[4])
            except ValueError as exc:
                raise TraceParseError(str(exc), lineno) from None
            node_id = row[1].strip()
            if not node_id:
                raise TraceParseError("empty node_id", lineno)
            if not math.isfinite(t) or free_cores < 0 or free_mem < 0:
                raise TraceParseError("time must be finite and free resources non-negative", lineno)
            stream = streams.setdefault(node_id, [])
            if stream and t <= stream[-1].t_s:
                raise TraceParseError(
                    f"timestamp {row[0]} for {node_id} not after {_fmt(stream[-1].t_s)}", lineno)
            stream.append(TraceSample(t, node_id, state, free_cores, free_mem))
    _check_intervals(streams, interval_s)
    return streams


def infer_interval(streams: dict) -> Optional[float]:
    steps = Counter()
    for stream in streams.values():
        for a, b in zip(stream, stream[1:]):
            steps[b.t_s - a.t_s] += 1
    if not steps:
        return None
    return min(steps.items(), key=lambda kv: (-kv[1], kv[0]))[0]


def _check_intervals(streams: dict, interval_s: Optional[float]) -> None:
    step = interval_s or infer_interval(streams)
    if step is None:
        return
    for node_id, stream in streams.items():
        for a, b in zip(stream, stream[1:]):
            if not math.isclose(b.t_s - a.t_s, step, rel_tol=1e-9, abs_tol=1e-6):
                log.warning("node %s: sampling gap of %s s at t=%s (interval %s s)",
                            node_id, _fmt(b.t_s - a.t_s), _fmt(a.t_s), _fmt(step))


def write_trace(streams: dict, path) -> None:
    rows = sorted((s for stream in streams.values() for s in stream),
                  key=lambda s: (s.t_s, s.node_id))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for s in rows:
            w.writerow([_fmt(s.t_s), s.node_id, s.state.value, s.free_cores, s.free_memory_mb])


def estimate_idle_periods(stream, interval_s: Optional[float] = None) -> list:
    """Turn maximal runs of consecutive idle samples into IdlePeriods.

    A missing sample (a step larger than the interval) ends a run.
    """
    stream = list(stream)
    if not stream:
        return []
    step = interval_s or infer_interval({"_": stream}) or DEFAULT_INTERVAL_S
    periods = []
    run_start = None
    k = 0
    prev_t = None

    def close():
        t0 = run_start
        periods.append(IdlePeriod(stream[0].node_id, t0 - step, t0,
                                  t0 + (k - 1) * step, t0 + k * step, k * step))

    for s in stream:
        contiguous = prev_t is not None and math.isclose(s.t_s - prev_t, step,
                                                         rel_tol=1e-9, abs_tol=1e-6)
        if s.state is NodeStatus.IDLE:
            if run_start is not None and contiguous:
                k += 1
            else:
                if run_start is not None:
                    close()
                run_start, k = s.t_s, 1
        elif run_start is not None:
            close()
            run_start, k = None, 0
        prev_t = s.t_s
    if run_start is not None:
        close()
    return periods


def gen_trace(nodes: int, hours: float, seed: int = 0, interval_s: float = DEFAULT_INTERVAL_S,
              cores: int = 36, memory_mb: int = 128 * 1024,
              idle_median_s: float = DEFAULT_IDLE_MEDIAN_S, idle_sigma: float = DEFAULT_IDLE_SIGMA,
              busy_median_s: float = DEFAULT_BUSY_MEDIAN_S, busy_sigma: float = DEFAULT_BUSY_SIGMA):
    """Synthetic trace from continuous-time busy/idle alternation.

    Returns ``(streams, windows)``: the sampled streams and the true idle
    windows they were sampled from, clipped to the observed span [0, nΔ).
    A sample at time t reads idle when t falls in some window [start, end).
    """
    if nodes < 1 or hours <= 0 or interval_s <= 0:
        raise ValidationError("nodes, hours and interval must be positive")
    rng = random.Random(seed)
    horizon = hours * 3600.0
    n_samples = int(math.floor(horizon / interval_s + 1e-9))
    width = len(str(nodes - 1))
    streams, windows = {}, []
    for i in range(nodes):
        node_id = f"nid{i:0{width}d}"
        node_rng = random.Random(rng.getrandbits(64))
        # Start at a random point of a busy or idle phase so nodes are not in lockstep.
        idle = node_rng.random() < 0.5
        t = -node_rng.uniform(0, interval_s * 4)
        node_windows = []
        while t < horizon:
            if idle:
                length = node_rng.lognormvariate(math.log(idle_median_s), idle_sigma)
                node_windows.append(IdleWindow(node_id, t, t + length))
            else:
                length = node_rng.lognormvariate(math.log(busy_median_s), busy_sigma)
            t += length
            idle = not idle
        stream = []
        w = 0
        for k in range(n_samples):
            ts = k * interval_s
            while w < len(node_windows) and node_windows[w].end_s <= ts:
                w += 1
            in_idle = w < len(node_windows) and node_windows[w].start_s <= ts
            if in_idle:
                stream.append(TraceSample(float(ts), node_id, NodeStatus.IDLE, cores, memory_mb))
            else:
                free_mem = node_rng.randrange(0, memory_mb // 2 + 1, 1024)
                stream.append(TraceSample(float(ts), node_id, NodeStatus.BUSY, 0, free_mem))
        streams[node_id] = stream
        span = n_samples * interval_s
        windows.extend(IdleWindow(node_id, max(0.0, w.start_s), min(span, w.end_s))
                       for w in node_windows if w.end_s > 0 and w.start_s < span)
    return streams, windows


def match_windows(periods, windows) -> list:
    """Pair each estimated period with the true window containing its samples."""
    by_node: dict = {}
    for w in windows:
        by_node.setdefault(w.node_id, []).append(w)
    pairs = []
    for p in periods:
        for w in by_node.get(p.node_id, ()):
            if w.start_s <= p.start_ub and p.end_lb < w.end_s:
                pairs.append((p, w))
                break
    return pairs


def median_abs_error(pairs) -> float:
    return statistics.median(abs(p.duration_estimate_s - w.duration_s) for p, w in pairs)
