"""Discrete-event simulation and capacity measurement for inference servers.

Each model runs a FIFO queue served by its allocated workers. Between manager
ticks the allocation is fixed, which makes the per-model queues independent:
bandwidth contention couples models through the service-time scale, but that
scale only changes when the allocation changes. A manager (resource
controller) may return a new allocation at tick boundaries; in-flight queries
finish under the allocation they started with, and queued queries re-dispatch
under the new one.

The measurement side lives here too: nearest-rank percentiles, max sustainable
load found by ramp plus bisection over common random numbers, and effective
machine utilization (EMU) of a co-location relative to isolated capacity.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from heapq import heappop, heappush, heapreplace
from typing import Mapping, Protocol, Sequence

import numpy as np

from .errors import CapacityError, ConfigError, EmptySampleError, UndefinedEmuError
from .perfmodel import (
    AllocationState,
    NodeConfig,
    bandwidth_demand,
    check_memory_capacity,
    effective_ways,
    service_scale,
)
from .workload import LoadSchedule, ModelZoo, generate_arrivals

ARRIVAL_STREAM = 0
BATCH_STREAM = 1

CSV_COLUMNS = (
    "time",
    "model",
    "p95_ms",
    "qps",
    "violation_frac",
    "cores",
    "ways",
    "bw_util",
)


def model_stream_key(model_id: str) -> int:
    """Stable 64-bit key so per-model RNG streams survive dict reordering."""
    digest = hashlib.blake2s(model_id.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def model_rng(
    seed: int, model_id: str, stream: int, replicate: int = 0
) -> np.random.Generator:
    key = model_stream_key(model_id)
    if replicate:
        seq = np.random.SeedSequence((seed, key, stream, replicate))
    else:
        seq = np.random.SeedSequence((seed, key, stream))
    return np.random.default_rng(seq)


def percentile(sample: Sequence[float] | np.ndarray, p: float):
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = len(sample)
    if n == 0:
        raise EmptySampleError("percentile of an empty sample")
    if not 0.0 < p <= 100.0:
        raise ValueError(f"p must be in (0, 100], got {p}")
    k = max(1, math.ceil(p / 100.0 * n))
    if isinstance(sample, np.ndarray):
        return float(np.partition(sample, k - 1)[k - 1])
    return sorted(sample)[k - 1]


@dataclass(frozen=True)
class WindowRow:
    """Per-model metrics over one reporting window (time = window start)."""

    time: float
    model: str
    p95_ms: float
    qps: float
    violation_frac: float
    cores: int
    ways: int
    bw_util: float


def format_row(row: WindowRow) -> str:
    return (
        f"{row.time:.3f},{row.model},{row.p95_ms:.6f},{row.qps:.6f},"
        f"{row.violation_frac:.6f},{row.cores},{row.ways},{row.bw_util:.6f}"
    )


def rows_to_csv(rows: Sequence[WindowRow]) -> str:
    lines = [",".join(CSV_COLUMNS)]
    lines.extend(format_row(r) for r in rows)
    return "\n".join(lines) + "\n"


def rows_digest(rows: Sequence[WindowRow]) -> str:
    h = hashlib.sha256()
    for r in rows:
        h.update((format_row(r) + "\n").encode())
    return h.hexdigest()


@dataclass(frozen=True)
class TickStats:
    """What a manager sees for one model at a monitor tick."""

    p95_s: float
    qps: float
    arrival_rate: float
    violation_frac: float
    queue_len: int
    in_flight: int
    workers: int
    ways: int
    util: float = 0.0


@dataclass
class TickRecord:
    time: float
    stats: dict[str, TickStats]
    changed: bool


class Manager(Protocol):
    """Resource controller hook called once per monitor period."""

    def monitor_tick(
        self,
        now: float,
        stats: Mapping[str, TickStats],
        alloc: AllocationState,
    ) -> AllocationState | None:
        """Return a replacement allocation, or None to keep the current one."""
        ...


@dataclass
class SimResult:
    rows: list[WindowRow]
    digest: str
    horizon: float
    window: float
    arrivals: dict[str, int]
    completions: dict[str, int]
    queued_end: dict[str, int]
    inflight_end: dict[str, int]
    final_alloc: AllocationState
    ticks: list[TickRecord] = field(default_factory=list)
    reallocations: int = 0


class _QueueState:
    __slots__ = (
        "arr",
        "batches",
        "n",
        "i",
        "prev_i",
        "queue",
        "busy",
        "workers",
        "scale",
        "ways",
        "comp",
        "lat",
        "start",
        "busy_s",
        "win",
        "tick_lats",
        "sla_s",
    )

    def __init__(self, arr: np.ndarray, batches: np.ndarray, sla_s: float) -> None:
        self.arr = arr.tolist()
        self.batches = batches.tolist()
        self.n = len(self.arr)
        self.i = 0
        self.prev_i = 0
        self.queue: deque[tuple[float, int]] = deque()
        self.busy: list[tuple[float, int]] = []
        self.workers = 0
        self.scale = math.inf
        self.ways = 0
        self.comp = np.full(self.n, np.nan)
        self.lat = np.full(self.n, np.nan)
        self.start = np.full(self.n, np.nan)
        self.busy_s: np.ndarray | None = None
        self.win = 1.0
        self.tick_lats: list[float] = []
        self.sla_s = sla_s


def _accrue_busy(st: _QueueState, start: float, fin: float) -> None:
    # Spread one service interval over the windows it overlaps, clipped to
    # the horizon so utilization never counts time past the last window.
    bs = st.busy_s
    if bs is None:
        return
    w = st.win
    end = min(fin, len(bs) * w)
    k = int(start / w)
    while start < end:
        edge = (k + 1) * w
        if end > edge:
            bs[k] += edge - start
            start = edge
            k += 1
        else:
            bs[k] += end - start
            break


def _dispatch(st: _QueueState, idx: int, arrival_t: float, now: float) -> None:
    fin = now + st.batches[idx] * st.scale
    st.lat[idx] = fin - arrival_t
    st.comp[idx] = fin
    st.start[idx] = now
    _accrue_busy(st, now, fin)
    heappush(st.busy, (fin, idx))


def _drain_queue(st: _QueueState, now: float) -> None:
    while st.queue and len(st.busy) < st.workers:
        arrival_t, idx = st.queue.popleft()
        _dispatch(st, idx, arrival_t, now)


def _advance(st: _QueueState, seg_end: float) -> None:
    # Process every event strictly before seg_end. Completions win ties so a
    # freed worker can take a query arriving at the same instant.
    arr = st.arr
    n = st.n
    queue = st.queue
    busy = st.busy
    i = st.i
    inf = math.inf
    while True:
        t_fin = busy[0][0] if busy else inf
        t_arr = arr[i] if i < n else inf
        if t_fin <= t_arr:
            if t_fin >= seg_end:
                break
            fin, idx = heappop(busy)
            st.tick_lats.append(float(st.lat[idx]))
            if queue and len(busy) < st.workers:
                arrival_t, qidx = queue.popleft()
                _dispatch(st, qidx, arrival_t, fin)
        else:
            if t_arr >= seg_end:
                break
            if queue or len(busy) >= st.workers:
                queue.append((t_arr, i))
            else:
                _dispatch(st, i, t_arr, t_arr)
            i += 1
    st.i = i


def _copy_alloc(alloc: AllocationState) -> AllocationState:
    return AllocationState(
        workers=dict(alloc.workers),
        ways=dict(alloc.ways),
        partitioning_enabled=alloc.partitioning_enabled,
    )


def _apply_alloc(
    states: Mapping[str, _QueueState],
    alloc: AllocationState,
    zoo: ModelZoo,
    node: NodeConfig,
) -> tuple[dict[str, int], float]:
    ways_map = effective_ways(alloc, node)
    total_bw = sum(
        bandwidth_demand(zoo[m], alloc.workers[m], ways_map[m]) for m in ways_map
    )
    for m, st in states.items():
        w = alloc.workers.get(m, 0)
        st.workers = w
        st.ways = ways_map.get(m, 0)
        st.scale = service_scale(m, alloc, zoo, node) if w >= 1 else math.inf
    return ways_map, min(1.0, total_bw / node.mem_bandwidth)


def _check_alloc(alloc: AllocationState, zoo: ModelZoo, node: NodeConfig) -> None:
    alloc.validate(node)
    for m in alloc.workers:
        if m not in zoo:
            raise ConfigError(f"allocation references unknown model {m!r}")
    if not check_memory_capacity(alloc.workers, zoo, node):
        raise CapacityError("allocation exceeds node memory capacity")


def run_sim(
    schedule: LoadSchedule,
    alloc: AllocationState,
    zoo: ModelZoo,
    node: NodeConfig,
    horizon: float,
    seed: int,
    manager: Manager | None = None,
    window: float = 1.0,
    monitor_period: float = 5.0,
    on_complete=None,
) -> SimResult:
    """Simulate the schedule under an allocation, optionally with a manager.

    horizon must be a whole number of windows and monitor_period a whole
    number of windows as well, so allocations are constant within windows.
    on_complete, if given, is called as (model_id, arrival_s, start_s,
    completion_s) for every query that finishes inside the horizon.
    """
    if horizon <= 0 or window <= 0:
        raise ConfigError("horizon and window must be positive")
    n_windows = round(horizon / window)
    if n_windows < 1 or abs(n_windows * window - horizon) > 1e-9:
        raise ConfigError("horizon must be a whole number of windows")
    ticks_per = round(monitor_period / window)
    if ticks_per < 1 or abs(ticks_per * window - monitor_period) > 1e-9:
        raise ConfigError("monitor_period must be a whole number of windows")

    alloc = _copy_alloc(alloc)
    _check_alloc(alloc, zoo, node)

    sched_models = schedule.models()
    for m in sched_models:
        if m not in zoo:
            raise ConfigError(f"schedule references unknown model {m!r}")
    traffic = {
        m
        for _, rates in schedule.phases
        for m, r in rates.items()
        if r > 0
    }
    for m in traffic:
        if alloc.workers.get(m, 0) < 1:
            raise ConfigError(f"{m}: model receives traffic but has no workers")

    model_ids = sorted(set(alloc.workers) | sched_models)
    states: dict[str, _QueueState] = {}
    for m in model_ids:
        arr = (
            generate_arrivals(schedule, m, horizon, model_rng(seed, m, ARRIVAL_STREAM))
            if m in sched_models
            else np.empty(0)
        )
        batches = zoo.batch.sample_array(model_rng(seed, m, BATCH_STREAM), len(arr))
        st = _QueueState(arr, batches, zoo[m].sla_ms / 1e3)
        st.busy_s = np.zeros(n_windows)
        st.win = window
        states[m] = st

    ways_map, bw_util = _apply_alloc(states, alloc, zoo, node)
    # History of (start_time, workers, ways, bw_util), used to label windows.
    history = [(0.0, dict(alloc.workers), dict(ways_map), bw_util)]
    ticks: list[TickRecord] = []
    reallocations = 0

    tick_times = (
        [k * monitor_period for k in range(1, math.ceil(horizon / monitor_period))]
        if manager is not None
        else []
    )
    boundaries = tick_times + [horizon]
    for boundary in boundaries:
        for m in model_ids:
            _advance(states[m], boundary)
        if boundary >= horizon:
            break
        stats: dict[str, TickStats] = {}
        for m in model_ids:
            st = states[m]
            lats = st.tick_lats
            if lats:
                p95 = percentile(lats, 95.0)
                viol = sum(1 for v in lats if v > st.sla_s) / len(lats)
            else:
                p95 = math.inf if (st.queue or st.busy) else 0.0
                viol = 0.0
            k1 = round(boundary / window)
            k0 = round((boundary - monitor_period) / window)
            busy = float(st.busy_s[k0:k1].sum()) if st.busy_s is not None else 0.0
            stats[m] = TickStats(
                p95_s=p95,
                qps=len(lats) / monitor_period,
                arrival_rate=(st.i - st.prev_i) / monitor_period,
                violation_frac=viol,
                queue_len=len(st.queue),
                in_flight=len(st.busy),
                workers=st.workers,
                ways=st.ways,
                util=(
                    min(1.0, busy / (st.workers * monitor_period))
                    if st.workers
                    else 0.0
                ),
            )
            st.tick_lats = []
            st.prev_i = st.i
        proposal = manager.monitor_tick(boundary, stats, _copy_alloc(alloc))
        changed = False
        if proposal is not None:
            changed = (
                proposal.workers != alloc.workers
                or proposal.ways != alloc.ways
                or proposal.partitioning_enabled != alloc.partitioning_enabled
            )
            if changed:
                _check_alloc(proposal, zoo, node)
                alloc = _copy_alloc(proposal)
                ways_map, bw_util = _apply_alloc(states, alloc, zoo, node)
                history.append((boundary, dict(alloc.workers), dict(ways_map), bw_util))
                reallocations += 1
        for m in model_ids:
            _drain_queue(states[m], boundary)
        ticks.append(TickRecord(time=boundary, stats=stats, changed=changed))

    arrivals: dict[str, int] = {}
    completions: dict[str, int] = {}
    queued_end: dict[str, int] = {}
    inflight_end: dict[str, int] = {}
    rows: list[WindowRow] = []
    per_window: dict[tuple[int, str], tuple[float, float, int]] = {}
    for m in model_ids:
        st = states[m]
        if st.i != st.n:
            raise RuntimeError(f"{m}: {st.n - st.i} arrivals were never processed")
        done = ~np.isnan(st.comp) & (st.comp < horizon)
        arrivals[m] = st.n
        completions[m] = int(done.sum())
        queued_end[m] = len(st.queue)
        inflight_end[m] = len(st.busy)
        if arrivals[m] != completions[m] + queued_end[m] + inflight_end[m]:
            raise RuntimeError(f"{m}: query conservation violated")
        if on_complete is not None:
            for idx in np.nonzero(done)[0]:
                on_complete(
                    m, st.arr[idx], float(st.start[idx]), float(st.comp[idx])
                )
        comp = st.comp[done]
        lats = st.lat[done]
        bins = np.minimum((comp / window).astype(int), n_windows - 1)
        order = np.argsort(bins, kind="stable")
        bins_sorted = bins[order]
        lats_sorted = lats[order]
        edges = np.searchsorted(bins_sorted, np.arange(n_windows + 1))
        for k in range(n_windows):
            lo, hi = edges[k], edges[k + 1]
            cnt = hi - lo
            if cnt:
                seg = lats_sorted[lo:hi]
                p95 = percentile(seg, 95.0) * 1e3
                viol = float((seg > st.sla_s).sum()) / cnt
            else:
                p95 = 0.0
                viol = 0.0
            per_window[(k, m)] = (p95, viol, int(cnt))

    hist_times = [h[0] for h in history]
    for k in range(n_windows):
        start = k * window
        hidx = 0
        for j, t in enumerate(hist_times):
            if t <= start + 1e-12:
                hidx = j
        _, h_workers, h_ways, h_bw = history[hidx]
        for m in model_ids:
            p95, viol, cnt = per_window[(k, m)]
            rows.append(
                WindowRow(
                    time=start,
                    model=m,
                    p95_ms=p95,
                    qps=cnt / window,
                    violation_frac=viol,
                    cores=h_workers.get(m, 0),
                    ways=h_ways.get(m, 0),
                    bw_util=h_bw,
                )
            )

    return SimResult(
        rows=rows,
        digest=rows_digest(rows),
        horizon=horizon,
        window=window,
        arrivals=arrivals,
        completions=completions,
        queued_end=queued_end,
        inflight_end=inflight_end,
        final_alloc=alloc,
        ticks=ticks,
        reallocations=reallocations,
    )


def _queue_latencies(arrivals: list, services: list, workers: int) -> list:
    """Response times of a FIFO queue with identical workers.

    Query i starts at max(arrival_i, earliest worker free time); with FIFO
    order and interchangeable workers that recursion is exact.
    """
    n = len(arrivals)
    out = [0.0] * n
    if workers == 1:
        free = 0.0
        for i in range(n):
            t = arrivals[i]
            start = t if t > free else free
            free = start + services[i]
            out[i] = free - t
        return out
    heap = [0.0] * workers
    replace = heapreplace
    for i in range(n):
        t = arrivals[i]
        free = heap[0]
        start = t if t > free else free
        fin = start + services[i]
        replace(heap, fin)
        out[i] = fin - t
    return out


@dataclass
class MaxLoadResult:
    """Outcome of a max sustainable load search."""

    factor: float
    loads: dict[str, float]
    feasible: bool
    probes: int
    trace: list[tuple[float, bool]]
    diagnostic: str = ""


def measure_max_load(
    base_rates: Mapping[str, float],
    alloc: AllocationState,
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    tol: float = 0.02,
    target_queries: int = 2000,
    warmup_frac: float = 0.10,
    replicates: int = 1,
) -> MaxLoadResult:
    """Largest multiple of base_rates whose p95 stays within every SLA.

    All rates are scaled by a common factor. Each probe replays fixed
    per-model interarrival and batch streams (common random numbers), so
    feasibility is monotone in the factor and bisection converges cleanly.
    A geometric ramp brackets the boundary, then bisection narrows it to the
    requested relative tolerance. The first 10% of each probe (by arrival
    time) is treated as warm-up and discarded.

    With replicates > 1 every probe runs that many independent streams of
    the same length and pools their post-warmup latencies before each SLA
    test; the extra runs shrink tail-estimate noise at fixed probe length.
    """
    active = sorted(m for m, r in base_rates.items() if r > 0)
    if not active:
        raise ConfigError("no model has a positive base rate")
    if replicates < 1:
        raise ConfigError(f"replicates must be >= 1, got {replicates}")
    _check_alloc(alloc, zoo, node)

    zero = {m: 0.0 for m in base_rates}
    for m in active:
        if alloc.workers.get(m, 0) < 1:
            return MaxLoadResult(
                factor=0.0,
                loads=zero,
                feasible=False,
                probes=0,
                trace=[],
                diagnostic=f"{m}: no workers allocated",
            )

    scales = {m: service_scale(m, alloc, zoo, node) for m in active}
    slas = {m: zoo[m].sla_ms / 1e3 for m in active}
    workers = {m: alloc.workers[m] for m in active}

    # The queues never interact during a probe (service scales are fixed
    # by the allocation), so each model is replayed over its own window
    # sized to target_queries of its own traffic; probe cost is then
    # independent of how far apart the per-model rates are.
    n = math.ceil(target_queries * 1.5) + 256
    cum: dict[str, list[np.ndarray]] = {}
    services: dict[str, list[np.ndarray]] = {}
    mean_batch: dict[str, float] = {}
    for m in active:
        cum[m] = []
        services[m] = []
        total = 0.0
        for rep in range(replicates):
            gaps = model_rng(seed, m, ARRIVAL_STREAM, rep).exponential(1.0, n)
            cum[m].append(np.cumsum(gaps))
            batches = zoo.batch.sample_array(model_rng(seed, m, BATCH_STREAM, rep), n)
            services[m].append(batches * scales[m])
            total += float(batches.mean())
        mean_batch[m] = total / replicates

    def feasible(factor: float) -> bool:
        for m in active:
            rate = factor * base_rates[m]
            duration = target_queries / rate
            pool: list[np.ndarray] = []
            for c, sv in zip(cum[m], services[m]):
                arr = c / rate
                k = int(np.searchsorted(arr, duration, side="left"))
                if k >= len(arr):
                    raise RuntimeError("probe stream exhausted; margin too small")
                if k == 0:
                    continue
                lats = _queue_latencies(
                    arr[:k].tolist(), sv[:k].tolist(), workers[m]
                )
                warm = arr[:k] >= warmup_frac * duration
                sample = np.asarray(lats)[warm]
                if sample.size:
                    pool.append(sample)
            if not pool:
                continue
            if percentile(np.concatenate(pool), 95.0) > slas[m]:
                return False
        return True

    # Start at a quarter of the analytic single-worker-saturation estimate.
    f_cap = min(
        workers[m] / (scales[m] * mean_batch[m]) / base_rates[m] for m in active
    )
    f0 = 0.25 * f_cap
    trace: list[tuple[float, bool]] = []

    ok = feasible(f0)
    trace.append((f0, ok))
    if not ok:
        return MaxLoadResult(
            factor=0.0,
            loads=zero,
            feasible=False,
            probes=len(trace),
            trace=trace,
            diagnostic="SLA violated at the minimum probe rate",
        )

    lo, hi = f0, None
    f = f0
    for _ in range(48):
        f *= 1.5
        ok = feasible(f)
        trace.append((f, ok))
        if ok:
            lo = f
        else:
            hi = f
            break
    if hi is None:
        raise ConfigError(
            "load ramp never violated an SLA; probe length is too short "
            "for the configured SLAs"
        )

    while (hi - lo) > tol * lo:
        mid = 0.5 * (lo + hi)
        ok = feasible(mid)
        trace.append((mid, ok))
        if ok:
            lo = mid
        else:
            hi = mid

    loads = {m: lo * r if r > 0 else 0.0 for m, r in base_rates.items()}
    return MaxLoadResult(
        factor=lo,
        loads=loads,
        feasible=True,
        probes=len(trace),
        trace=trace,
    )


def compute_emu(
    loads: Mapping[str, float], isolated_max: Mapping[str, float]
) -> float:
    """Sum over models of served load as a percentage of isolated capacity.

    A server running one model at its isolated max scores exactly 100.
    """
    total = 0.0
    for m, load in loads.items():
        iso = isolated_max.get(m, 0.0)
        if iso <= 0.0:
            raise UndefinedEmuError(
                f"{m}: isolated max load is {iso}; EMU undefined"
            )
        total += 100.0 * load / iso
    return total
