"""Node-level QoS management: initial placement and per-tick reallocation.

Slack is measured p95 divided by SLA. Below 0.8 a model is over-provisioned,
above 1.0 it is violating, and inside (0.8, 1.0] it is left alone. The
profile-guided controller jumps straight to the worker count whose profiled
QPS covers urgency-scaled traffic; the feedback baseline moves one resource
unit per tick from a comfortable tenant to the worst violator, alternating
between cores and LLC ways.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .errors import ConfigError, IncompleteProfileError, InitializationError
from .perfmodel import AllocationState, NodeConfig
from .profiler import ModelProfile, ProfileSet
from .simcore import TickStats
from .workload import ModelZoo

SLACK_LOW = 0.8
SLACK_HIGH = 1.0
# When releasing workers, keep 25% spare over observed traffic. Shrinking to
# the exact curve point would land at ~100% utilization of the SLA boundary
# and oscillate between release and re-grab.
DOWNSIZE_HEADROOM = 1.25


def slack_of(p95_s: float, sla_s: float) -> float:
    if sla_s <= 0:
        raise ConfigError("SLA must be positive")
    return p95_s / sla_s


def _footprint(profile: ModelProfile) -> float:
    if profile.memory_footprint <= 0:
        raise IncompleteProfileError(
            f"{profile.model_id}: profile lacks a memory footprint"
        )
    return profile.memory_footprint


def _fits(workers: Mapping[str, int], profiles: ProfileSet, node: NodeConfig) -> bool:
    total = sum(w * _footprint(profiles[m]) for m, w in workers.items())
    return total <= node.mem_capacity


def initialize_server(
    models,
    node: NodeConfig,
    profiles: ProfileSet,
) -> AllocationState:
    """Even split of cores and ways, bent to fit memory.

    Workers start at half the cores each (the lexicographically first model
    takes the extra core when odd), are capped at each model's memory knee,
    and if the pair still does not fit, the larger-footprint model gives up
    workers until it does. Remaining idle cores are handed to whichever
    tenant can still take them.
    """
    ids = sorted(models)
    if not 1 <= len(ids) <= 2 or len(set(ids)) != len(ids):
        raise ConfigError("a server hosts one or two distinct models")
    for m in ids:
        if m not in profiles:
            raise ConfigError(f"no profile for model {m!r}")

    if len(ids) == 1:
        m = ids[0]
        w = profiles[m].max_workers
        if w < 1:
            raise InitializationError(f"{m}: no worker fits node memory")
        return AllocationState(workers={m: w}, ways={m: node.llc_ways})

    a, b = ids
    workers = {a: math.ceil(node.cores / 2), b: node.cores // 2}
    for m in ids:
        workers[m] = min(workers[m], profiles[m].max_workers)

    if not _fits(workers, profiles, node):
        fp = {m: _footprint(profiles[m]) for m in ids}
        big = a if fp[a] >= fp[b] else b
        peer = b if big == a else a
        headroom = node.mem_capacity - workers[peer] * fp[peer]
        workers[big] = int(headroom // fp[big])
        if workers[big] < 1:
            raise InitializationError(
                f"{a}+{b}: cannot fit one worker of each model in memory"
            )

    moved = True
    while moved and sum(workers.values()) < node.cores:
        moved = False
        idle = node.cores - sum(workers.values())
        for m in ids:
            peer = b if m == a else a
            room = profiles[m].max_workers - workers[m]
            headroom = (
                node.mem_capacity - workers[peer] * _footprint(profiles[peer])
            ) // _footprint(profiles[m])
            take = min(idle, room, int(headroom) - workers[m])
            if take > 0:
                workers[m] += take
                idle -= take
                moved = True

    ways_a = math.ceil(node.llc_ways / 2)
    alloc = AllocationState(
        workers=workers, ways={a: ways_a, b: node.llc_ways - ways_a}
    )
    alloc.validate(node)
    return alloc


def adjust_workers(
    profile: ModelProfile,
    tail_latency_s: float,
    sla_s: float,
    traffic_qps: float,
    max_workers: int | None = None,
) -> int:
    """Smallest profiled worker count covering urgency-scaled traffic.

    Urgency is tail latency over SLA, floored at 1 so an under-loaded model
    is sized for its actual traffic. When no profiled count suffices the
    largest feasible one is returned. max_workers caps the answer at the
    cores the model may actually hold.
    """
    if traffic_qps < 0:
        raise ConfigError("traffic must be non-negative")
    urgency = max(1.0, slack_of(tail_latency_s, sla_s))
    adjusted = urgency * traffic_qps if traffic_qps > 0 else 0.0
    curve = profile.qps_by_workers()
    cap = max(curve) if max_workers is None else min(max(curve), max_workers)
    chosen = cap
    for w in sorted(curve):
        if w <= cap and curve[w] >= adjusted:
            chosen = w
            break
    return max(1, chosen)


def adjust_llc_partition(
    pa: ModelProfile,
    pb: ModelProfile,
    workers_a: int,
    workers_b: int,
    llc_ways: int,
) -> tuple[int, int]:
    """Way split maximizing combined profiled QPS at the given worker counts.

    Ties prefer the most balanced split, then the smaller first share.
    """
    if llc_ways < 2:
        raise ConfigError("need at least two ways to split an LLC")
    best: tuple[int, int] | None = None
    best_key: tuple[float, int, int] | None = None
    for ka in range(1, llc_ways):
        kb = llc_ways - ka
        total = pa.qps_at(workers_a, ka) + pb.qps_at(workers_b, kb)
        key = (total, -abs(ka - kb), -ka)
        if best_key is None or key > best_key:
            best_key = key
            best = (ka, kb)
    assert best is not None
    return best


@dataclass
class HeraManager:
    """Profile-guided controller for one server's tenants."""

    profiles: ProfileSet
    zoo: ModelZoo
    node: NodeConfig

    def _ways_penalty(self, m: str, workers: int, ways: int) -> float:
        """Capacity lost to a reduced LLC share, as a demand multiplier.

        The worker curve is profiled at full LLC; a tenant holding fewer ways
        serves less per worker, so its demand is inflated by the profiled
        full-ways/current-ways QPS ratio before the curve lookup.
        """
        if ways < 1 or ways >= self.node.llc_ways:
            return 1.0
        profile = self.profiles[m]
        at_ways = profile.qps_at(workers, ways)
        if at_ways <= 0:
            return 1.0
        return max(1.0, profile.qps_at(workers, self.node.llc_ways) / at_ways)

    def _grant_cap(self, m: str, workers: dict[str, int]) -> int:
        """Most workers m may hold given its peers' memory use and its knee."""
        peer_mem = sum(
            w * _footprint(self.profiles[o])
            for o, w in workers.items()
            if o != m
        )
        headroom = int(
            (self.node.mem_capacity - peer_mem) // _footprint(self.profiles[m])
        )
        return min(self.profiles[m].max_workers, headroom)

    def monitor_tick(
        self,
        now: float,
        stats: Mapping[str, TickStats],
        alloc: AllocationState,
    ) -> AllocationState | None:
        ids = sorted(m for m, w in alloc.workers.items() if w >= 1)
        workers = {m: alloc.workers[m] for m in ids}
        slacks: dict[str, float] = {}
        desired: dict[str, int] = {}
        floors: dict[str, int] = {}
        for m in ids:
            st = stats.get(m)
            if st is None:
                slacks[m] = 0.0
                desired[m] = 1
                floors[m] = 1
                continue
            sla_s = self.zoo[m].sla_ms / 1e3
            s = slack_of(st.p95_s, sla_s)
            slacks[m] = s
            penalty = self._ways_penalty(m, workers[m], st.ways)
            demand = st.arrival_rate * penalty
            profile = self.profiles[m]
            floors[m] = adjust_workers(profile, 0.0, sla_s, demand)
            if SLACK_LOW < s <= SLACK_HIGH:
                desired[m] = workers[m]
            elif s <= SLACK_LOW:
                want = adjust_workers(profile, 0.0, sla_s, DOWNSIZE_HEADROOM * demand)
                desired[m] = min(workers[m], want)
            else:
                want = adjust_workers(profile, st.p95_s, sla_s, demand)
                desired[m] = max(want, workers[m])

        for m in ids:
            if desired[m] < workers[m]:
                workers[m] = desired[m]

        ups = sorted(
            (m for m in ids if desired[m] > workers[m]),
            key=lambda m: (-slacks[m], m),
        )
        free = self.node.cores - sum(workers.values())
        for m in ups:
            grant = min(desired[m], workers[m] + free, self._grant_cap(m, workers))
            if grant > workers[m]:
                free -= grant - workers[m]
                workers[m] = grant

        # Violators still short pull cores from comfortable peers, who keep
        # at least what their observed traffic needs with no spare.
        for m in ups:
            need = desired[m] - workers[m]
            if need <= 0 or slacks[m] <= SLACK_HIGH:
                continue
            donors = sorted(
                (o for o in ids if o != m and slacks[o] <= SLACK_LOW),
                key=lambda o: (slacks[o], o),
            )
            for o in donors:
                spare = workers[o] - max(floors[o], 1)
                if spare <= 0:
                    continue
                take = min(need, spare, self._grant_cap(m, workers) - workers[m])
                if take <= 0:
                    continue
                workers[o] -= take
                workers[m] += take
                need -= take
                if need <= 0:
                    break

        if workers == {m: alloc.workers[m] for m in ids}:
            return None

        new_ways = dict(alloc.ways)
        if alloc.partitioning_enabled:
            if len(ids) == 2:
                a, b = ids
                ka, kb = adjust_llc_partition(
                    self.profiles[a],
                    self.profiles[b],
                    workers[a],
                    workers[b],
                    self.node.llc_ways,
                )
                new_ways = {a: ka, b: kb}
            else:
                new_ways = {ids[0]: self.node.llc_ways}
        new_workers = dict(alloc.workers)
        new_workers.update(workers)
        return AllocationState(
            workers=new_workers,
            ways=new_ways,
            partitioning_enabled=alloc.partitioning_enabled,
        )


@dataclass
class PartiesManager:
    """Feedback baseline: move one resource unit per tick to the worst violator.

    The unit alternates between a core and an LLC way on successive ticks
    that observe a violation, and is only taken from a peer whose own slack
    is below the comfortable threshold.
    """

    zoo: ModelZoo
    node: NodeConfig
    toggle: int = 0

    def monitor_tick(
        self,
        now: float,
        stats: Mapping[str, TickStats],
        alloc: AllocationState,
    ) -> AllocationState | None:
        return self.parties_step(now, stats, alloc)

    def parties_step(
        self,
        now: float,
        stats: Mapping[str, TickStats],
        alloc: AllocationState,
    ) -> AllocationState | None:
        ids = sorted(m for m, w in alloc.workers.items() if w >= 1)
        if len(ids) != 2:
            return None
        slacks = {}
        for m in ids:
            st = stats.get(m)
            slacks[m] = (
                slack_of(st.p95_s, self.zoo[m].sla_ms / 1e3) if st else 0.0
            )
        violators = [m for m in ids if slacks[m] > SLACK_HIGH]
        if not violators:
            return None
        taker = sorted(violators, key=lambda m: (-slacks[m], m))[0]
        victim = ids[0] if taker == ids[1] else ids[1]
        resource = "cores" if self.toggle % 2 == 0 else "ways"
        self.toggle += 1
        if slacks[victim] >= SLACK_LOW:
            return None

        if resource == "cores":
            workers = dict(alloc.workers)
            if workers[victim] <= 1:
                return None
            grown = {**workers, taker: workers[taker] + 1, victim: workers[victim] - 1}
            if grown[taker] * self.zoo[taker].memory_footprint + grown[victim] * self.zoo[
                victim
            ].memory_footprint > self.node.mem_capacity:
                return None
            if grown[taker] > self.node.cores - 1:
                return None
            return AllocationState(
                workers=grown,
                ways=dict(alloc.ways),
                partitioning_enabled=alloc.partitioning_enabled,
            )

        if not alloc.partitioning_enabled:
            return None
        ways = dict(alloc.ways)
        if ways.get(victim, 0) <= 1:
            return None
        ways[victim] -= 1
        ways[taker] = ways.get(taker, 0) + 1
        return AllocationState(
            workers=dict(alloc.workers),
            ways=ways,
            partitioning_enabled=alloc.partitioning_enabled,
        )
