"""Parametric performance model for one inference server.

A node has cores (one worker occupies one core), a way-partitionable LLC, a
shared DRAM bandwidth pool, and a memory capacity. Service time of a query is
roofline-style additive:

    service = batch * miss_factor * (compute_cost_per_item
                                     + memory_bytes_per_item / (peak_bw * scale))

where miss_factor >= 1 grows as the model's LLC share shrinks below its
working set, and scale <= 1 throttles everyone proportionally when the sum of
bandwidth demands exceeds the node's DRAM bandwidth. More ways or more
bandwidth never make service time worse.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

from .errors import ConfigError, InvalidAllocationError
from .workload import GB, ModelSpec, ModelZoo


@dataclass(frozen=True)
class NodeConfig:
    """One server socket: cores, LLC ways, DRAM bandwidth (GB/s), capacity (bytes)."""

    cores: int = 16
    llc_ways: int = 11
    mem_bandwidth: float = 128.0
    mem_capacity: float = 200.0 * GB

    def validate(self) -> None:
        if self.cores < 1 or self.llc_ways < 1:
            raise ConfigError("node needs at least one core and one way")
        if self.mem_bandwidth <= 0 or self.mem_capacity <= 0:
            raise ConfigError("node bandwidth and capacity must be positive")


DEFAULT_NODE = NodeConfig()


def load_node(path: str) -> NodeConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        node = NodeConfig(
            cores=int(doc["cores"]),
            llc_ways=int(doc["llc_ways"]),
            mem_bandwidth=float(doc["mem_bandwidth_gb_s"]),
            mem_capacity=float(doc["mem_capacity_gb"]) * GB,
        )
    except KeyError as exc:
        raise ConfigError(f"node file missing field {exc}") from exc
    node.validate()
    return node


def default_node() -> NodeConfig:
    text = resources.files("herasim.data").joinpath("default_node.json").read_text()
    doc = json.loads(text)
    return NodeConfig(
        cores=int(doc["cores"]),
        llc_ways=int(doc["llc_ways"]),
        mem_bandwidth=float(doc["mem_bandwidth_gb_s"]),
        mem_capacity=float(doc["mem_capacity_gb"]) * GB,
    )


@dataclass
class AllocationState:
    """Worker counts and LLC way assignment for the models on one node.

    With partitioning_enabled the ways dict is authoritative. Without it the
    LLC is shared and each model's effective ways follow its worker share
    (see shared_llc_effective_ways).
    """

    workers: dict[str, int]
    ways: dict[str, int] = field(default_factory=dict)
    partitioning_enabled: bool = True

    def active_models(self) -> list[str]:
        return [m for m, w in self.workers.items() if w > 0]

    def validate(self, node: NodeConfig) -> None:
        for m, w in self.workers.items():
            if w < 0:
                raise InvalidAllocationError(f"{m}: negative workers")
        if sum(self.workers.values()) > node.cores:
            raise InvalidAllocationError("worker sum exceeds cores")
        if self.partitioning_enabled:
            active = self.active_models()
            for m in active:
                if self.ways.get(m, 0) < 1:
                    raise InvalidAllocationError(f"{m}: active model needs >= 1 way")
            if sum(self.ways.get(m, 0) for m in active) > node.llc_ways:
                raise InvalidAllocationError("way sum exceeds LLC ways")


def capacity_knee(model: ModelSpec, node: NodeConfig) -> int:
    """Largest worker count whose pinned memory fits the node alone."""
    return min(node.cores, int(node.mem_capacity // model.memory_footprint))


def check_memory_capacity(
    workers: Mapping[str, int], zoo: ModelZoo, node: NodeConfig
) -> bool:
    """True when the pinned memory of all workers fits in node capacity."""
    total = 0.0
    for model_id, count in workers.items():
        if count < 0:
            raise InvalidAllocationError(f"{model_id}: negative workers")
        total += count * zoo[model_id].memory_footprint
    return total <= node.mem_capacity


def miss_factor(model: ModelSpec, ways: int) -> float:
    """Service-time inflation from an LLC share below the working set."""
    if ways < 1:
        raise InvalidAllocationError("ways must be >= 1")
    ws = model.cache_working_set_ways
    if ways >= ws:
        return 1.0
    return 1.0 + model.cache_sensitivity * (ws - ways) / ws


def bandwidth_demand(model: ModelSpec, workers: int, ways: int) -> float:
    """Aggregate DRAM demand (GB/s) of `workers` workers at `ways` LLC ways."""
    if workers < 0:
        raise InvalidAllocationError("workers must be >= 0")
    if workers == 0:
        return 0.0
    return workers * model.peak_bandwidth * miss_factor(model, ways)


def shared_llc_effective_ways(
    workers: Mapping[str, int], llc_ways: int
) -> dict[str, int]:
    """Effective per-model ways when the LLC is not partitioned.

    Occupancy follows the worker share. The model with more workers gets the
    ceiling of its proportional share (ties favor the lexicographically first
    model), the other gets the remainder; every active model keeps >= 1 way.
    """
    active = sorted(m for m, w in workers.items() if w > 0)
    if not active:
        return {}
    if len(active) == 1:
        return {active[0]: llc_ways}
    if len(active) != 2:
        raise InvalidAllocationError("shared-LLC rule supports at most two models")
    a, b = active
    wa, wb = workers[a], workers[b]
    big, small = (a, b) if wa >= wb else (b, a)
    share = llc_ways * workers[big] / (wa + wb)
    big_ways = min(llc_ways - 1, max(1, math.ceil(share)))
    return {big: big_ways, small: llc_ways - big_ways}


def effective_ways(alloc: AllocationState, node: NodeConfig) -> dict[str, int]:
    """Per-model LLC ways the service-time model should use."""
    active = alloc.active_models()
    if alloc.partitioning_enabled:
        out = {}
        for m in active:
            w = alloc.ways.get(m, 0)
            if w < 1:
                raise InvalidAllocationError(f"{m}: active model needs >= 1 way")
            out[m] = w
        return out
    return shared_llc_effective_ways(
        {m: alloc.workers[m] for m in active}, node.llc_ways
    )


def bandwidth_scale(alloc: AllocationState, zoo: ModelZoo, node: NodeConfig) -> float:
    """Proportional throttle applied to every model's bandwidth share."""
    ways = effective_ways(alloc, node)
    total = sum(
        bandwidth_demand(zoo[m], alloc.workers[m], ways[m]) for m in ways
    )
    if total <= node.mem_bandwidth:
        return 1.0
    return node.mem_bandwidth / total


def service_scale(
    model_id: str, alloc: AllocationState, zoo: ModelZoo, node: NodeConfig
) -> float:
    """Seconds of service per batch item for one model under the allocation."""
    if alloc.workers.get(model_id, 0) < 1:
        raise InvalidAllocationError(f"{model_id}: no workers allocated")
    spec = zoo[model_id]
    ways = effective_ways(alloc, node)[model_id]
    mf = miss_factor(spec, ways)
    scale = bandwidth_scale(alloc, zoo, node)
    mem_s = spec.memory_bytes_per_item / (spec.peak_bandwidth * GB * scale)
    return mf * (spec.compute_cost_per_item + mem_s)


def service_time(
    model_id: str,
    batch: int,
    alloc: AllocationState,
    zoo: ModelZoo,
    node: NodeConfig,
) -> float:
    """Service seconds for one query of `batch` items."""
    if batch < 0:
        raise ConfigError("batch must be non-negative")
    if batch == 0:
        return 0.0
    return batch * service_scale(model_id, alloc, zoo, node)
