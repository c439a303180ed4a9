"""Cluster-level placement: how many servers, and which models share one.

Every policy receives per-model QPS targets and credits each planned server
with the QPS its tenants are expected to deliver there, adding servers until
every target is covered:

    deeprecsys   dedicated homogeneous servers at isolated max load
    hera         low-scalability models co-locate with their highest-affinity
                 high-scalability partner, preferring partners whose own
                 target is still unmet; leftovers get dedicated servers
    random       unmet models draw a uniformly random co-tenant from the
                 other models whose targets are also still unmet
    random_plus  like random, but never places two high-scalability models
                 together

Credits come from the affinity matrix for co-located tenants and from the
isolated profile for dedicated servers. Each planned server also records the
worker and way layout it would boot with: the even split bent to fit memory,
then the table-driven LLC partition for those worker counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .affinity import AffinityMatrix
from .errors import ConfigError, InitializationError, UnschedulableModelError
from .perfmodel import NodeConfig
from .profiler import ProfileSet
from .rmu import adjust_llc_partition, initialize_server

POLICIES = ("deeprecsys", "hera", "random", "random_plus")

# (model, partner) -> (model credit, partner credit), e.g. from a measured
# pair simulation instead of the matrix estimate
CreditFn = Callable[[str, str], tuple[float, float]]

# Safety valve for credit bugs; no sane plan needs this many servers.
_MAX_SERVERS = 100_000


@dataclass(frozen=True)
class Server:
    """One planned node: tenants, credited QPS, and the boot allocation."""

    node_id: int
    models: tuple[str, ...]
    est_qps: tuple[float, ...]
    workers: dict[str, int]
    ways: dict[str, int]

    def credit(self, model_id: str) -> float:
        total = 0.0
        for m, q in zip(self.models, self.est_qps):
            if m == model_id:
                total += q
        return total


@dataclass
class ClusterPlan:
    policy: str
    targets: dict[str, float]
    servers: list[Server] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def server_count(self) -> int:
        return len(self.servers)

    def serviced_qps(self) -> dict[str, float]:
        out = {m: 0.0 for m in self.targets}
        for s in self.servers:
            for m, q in zip(s.models, s.est_qps):
                out[m] = out.get(m, 0.0) + q
        return out

    def pairs(self) -> list[tuple[str, ...]]:
        """Tenant tuples of the co-located servers (a multiset)."""
        return [s.models for s in self.servers if len(s.models) > 1]

    def covers_targets(self) -> bool:
        serviced = self.serviced_qps()
        return all(serviced.get(m, 0.0) >= t for m, t in self.targets.items())


def server_layout(
    models: tuple[str, ...], profiles: ProfileSet, node: NodeConfig
) -> tuple[dict[str, int], dict[str, int]]:
    """Boot-time workers and ways for one server's tenant set."""
    alloc = initialize_server(models, node, profiles)
    workers = dict(alloc.workers)
    if len(workers) == 2:
        a, b = sorted(workers)
        ka, kb = adjust_llc_partition(
            profiles[a], profiles[b], workers[a], workers[b], node.llc_ways
        )
        return workers, {a: ka, b: kb}
    return workers, dict(alloc.ways)


class _ServerFactory:
    """Appends servers to a plan, reusing layouts per tenant set."""

    def __init__(self, plan: ClusterPlan, profiles: ProfileSet, node: NodeConfig):
        self.plan = plan
        self.profiles = profiles
        self.node = node
        self._layouts: dict[tuple[str, ...], tuple[dict, dict]] = {}

    def append(self, models: tuple[str, ...], est_qps: tuple[float, ...]) -> None:
        key = tuple(sorted(models))
        if key not in self._layouts:
            self._layouts[key] = server_layout(key, self.profiles, self.node)
        workers, ways = self._layouts[key]
        self.plan.servers.append(
            Server(
                node_id=len(self.plan.servers),
                models=models,
                est_qps=est_qps,
                workers=dict(workers),
                ways=dict(ways),
            )
        )


def _check_targets(targets: Mapping[str, float], profiles: ProfileSet) -> list[str]:
    demanded = []
    for m in sorted(targets):
        if targets[m] < 0:
            raise ConfigError(f"{m}: negative target")
        if targets[m] > 0:
            if profiles[m].isolated_max_load <= 0:
                raise UnschedulableModelError(
                    f"{m}: isolated max load is zero; no server count satisfies it"
                )
            demanded.append(m)
    return demanded


def _add_dedicated(
    plan: ClusterPlan, factory: _ServerFactory, model_id: str
) -> None:
    iso = factory.profiles[model_id].isolated_max_load
    serviced = plan.serviced_qps().get(model_id, 0.0)
    missing = plan.targets[model_id] - serviced
    for _ in range(math.ceil(max(0.0, missing) / iso)):
        factory.append((model_id,), (iso,))


def schedule_deeprecsys(
    targets: Mapping[str, float], profiles: ProfileSet, node: NodeConfig
) -> ClusterPlan:
    """ceil(target / isolated_max) dedicated servers per model."""
    plan = ClusterPlan(policy="deeprecsys", targets=dict(targets))
    factory = _ServerFactory(plan, profiles, node)
    for m in _check_targets(targets, profiles):
        _add_dedicated(plan, factory, m)
    return plan


def schedule_hera(
    targets: Mapping[str, float],
    profiles: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig,
) -> ClusterPlan:
    """Affinity-guided co-location of low- with high-scalability models."""
    plan = ClusterPlan(policy="hera", targets=dict(targets))
    factory = _ServerFactory(plan, profiles, node)
    demanded = _check_targets(targets, profiles)
    low = [m for m in demanded if profiles[m].scalability == "low"]
    high = [m for m in demanded if profiles[m].scalability != "low"]
    credited = {m: 0.0 for m in targets}

    for m in low:
        while credited[m] < targets[m]:
            if len(plan.servers) > _MAX_SERVERS:
                raise RuntimeError("server plan exploded; credits look broken")
            best: str | None = None
            best_key: tuple[bool, float] | None = None
            # high is sorted by id, so strict > keeps the smallest id on ties.
            for h in high:
                key = (credited[h] < targets[h], matrix.coaff(m, h))
                if best_key is None or key > best_key:
                    best_key = key
                    best = h
            if best is None:
                plan.notes.append(f"{m}: no high-scalability partner available")
                break
            est_m = matrix.est_qps_for(m, best)
            est_h = matrix.est_qps_for(best, m)
            if est_m <= 0:
                plan.notes.append(f"{m}: co-location estimate is zero, dedicating")
                break
            try:
                factory.append((m, best), (est_m, est_h))
            except InitializationError as exc:
                plan.notes.append(f"{m}+{best}: {exc}, dedicating")
                break
            credited[m] += est_m
            credited[best] += est_h

    for m in demanded:
        _add_dedicated(plan, factory, m)
    return plan


def _schedule_by_draw(
    policy: str,
    targets: Mapping[str, float],
    profiles: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig,
    seed: int,
    high_high_allowed: bool,
    credit_fn: CreditFn | None = None,
) -> ClusterPlan:
    plan = ClusterPlan(policy=policy, targets=dict(targets))
    factory = _ServerFactory(plan, profiles, node)
    demanded = _check_targets(targets, profiles)
    rng = np.random.default_rng(seed)
    credited = {m: 0.0 for m in targets}
    for m in demanded:
        while credited[m] < targets[m]:
            if len(plan.servers) > _MAX_SERVERS:
                raise RuntimeError("server plan exploded; credits look broken")
            pool = [p for p in demanded if p != m and credited[p] < targets[p]]
            if not high_high_allowed and profiles[m].scalability != "low":
                pool = [p for p in pool if profiles[p].scalability == "low"]
            if not pool:
                _add_dedicated(plan, factory, m)
                break
            partner = pool[int(rng.integers(len(pool)))]
            if credit_fn is not None:
                est_m, est_p = credit_fn(m, partner)
            else:
                est_m = matrix.est_qps_for(m, partner)
                est_p = matrix.est_qps_for(partner, m)
            if est_m <= 0:
                _add_dedicated(plan, factory, m)
                break
            try:
                factory.append((m, partner), (est_m, est_p))
            except InitializationError:
                _add_dedicated(plan, factory, m)
                break
            credited[m] += est_m
            credited[partner] += est_p
    return plan


def schedule_random(
    targets: Mapping[str, float],
    profiles: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig,
    seed: int,
    credit_fn: CreditFn | None = None,
) -> ClusterPlan:
    """Each unmet model co-locates with a uniformly random unmet other."""
    return _schedule_by_draw(
        "random", targets, profiles, matrix, node, seed, True, credit_fn
    )


def schedule_random_plus(
    targets: Mapping[str, float],
    profiles: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig,
    seed: int,
    credit_fn: CreditFn | None = None,
) -> ClusterPlan:
    """Random draws, but high-scalability models only partner low ones."""
    return _schedule_by_draw(
        "random_plus", targets, profiles, matrix, node, seed, False, credit_fn
    )


def schedule(
    policy: str,
    targets: Mapping[str, float],
    profiles: ProfileSet,
    node: NodeConfig,
    matrix: AffinityMatrix | None = None,
    seed: int = 0,
    credit_fn: CreditFn | None = None,
) -> ClusterPlan:
    if credit_fn is not None and policy not in ("random", "random_plus"):
        raise ConfigError(f"credit_fn only applies to the random policies, not {policy!r}")
    if policy == "deeprecsys":
        return schedule_deeprecsys(targets, profiles, node)
    if matrix is None:
        raise ConfigError(f"policy {policy!r} needs an affinity matrix")
    if policy == "hera":
        return schedule_hera(targets, profiles, matrix, node)
    if policy == "random":
        return schedule_random(targets, profiles, matrix, node, seed, credit_fn)
    if policy == "random_plus":
        return schedule_random_plus(targets, profiles, matrix, node, seed, credit_fn)
    raise ConfigError(f"unknown policy {policy!r}; expected one of {POLICIES}")


def servers_required(plan: ClusterPlan) -> int:
    if not plan.covers_targets() and not plan.notes:
        raise UnschedulableModelError(
            f"{plan.policy}: plan does not cover its targets"
        )
    return plan.server_count()


def validate_plan(plan: ClusterPlan, profiles: ProfileSet, node: NodeConfig) -> None:
    """Every planned server's boot allocation must fit the node."""
    for s in plan.servers:
        if sum(s.workers.values()) > node.cores:
            raise UnschedulableModelError(
                f"server {s.node_id} {s.models}: worker sum exceeds cores"
            )
        if sum(s.ways.values()) > node.llc_ways or any(
            k < 1 for k in s.ways.values()
        ):
            raise UnschedulableModelError(
                f"server {s.node_id} {s.models}: bad way split"
            )
        mem = sum(w * profiles[m].memory_footprint for m, w in s.workers.items())
        if mem > node.mem_capacity:
            raise UnschedulableModelError(
                f"server {s.node_id} {s.models}: boot allocation exceeds memory"
            )
