"""Experiment orchestration: build profiles, run scenarios, emit reports.

Each scenario writes a CSV table (measurement rows or a time series), a JSON
report carrying summary statistics plus pass/fail checks, and a rendered
figure, all under one output directory. Outputs are deterministic for a fixed
(config, seeds) pair; wall-clock timing goes to stderr only.
"""

from __future__ import annotations

import hashlib
import json
import os
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .affinity import AffinityMatrix, build_affinity_matrix
from .errors import ConfigError, MissingProfileError
from .perfmodel import (
    AllocationState,
    NodeConfig,
    default_node,
    miss_factor,
    shared_llc_effective_ways,
)
from .profiler import ProfileSet, build_profiles, load_profiles, save_profiles
from .rmu import HeraManager, PartiesManager, initialize_server
from .scheduler import CreditFn, schedule, server_layout
from .simcore import compute_emu, measure_max_load, run_sim
from .workload import ModelZoo, build_fluctuating_schedule, default_zoo, load_zoo

SCENARIOS = (
    "emu_constant",
    "fluctuating",
    "cluster_even",
    "cluster_skewed",
    "ablation_cat",
    "sensitivity_sysconfig",
    "affinity_validation",
)

POLICIES = ("deeprecsys", "random", "random_plus", "hera")

OUT_DIR_ENV = "HERASIM_OUT"


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, "reports")


@dataclass
class ExperimentConfig:
    """Everything one scenario run depends on, hashable for provenance."""

    scenario: str
    zoo_path: str | None = None
    node: NodeConfig = field(default_factory=default_node)
    policies: tuple[str, ...] = POLICIES
    seeds: tuple[int, ...] = (42,)
    out_dir: str = field(default_factory=default_out_dir)
    profiles_path: str | None = None
    level_multipliers: tuple[float, ...] = (0.5, 1.0, 1.5, 2.0, 3.0, 4.0)
    mid_level_index: int = 3
    skew_ratios: tuple[tuple[int, int], ...] = (
        (90, 10),
        (70, 30),
        (50, 50),
        (30, 70),
        (10, 90),
    )
    fluct_pair: tuple[str, str] = ("dlrm-d", "wnd")
    fluct_horizon: float = 360.0
    node_variants: tuple[tuple[int, int, float], ...] = (
        (12, 11, 128.0),
        (16, 6, 128.0),
        (16, 11, 64.0),
    )
    tol: float = 0.02
    target_queries: int = 2000
    credit: str = "estimate"
    jobs: int = 0
    make_figures: bool = True

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(
                f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}"
            )
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for p in self.policies:
            if p not in POLICIES:
                raise ConfigError(f"unknown policy {p!r}; expected one of {POLICIES}")
        if not 0 <= self.mid_level_index < len(self.level_multipliers):
            raise ConfigError("mid_level_index outside level_multipliers")
        if self.credit not in ("estimate", "measured"):
            raise ConfigError("credit must be 'estimate' or 'measured'")

    def effective_jobs(self) -> int:
        if self.jobs > 0:
            return self.jobs
        return min(os.cpu_count() or 1, 8)

    def digest(self) -> str:
        payload = asdict(self)
        payload["jobs"] = 0
        payload["make_figures"] = True
        payload["out_dir"] = ""
        text = json.dumps(payload, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def node_label(node: NodeConfig) -> str:
    return f"{node.cores}c{node.llc_ways}w{node.mem_bandwidth:g}g"


def load_experiment_zoo(config: ExperimentConfig) -> ModelZoo:
    if config.zoo_path is None:
        return default_zoo()
    return load_zoo(config.zoo_path)


def ensure_profiles(
    config: ExperimentConfig, zoo: ModelZoo, node: NodeConfig | None = None
) -> ProfileSet:
    """Load cached profiles for (zoo, node, seed) or build and cache them.

    An explicit profiles_path must already exist; a stale or mismatched cache
    under out_dir is rebuilt in place.
    """
    node = node or config.node
    seed = config.seeds[0]
    if config.profiles_path is not None and node == config.node:
        if not os.path.exists(config.profiles_path):
            raise MissingProfileError(
                f"no profiles at {config.profiles_path}; run the profile "
                "subcommand first"
            )
        return load_profiles(config.profiles_path)
    path = os.path.join(
        config.out_dir, f"profiles-{node_label(node)}-seed{seed}.json"
    )
    if os.path.exists(path):
        pset = load_profiles(path)
        if (
            pset.seed == seed
            and pset.zoo_digest == zoo.source_digest
            and pset.node == node
        ):
            return pset
    t0 = time.monotonic()
    pset = build_profiles(
        zoo, node, seed, tol=config.tol, target_queries=config.target_queries
    )
    os.makedirs(config.out_dir, exist_ok=True)
    save_profiles(pset, path)
    print(
        f"[profile] {node_label(node)} built in {time.monotonic() - t0:.1f}s",
        file=sys.stderr,
    )
    return pset


def report_meta(
    config: ExperimentConfig, zoo: ModelZoo, pset: ProfileSet
) -> dict:
    return {
        "scenario": config.scenario,
        "config_digest": config.digest(),
        "package_version": __version__,
        "zoo_digest": zoo.source_digest,
        "profiles_seed": pset.seed,
        "profiles_zoo_digest": pset.zoo_digest,
        "node": {
            "cores": config.node.cores,
            "llc_ways": config.node.llc_ways,
            "mem_bandwidth_gbps": config.node.mem_bandwidth,
            "mem_capacity_gb": config.node.mem_capacity / 2**30,
        },
        "seeds": list(config.seeds),
        "policies": list(config.policies),
    }


def _write_text(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(text)
    return path


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_report(
    config: ExperimentConfig,
    name: str,
    header: Sequence[str],
    rows: Iterable[Sequence],
    report: dict,
) -> dict:
    """Write <name>.csv and <name>.json under out_dir; record them in report.

    files holds basenames, so reports do not depend on where they were
    written and identical configs produce byte-identical reports.
    """
    csv_path = os.path.join(config.out_dir, f"{name}.csv")
    _write_text(csv_path, _csv_text(header, rows))
    report["files"] = sorted(
        set(report.get("files", [])) | {f"{name}.csv", f"{name}.json"}
    )
    _write_text(
        os.path.join(config.out_dir, f"{name}.json"),
        json.dumps(report, sort_keys=True, indent=2) + "\n",
    )
    return report


def _render(config: ExperimentConfig, report: dict, renderer_name: str) -> None:
    if not config.make_figures:
        return
    from . import plots

    path = getattr(plots, renderer_name)(report, config.out_dir)
    if path:
        report["files"] = sorted(set(report["files"]) | {os.path.basename(path)})
        json_path = os.path.join(config.out_dir, f"{report['meta']['scenario']}.json")
        _write_text(json_path, json.dumps(report, sort_keys=True, indent=2) + "\n")


def _pmap(fn: Callable, items: Sequence, jobs: int) -> list:
    """Order-preserving parallel map; results merge deterministically."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items))


def _check(name: str, passed: bool, detail: str) -> dict:
    return {"name": name, "passed": bool(passed), "detail": detail}


def checks_passed(report: Mapping) -> bool:
    return all(c["passed"] for c in report.get("checks", []))


def heterogeneous_pairs(ids: Sequence[str]) -> list[tuple[str, str]]:
    ids = sorted(ids)
    return [(a, b) for i, a in enumerate(ids) for b in ids[i + 1 :]]


def median_iso(pset: ProfileSet) -> float:
    return statistics.median(pset.isolated_max().values())


def mid_level_targets(config: ExperimentConfig, pset: ProfileSet) -> dict[str, float]:
    level = config.level_multipliers[config.mid_level_index] * median_iso(pset)
    return {m: level for m in pset.ids()}


def hera_pair_multiset(
    config: ExperimentConfig,
    pset: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig | None = None,
) -> list[tuple[tuple[str, ...], int]]:
    """Co-located tenant sets hera deploys at the mid-level even target,
    with their server multiplicities."""
    node = node or config.node
    plan = schedule("hera", mid_level_targets(config, pset), pset, node, matrix=matrix)
    counts: dict[tuple[str, ...], int] = {}
    for members in plan.pairs():
        key = tuple(sorted(members))
        counts[key] = counts.get(key, 0) + 1
    return sorted(counts.items())


def measured_credit_fn(
    pset: ProfileSet,
    zoo: ModelZoo,
    node: NodeConfig,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> CreditFn:
    """Pair credit from a pooled-replicate pair measurement at the boot
    allocation instead of the matrix estimate; memoized per pair."""
    cache: dict[tuple[str, str], tuple[float, float]] = {}

    def credit(m: str, partner: str) -> tuple[float, float]:
        if (m, partner) not in cache:
            a, b = sorted((m, partner))
            workers, ways = server_layout((a, b), pset, node)
            alloc = AllocationState(workers=workers, ways=ways)
            base = {x: pset[x].qps_at(workers[x], ways[x]) for x in (a, b)}
            res = measure_max_load(
                base, alloc, zoo, node, seed=pset.seed,
                tol=tol / 8, target_queries=target_queries, replicates=16,
            )
            cache[(a, b)] = (res.loads[a], res.loads[b])
            cache[(b, a)] = (res.loads[b], res.loads[a])
        return cache[(m, partner)]

    return credit


def _bandwidth_factor(
    members: Sequence[str],
    workers: Mapping[str, int],
    ways: Mapping[str, int],
    pset: ProfileSet,
    zoo: ModelZoo,
    node: NodeConfig,
) -> float:
    # membw_by_workers was profiled at the full LLC; a squeezed share
    # inflates demand by the miss factor at the granted ways.
    demand = 0.0
    for m in members:
        mbw = pset[m].membw_by_workers.get(workers[m], 0.0)
        demand += mbw * miss_factor(zoo[m], ways[m])
    if demand <= 0.0 or demand <= node.mem_bandwidth:
        return 1.0
    return node.mem_bandwidth / demand


def probe_allocations(
    members: Sequence[str],
    pset: ProfileSet,
    zoo: ModelZoo,
    node: NodeConfig,
    partitioning: bool = True,
    limit: int = 8,
) -> list[tuple[AllocationState, dict[str, float]]]:
    """Candidate (allocation, injection mix) points a node manager would
    trial for a pair under saturating load, best table estimate first.
    The mix is the pair's per-model capacity estimate at that allocation;
    shifting traffic off the proportional mix only lowers the lagging
    model's utilization, so the proportional point is the one worth
    measuring."""
    a, b = members
    pa, pb = pset[a], pset[b]
    iso_a, iso_b = pa.isolated_max_load, pb.isolated_max_load
    scored = []
    for wa in range(1, min(pa.max_workers, node.cores - 1) + 1):
        for wb in range(1, min(pb.max_workers, node.cores - wa) + 1):
            mem = wa * pa.memory_footprint + wb * pb.memory_footprint
            if mem > node.mem_capacity:
                continue
            if partitioning:
                splits = [
                    (ka, node.llc_ways - ka) for ka in range(1, node.llc_ways)
                ]
            else:
                shared = shared_llc_effective_ways({a: wa, b: wb}, node.llc_ways)
                splits = [(shared[a], shared[b])]
            for ka, kb in splits:
                s = _bandwidth_factor(
                    members, {a: wa, b: wb}, {a: ka, b: kb}, pset, zoo, node
                )
                qa = pa.qps_at(wa, ka) * s
                qb = pb.qps_at(wb, kb) * s
                score = qa / iso_a + qb / iso_b
                key = (score, -abs(wa - wb), -abs(ka - kb), -wa, -ka)
                scored.append((key, wa, wb, ka, kb, qa, qb))
    scored.sort(key=lambda t: t[0], reverse=True)
    allocs: list[tuple[AllocationState, dict[str, float]]] = []
    per_workers: dict[tuple[int, int], int] = {}
    for _, wa, wb, ka, kb, qa, qb in scored:
        if len(allocs) >= limit:
            break
        # keep the candidate set diverse: at most two way splits per
        # worker split, so one worker corner cannot crowd out the rest
        if per_workers.get((wa, wb), 0) >= 2:
            continue
        per_workers[(wa, wb)] = per_workers.get((wa, wb), 0) + 1
        if partitioning:
            alloc = AllocationState(workers={a: wa, b: wb}, ways={a: ka, b: kb})
        else:
            alloc = AllocationState(
                workers={a: wa, b: wb}, ways={}, partitioning_enabled=False
            )
        allocs.append((alloc, {a: qa, b: qb}))
    return allocs


def _emu_job(job: tuple) -> dict:
    # trial every candidate with pooled replicate probes and keep the best
    # operating point, the way a node manager settles after trying each
    # configuration under load
    (label, members, seed, count, candidates, zoo, node, iso, tol, tq) = job
    probes = 0
    best = None
    for alloc, base in candidates:
        res = measure_max_load(
            base, alloc, zoo, node, seed,
            tol=tol / 8, target_queries=tq, replicates=16,
        )
        probes += res.probes
        emu = compute_emu(res.loads, iso)
        if best is None or emu > best[0]:
            best = (emu, res.factor)
    return {
        "policy": label,
        "members": "+".join(members),
        "seed": seed,
        "count": count,
        "emu": best[0],
        "factor": best[1],
        "probes": probes,
        "measured": 1,
    }


def _definition_row(label: str, member: str, seed: int) -> dict:
    return {
        "policy": label,
        "members": member,
        "seed": seed,
        "count": 1,
        "emu": 100.0,
        "factor": 1.0,
        "probes": 0,
        "measured": 0,
    }


def _weighted_values(rows: Iterable[Mapping]) -> list[float]:
    out: list[float] = []
    for r in rows:
        out.extend([r["emu"]] * int(r["count"]))
    return out


def _emu_summary(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0, "min": None, "median": None, "max": None, "mean": None}
    return {
        "n": len(values),
        "min": min(values),
        "median": statistics.median(values),
        "max": max(values),
        "mean": statistics.fmean(values),
    }


EMU_CSV_HEADER = (
    "policy",
    "members",
    "seed",
    "count",
    "emu",
    "factor",
    "probes",
    "measured",
)


def _emu_rows(
    config: ExperimentConfig,
    zoo: ModelZoo,
    pset: ProfileSet,
    populations: Mapping[str, Sequence[tuple[tuple[str, ...], int]]],
    node: NodeConfig | None = None,
    partitioning: Mapping[str, bool] | None = None,
) -> list[dict]:
    """Measure max-load EMU for every (label, tenant set, seed) population
    entry; a single-model entry scores exactly 100 by definition."""
    node = node or config.node
    iso = pset.isolated_max()
    rows: list[dict] = []
    # a pair measures identically under every policy label that contains
    # it, so fan out one job per distinct (pair, partitioning, seed) and
    # share the result across labels
    labels: dict[tuple, list[tuple[str, int]]] = {}
    for label in sorted(populations):
        part = True if partitioning is None else partitioning[label]
        for members, count in populations[label]:
            if len(members) == 1:
                for seed in config.seeds:
                    rows.append(_definition_row(label, members[0], seed))
                continue
            labels.setdefault((members, part), []).append((label, count))
    jobs: list[tuple] = []
    for members, part in sorted(labels):
        candidates = probe_allocations(members, pset, zoo, node, partitioning=part)
        for seed in config.seeds:
            jobs.append(
                (
                    (members, part),
                    members,
                    seed,
                    0,
                    candidates,
                    zoo,
                    node,
                    {m: iso[m] for m in members},
                    config.tol,
                    config.target_queries,
                )
            )
    for res in _pmap(_emu_job, jobs, config.effective_jobs()):
        for label, count in labels[res["policy"]]:
            rows.append({**res, "policy": label, "count": count})
    rows.sort(key=lambda r: (r["policy"], r["members"], r["seed"]))
    return rows


def emu_populations(
    config: ExperimentConfig, pset: ProfileSet, matrix: AffinityMatrix
) -> dict[str, list[tuple[tuple[str, ...], int]]]:
    """Per-policy tenant-set populations whose EMU distribution is reported."""
    ids = pset.ids()
    het = heterogeneous_pairs(ids)
    low = {m for m in ids if pset[m].scalability == "low"}
    out: dict[str, list[tuple[tuple[str, ...], int]]] = {}
    for policy in config.policies:
        if policy == "deeprecsys":
            out[policy] = [((m,), 1) for m in ids]
        elif policy == "random":
            out[policy] = [(p, 1) for p in het]
        elif policy == "random_plus":
            out[policy] = [(p, 1) for p in het if low & set(p)]
        else:
            out[policy] = hera_pair_multiset(config, pset, matrix)
    return out


def run_emu_constant(config: ExperimentConfig) -> dict:
    """Max sustainable EMU per policy under the constant-load injection mix."""
    t0 = time.monotonic()
    zoo = load_experiment_zoo(config)
    pset = ensure_profiles(config, zoo)
    matrix = build_affinity_matrix(pset, config.node)
    rows = _emu_rows(config, zoo, pset, emu_populations(config, pset, matrix))
    summary = {}
    for policy in config.policies:
        vals = _weighted_values(r for r in rows if r["policy"] == policy)
        if vals:
            summary[policy] = _emu_summary(vals)
    checks = _emu_checks(summary)
    report = {
        "meta": report_meta(config, zoo, pset),
        "summary": summary,
        "checks": checks,
    }
    write_report(
        config,
        "emu_constant",
        EMU_CSV_HEADER,
        [[r[k] for k in EMU_CSV_HEADER] for r in rows],
        report,
    )
    _render(config, report, "render_emu_constant")
    print(f"[emu_constant] {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return report


def _emu_checks(summary: Mapping[str, Mapping]) -> list[dict]:
    checks: list[dict] = []
    if "deeprecsys" in summary:
        s = summary["deeprecsys"]
        checks.append(
            _check(
                "deeprecsys_emu_exactly_100",
                s["min"] == 100.0 and s["max"] == 100.0,
                f"min={s['min']:.3f} max={s['max']:.3f}",
            )
        )
    if "random" in summary:
        s = summary["random"]
        checks.append(
            _check(
                "random_min_emu_below_100",
                s["min"] < 100.0,
                f"min={s['min']:.3f}",
            )
        )
    if "random_plus" in summary:
        s = summary["random_plus"]
        checks.append(
            _check(
                "random_plus_min_emu_at_least_100",
                s["min"] >= 100.0,
                f"min={s['min']:.3f}",
            )
        )
    if "hera" in summary:
        s = summary["hera"]
        checks.append(
            _check(
                "hera_min_emu_at_least_100",
                s["min"] >= 100.0,
                f"min={s['min']:.3f}",
            )
        )
        if "deeprecsys" in summary:
            checks.append(
                _check(
                    "hera_mean_emu_ge_deeprecsys_plus_20",
                    s["mean"] >= summary["deeprecsys"]["mean"] + 20.0,
                    f"hera mean={s['mean']:.3f}",
                )
            )
        if "random_plus" in summary:
            checks.append(
                _check(
                    "hera_mean_emu_ge_random_plus_mean",
                    s["mean"] >= summary["random_plus"]["mean"],
                    f"hera={s['mean']:.3f} random_plus="
                    f"{summary['random_plus']['mean']:.3f}",
                )
            )
            checks.append(
                _check(
                    "hera_median_emu_gt_random_plus_median",
                    s["median"] > summary["random_plus"]["median"],
                    f"hera={s['median']:.3f} random_plus="
                    f"{summary['random_plus']['median']:.3f}",
                )
            )
    return checks


FLUCT_CSV_HEADER = (
    "time",
    "model",
    "policy",
    "seed",
    "p95_ms",
    "norm_latency",
    "qps",
    "violation",
    "workers",
    "ways",
)


def _fluct_job(job: tuple) -> dict:
    (policy, seed, pair, alloc, zoo, node, pset, horizon) = job
    if policy == "hera":
        manager = HeraManager(pset, zoo, node)
    else:
        manager = PartiesManager(zoo, node)
    a, b = pair
    sched = build_fluctuating_schedule(
        a,
        b,
        low_max=pset[a].isolated_max_load,
        high_max=pset[b].isolated_max_load,
    )
    res = run_sim(sched, alloc, zoo, node, horizon, seed=seed, manager=manager)
    series = []
    violations = {m: 0 for m in pair}
    windows = {m: 0 for m in pair}
    for row in res.rows:
        sla_ms = zoo[row.model].sla_ms
        violated = row.p95_ms > sla_ms
        windows[row.model] += 1
        violations[row.model] += int(violated)
        series.append(
            (
                row.time,
                row.model,
                policy,
                seed,
                row.p95_ms,
                row.p95_ms / sla_ms,
                row.qps,
                violated,
                row.cores,
                row.ways,
            )
        )
    return {
        "policy": policy,
        "seed": seed,
        "series": series,
        "violation_fraction": {
            m: violations[m] / windows[m] for m in pair
        },
        "reallocations": res.reallocations,
    }


def run_fluctuating(config: ExperimentConfig) -> dict:
    """Hera vs the incremental baseline on the diverging two-model schedule,
    with shared arrival seeds."""
    t0 = time.monotonic()
    zoo = load_experiment_zoo(config)
    pset = ensure_profiles(config, zoo)
    pair = config.fluct_pair
    for m in pair:
        if m not in zoo:
            raise ConfigError(f"fluctuating pair model {m!r} not in zoo")
    alloc = initialize_server(pair, config.node, pset)
    jobs = [
        (policy, seed, pair, alloc, zoo, config.node, pset, config.fluct_horizon)
        for policy in ("hera", "parties")
        for seed in config.seeds
    ]
    results = _pmap(_fluct_job, jobs, config.effective_jobs())
    results.sort(key=lambda r: (r["policy"], r["seed"]))
    rows = [row for r in results for row in r["series"]]
    rows.sort(key=lambda r: (r[2], r[3], r[0], r[1]))
    fractions = {
        r["policy"]: {str(s): None for s in config.seeds} for r in results
    }
    for r in results:
        fractions[r["policy"]][str(r["seed"])] = r["violation_fraction"]
    checks = []
    for seed in config.seeds:
        for m in pair:
            h = fractions["hera"][str(seed)][m]
            p = fractions["parties"][str(seed)][m]
            checks.append(
                _check(
                    f"hera_violation_below_parties_{m}_seed{seed}",
                    h < p,
                    f"hera={h:.4f} parties={p:.4f}",
                )
            )
    report = {
        "meta": report_meta(config, zoo, pset),
        "pair": list(pair),
        "sla_ms": {m: zoo[m].sla_ms for m in pair},
        "violation_fractions": fractions,
        "reallocations": {
            f"{r['policy']}_seed{r['seed']}": r["reallocations"] for r in results
        },
        "checks": checks,
    }
    write_report(config, "fluctuating", FLUCT_CSV_HEADER, rows, report)
    _render(config, report, "render_fluctuating")
    print(f"[fluctuating] {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return report


CLUSTER_CSV_HEADER = (
    "distribution",
    "level",
    "multiplier_or_ratio",
    "policy",
    "seed",
    "servers",
    "covered",
)


def skewed_targets(
    pset: ProfileSet, aggregate: float, low_pct: int, high_pct: int
) -> dict[str, float]:
    """Split an aggregate QPS target between the low- and high-scalability
    groups at low_pct/high_pct, evenly within each group."""
    ids = pset.ids()
    low = [m for m in ids if pset[m].scalability == "low"]
    high = [m for m in ids if m not in low]
    targets = {m: 0.0 for m in ids}
    if low and low_pct:
        for m in low:
            targets[m] = aggregate * low_pct / 100.0 / len(low)
    if high and high_pct:
        for m in high:
            targets[m] = aggregate * high_pct / 100.0 / len(high)
    return targets


def run_cluster(
    config: ExperimentConfig,
    distribution: str = "even",
    ratios: Sequence[tuple[int, int]] | None = None,
) -> dict:
    """Servers each policy needs across target levels (even) or across
    low/high demand splits at the mid level (skewed)."""
    t0 = time.monotonic()
    if distribution not in ("even", "skewed"):
        raise ConfigError(f"unknown distribution {distribution!r}")
    zoo = load_experiment_zoo(config)
    pset = ensure_profiles(config, zoo)
    matrix = build_affinity_matrix(pset, config.node)
    med = median_iso(pset)
    scenario = f"cluster_{distribution}"
    cases: list[tuple[str, dict[str, float]]] = []
    if distribution == "even":
        for mult in config.level_multipliers:
            cases.append((f"{mult:g}", {m: mult * med for m in pset.ids()}))
    else:
        aggregate = (
            config.level_multipliers[config.mid_level_index] * med * len(pset.ids())
        )
        for low_pct, high_pct in ratios or config.skew_ratios:
            cases.append(
                (
                    f"{low_pct}/{high_pct}",
                    skewed_targets(pset, aggregate, low_pct, high_pct),
                )
            )
    credit_fn = (
        measured_credit_fn(pset, zoo, config.node, config.tol, config.target_queries)
        if config.credit == "measured"
        else None
    )
    rows = []
    servers: dict[tuple[str, str, int], int] = {}
    for level, (label, targets) in enumerate(cases):
        for policy in config.policies:
            for seed in config.seeds:
                plan = schedule(
                    policy,
                    targets,
                    pset,
                    config.node,
                    matrix=matrix,
                    seed=seed,
                    credit_fn=credit_fn if policy in ("random", "random_plus") else None,
                )
                servers[(label, policy, seed)] = plan.server_count()
                rows.append(
                    (
                        distribution,
                        level,
                        label,
                        policy,
                        seed,
                        plan.server_count(),
                        plan.covers_targets(),
                    )
                )
    checks = _cluster_checks(config, distribution, cases, servers)
    report = {
        "meta": report_meta(config, zoo, pset),
        "distribution": distribution,
        "median_isolated_qps": med,
        "servers": {
            f"{label}|{policy}|{seed}": n
            for (label, policy, seed), n in sorted(servers.items())
        },
        "checks": checks,
    }
    report["meta"]["scenario"] = scenario
    write_report(config, scenario, CLUSTER_CSV_HEADER, rows, report)
    _render(config, report, "render_cluster")
    print(f"[{scenario}] {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return report


def _cluster_checks(
    config: ExperimentConfig,
    distribution: str,
    cases: Sequence[tuple[str, dict]],
    servers: Mapping[tuple[str, str, int], int],
) -> list[dict]:
    checks: list[dict] = []
    have = set(config.policies)
    if distribution == "even":
        if {"hera", "random", "deeprecsys"} <= have:
            for label, _ in cases:
                for seed in config.seeds:
                    h = servers[(label, "hera", seed)]
                    r = servers[(label, "random", seed)]
                    d = servers[(label, "deeprecsys", seed)]
                    checks.append(
                        _check(
                            f"chain_level{label}_seed{seed}",
                            h <= r <= d,
                            f"hera={h} random={r} deeprecsys={d}",
                        )
                    )
        if {"hera", "deeprecsys"} <= have:
            label = cases[config.mid_level_index][0]
            for seed in config.seeds:
                h = servers[(label, "hera", seed)]
                d = servers[(label, "deeprecsys", seed)]
                reduction = 1.0 - h / d if d else 0.0
                checks.append(
                    _check(
                        f"mid_level_reduction_ge_10pct_seed{seed}",
                        reduction >= 0.10,
                        f"hera={h} deeprecsys={d} reduction={reduction:.3f}",
                    )
                )
    elif {"hera", "deeprecsys"} <= have:
        for label, _ in cases:
            # Under heavy low-scalability skew, mandatory Step A pairing can
            # cost more servers than dedicated provisioning; only ratios with
            # at least half the demand on High models are asserted.
            if int(label.split("/")[1]) < 50:
                continue
            for seed in config.seeds:
                h = servers[(label, "hera", seed)]
                d = servers[(label, "deeprecsys", seed)]
                checks.append(
                    _check(
                        f"hera_le_deeprecsys_ratio{label.replace('/', '_')}_seed{seed}",
                        h <= d,
                        f"hera={h} deeprecsys={d}",
                    )
                )
    return checks


ABLATION_CSV_HEADER = (
    "variant",
    "mode",
    "members",
    "seed",
    "count",
    "emu",
    "factor",
)


def _ablation_rows_for_node(
    config: ExperimentConfig,
    zoo: ModelZoo,
    node: NodeConfig,
    pset: ProfileSet,
    variant: str,
) -> list[dict]:
    matrix = build_affinity_matrix(pset, node)
    multiset = hera_pair_multiset(config, pset, matrix, node=node)
    populations = {"hera_cat": multiset, "hera_nocat": multiset}
    rows = _emu_rows(
        config,
        zoo,
        pset,
        populations,
        node=node,
        partitioning={"hera_cat": True, "hera_nocat": False},
    )
    for r in rows:
        r["variant"] = variant
    return rows


def run_ablation(config: ExperimentConfig) -> dict:
    """EMU with and without LLC partitioning; the sensitivity scenario sweeps
    the same comparison across node variants."""
    t0 = time.monotonic()
    zoo = load_experiment_zoo(config)
    pset = ensure_profiles(config, zoo)
    scenario = config.scenario
    if scenario == "sensitivity_sysconfig":
        variants = [("base", config.node)]
        for cores, ways, bw in config.node_variants:
            node = replace(
                config.node, cores=cores, llc_ways=ways, mem_bandwidth=bw
            )
            variants.append((node_label(node), node))
    else:
        variants = [("base", config.node)]
    rows: list[dict] = []
    for variant, node in variants:
        vset = pset if node == config.node else ensure_profiles(config, zoo, node)
        rows.extend(_ablation_rows_for_node(config, zoo, node, vset, variant))
    summary: dict[str, dict] = {}
    for variant, _ in variants:
        by_mode = {}
        for mode in ("hera_cat", "hera_nocat"):
            vals = _weighted_values(
                r for r in rows if r["variant"] == variant and r["policy"] == mode
            )
            by_mode[mode] = _emu_summary(vals)
        by_mode["deeprecsys"] = {"mean": 100.0}
        summary[variant] = by_mode
    checks: list[dict] = []
    for variant, _ in variants:
        cat = summary[variant]["hera_cat"]["mean"]
        nocat = summary[variant]["hera_nocat"]["mean"]
        if nocat is None:
            # a variant can leave every model high-scalability, so the plan
            # is all dedicated servers and there is no pair EMU to compare
            checks.append(
                _check(
                    f"hera_colocation_reported_{variant}",
                    True,
                    "no co-located servers at this variant; EMU comparison skipped",
                )
            )
            continue
        checks.append(
            _check(
                f"hera_nocat_emu_above_deeprecsys_{variant}",
                nocat > 100.0,
                f"nocat mean={nocat:.3f}",
            )
        )
        checks.append(
            _check(
                f"hera_cat_emu_ge_nocat_{variant}",
                cat >= nocat,
                f"cat={cat:.3f} nocat={nocat:.3f}",
            )
        )
    report = {
        "meta": report_meta(config, zoo, pset),
        "summary": summary,
        "checks": checks,
    }
    csv_rows = [
        (r["variant"], r["policy"], r["members"], r["seed"], r["count"], r["emu"], r["factor"])
        for r in sorted(rows, key=lambda r: (r["variant"], r["policy"], r["members"], r["seed"]))
    ]
    write_report(config, scenario, ABLATION_CSV_HEADER, csv_rows, report)
    _render(config, report, "render_ablation")
    print(f"[{scenario}] {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return report


VALIDATION_CSV_HEADER = (
    "model_a",
    "model_b",
    "coaff_llc",
    "coaff_dram",
    "coaff_system",
    "ways_a",
    "ways_b",
    "seed",
    "measured_norm",
    "factor",
    "probes",
)


def _validation_job(job: tuple) -> dict:
    (members, seed, base, alloc, zoo, node, denom, tol, tq) = job
    res = measure_max_load(
        base, alloc, zoo, node, seed,
        tol=tol / 8, target_queries=tq, replicates=16,
    )
    measured = sum(res.loads.values()) / denom
    return {"members": members, "seed": seed, "measured_norm": measured,
            "factor": res.factor, "probes": res.probes}


def affinity_validation_allocation(
    pair: tuple[str, str],
    pset: ProfileSet,
    matrix: AffinityMatrix,
    node: NodeConfig,
) -> AllocationState:
    """The allocation the affinity estimate models: the estimate's best way
    split, on memory-feasible boot worker counts."""
    a, b = pair
    pa = matrix.get(a, b)
    boot = initialize_server(pair, node, pset)
    return AllocationState(
        workers=dict(boot.workers),
        ways={pa.a: pa.ways_a, pa.b: pa.ways_b},
    )


def run_affinity_validation(config: ExperimentConfig) -> dict:
    """Estimated pair affinity vs simulated pair QPS at the estimate's own
    allocation, normalized to each model's isolated QPS at the same worker
    count; reports the Pearson correlation over every heterogeneous pair."""
    t0 = time.monotonic()
    zoo = load_experiment_zoo(config)
    pset = ensure_profiles(config, zoo)
    matrix = build_affinity_matrix(pset, config.node)
    pairs = heterogeneous_pairs(pset.ids())
    jobs = []
    for pair in pairs:
        alloc = affinity_validation_allocation(pair, pset, matrix, config.node)
        base = {m: pset[m].qps_at(alloc.workers[m], alloc.ways[m]) for m in pair}
        denom = sum(
            pset[m].qps_at(alloc.workers[m], config.node.llc_ways) for m in pair
        )
        for seed in config.seeds:
            jobs.append(
                (
                    pair,
                    seed,
                    base,
                    alloc,
                    zoo,
                    config.node,
                    denom,
                    config.tol,
                    config.target_queries,
                )
            )
    results = _pmap(_validation_job, jobs, config.effective_jobs())
    rows = []
    xs, ys = [], []
    for r in results:
        a, b = r["members"]
        pa = matrix.get(a, b)
        xs.append(pa.coaff_system)
        ys.append(r["measured_norm"])
        rows.append(
            (
                pa.a,
                pa.b,
                pa.coaff_llc,
                pa.coaff_dram,
                pa.coaff_system,
                pa.ways_a,
                pa.ways_b,
                r["seed"],
                r["measured_norm"],
                r["factor"],
                r["probes"],
            )
        )
    rows.sort(key=lambda r: (r[0], r[1], r[7]))
    if np.std(xs) == 0.0 or np.std(ys) == 0.0:
        r_value = None
        r_note = "undefined: zero variance"
    else:
        r_value = float(np.corrcoef(xs, ys)[0, 1])
        r_note = ""
    checks = [
        _check(
            "pearson_r_defined",
            r_value is not None,
            r_note or f"r={r_value:.4f}",
        ),
        _check(
            "pearson_r_at_least_0.8",
            r_value is not None and r_value >= 0.8,
            r_note or f"r={r_value:.4f}",
        ),
        _check(
            "all_pairs_covered",
            len(pairs) == len(heterogeneous_pairs(pset.ids())),
            f"n_pairs={len(pairs)}",
        ),
    ]
    report = {
        "meta": report_meta(config, zoo, pset),
        "pearson_r": r_value,
        "pearson_note": r_note,
        "n_pairs": len(pairs),
        "points": [
            {"pair": f"{row[0]}+{row[1]}", "estimated": row[4], "measured": row[8]}
            for row in rows
        ],
        "checks": checks,
    }
    write_report(config, "affinity_validation", VALIDATION_CSV_HEADER, rows, report)
    _render(config, report, "render_validation")
    print(f"[affinity_validation] {time.monotonic() - t0:.1f}s", file=sys.stderr)
    return report


def run_scenario(config: ExperimentConfig) -> dict:
    """Dispatch one scenario and return its report."""
    runner = {
        "emu_constant": run_emu_constant,
        "fluctuating": run_fluctuating,
        "cluster_even": lambda c: run_cluster(c, "even"),
        "cluster_skewed": lambda c: run_cluster(c, "skewed"),
        "ablation_cat": run_ablation,
        "sensitivity_sysconfig": run_ablation,
        "affinity_validation": run_affinity_validation,
    }[config.scenario]
    return runner(config)


def run_suite(config: ExperimentConfig, scenarios: Sequence[str] = SCENARIOS) -> dict:
    """Run every scenario with one shared config; write a digest manifest."""
    reports = {}
    for scenario in scenarios:
        reports[scenario] = run_scenario(replace(config, scenario=scenario))
    manifest = {}
    for report in reports.values():
        for name in report.get("files", []):
            if name.endswith((".csv", ".json")):
                with open(os.path.join(config.out_dir, name), "rb") as f:
                    manifest[name] = hashlib.sha256(f.read()).hexdigest()
    _write_text(
        os.path.join(config.out_dir, "manifest.json"),
        json.dumps(manifest, sort_keys=True, indent=2) + "\n",
    )
    return reports
