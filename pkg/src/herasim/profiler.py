"""Offline capacity profiling of single models on one node.

For each model the profiler measures max sustainable load over a grid of
(workers, LLC ways) allocations, smooths the grid so QPS is non-decreasing in
both workers and ways (more resources never measure worse), and derives the
curves the schedulers and the node controller consume:

    qps_by_workers  full-LLC column, keyed by worker count up to the memory knee
    qps_by_ways     row at the half-core reference worker count
    membw_by_workers  analytic DRAM demand at full LLC
    isolated_max_load grid corner: all cores (up to the knee), all ways

Scalability class: a model is "low" when adding the last quarter of cores
improves QPS by less than 10%, or when its memory footprint caps workers
below the core count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy.optimize import isotonic_regression

from .errors import (
    ConfigError,
    IncompleteProfileError,
    InsufficientProfileError,
    MissingProfileError,
)
from .perfmodel import AllocationState, NodeConfig, bandwidth_demand, capacity_knee
from .simcore import measure_max_load, model_stream_key
from .workload import ModelZoo

LOW_SCALABILITY_GAIN = 0.10


def grid_seed(seed: int, model_id: str, workers: int, ways: int) -> int:
    """Per-cell probe seed, independent of the order cells are visited in."""
    seq = np.random.SeedSequence((seed, model_stream_key(model_id), workers, ways))
    return int(seq.generate_state(1)[0])


def smooth_monotone_grid(raw: np.ndarray, passes: int = 2) -> np.ndarray:
    """Make a noisy QPS grid non-decreasing along both axes.

    Alternating per-row and per-column isotonic regressions remove most of the
    measurement noise; the closing cummax along ways and then workers makes
    monotonicity exact (each cummax preserves the other axis's ordering).
    """
    grid = np.asarray(raw, dtype=float).copy()
    if grid.ndim != 2:
        raise ConfigError("QPS grid must be 2-D (workers x ways)")
    for _ in range(passes):
        for i in range(grid.shape[0]):
            grid[i, :] = isotonic_regression(grid[i, :]).x
        for j in range(grid.shape[1]):
            grid[:, j] = isotonic_regression(grid[:, j]).x
    grid = np.maximum.accumulate(grid, axis=1)
    grid = np.maximum.accumulate(grid, axis=0)
    return grid


@dataclass
class ModelProfile:
    """Measured capacity surface of one model on one node type."""

    model_id: str
    cores: int
    llc_ways: int
    knee: int
    ref_workers: int
    qps_table: dict[tuple[int, int], float]
    scalability: str = ""
    seed: int = 0
    membw_by_workers: dict[int, float] = field(default_factory=dict)
    memory_footprint: float = 0.0

    def __post_init__(self) -> None:
        expected = {
            (w, k)
            for w in range(1, self.max_workers + 1)
            for k in range(1, self.llc_ways + 1)
        }
        missing = expected - set(self.qps_table)
        if missing:
            raise IncompleteProfileError(
                f"{self.model_id}: qps_table missing {len(missing)} cells"
            )

    @property
    def max_workers(self) -> int:
        return min(self.cores, self.knee)

    @property
    def isolated_max_load(self) -> float:
        return self.qps_table[(self.max_workers, self.llc_ways)]

    def qps_at(self, workers: int, ways: int) -> float:
        try:
            return self.qps_table[(workers, ways)]
        except KeyError:
            raise IncompleteProfileError(
                f"{self.model_id}: no measurement at workers={workers} ways={ways}"
            ) from None

    def qps_by_workers(self) -> dict[int, float]:
        return {
            w: self.qps_table[(w, self.llc_ways)]
            for w in range(1, self.max_workers + 1)
        }

    def qps_by_ways(self) -> dict[int, float]:
        return {
            k: self.qps_table[(self.ref_workers, k)]
            for k in range(1, self.llc_ways + 1)
        }

    def qps_by_ways_normalized(self) -> dict[int, float]:
        """Way curve relative to the full-LLC entry at the reference workers."""
        curve = self.qps_by_ways()
        full = curve[self.llc_ways]
        if full <= 0:
            raise InsufficientProfileError(
                f"{self.model_id}: zero QPS at full LLC, cannot normalize"
            )
        return {k: v / full for k, v in curve.items()}


def classify_scalability(
    profile: ModelProfile, cores: int, gain_threshold: float = LOW_SCALABILITY_GAIN
) -> str:
    """"low" when the last quarter of cores is worth under gain_threshold."""
    curve = profile.qps_by_workers()
    if max(curve) < cores:
        return "low"
    base_w = max(1, (3 * cores) // 4)
    if base_w not in curve:
        raise InsufficientProfileError(
            f"{profile.model_id}: worker curve lacks {base_w} workers"
        )
    base = curve[base_w]
    if base <= 0:
        return "low"
    return "low" if (curve[cores] - base) / base < gain_threshold else "high"


def membw_by_workers(model_id: str, zoo: ModelZoo, node: NodeConfig) -> dict[int, float]:
    """Analytic full-LLC DRAM demand (GB/s) per worker count."""
    spec = zoo[model_id]
    wmax = min(node.cores, capacity_knee(spec, node))
    return {w: bandwidth_demand(spec, w, node.llc_ways) for w in range(1, wmax + 1)}


def profile_model(
    model_id: str,
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> ModelProfile:
    """Measure the full (workers, ways) QPS grid for one model."""
    if model_id not in zoo:
        raise ConfigError(f"unknown model {model_id!r}")
    spec = zoo[model_id]
    wmax = min(node.cores, capacity_knee(spec, node))
    if wmax < 1:
        raise ConfigError(f"{model_id}: one worker does not fit node memory")
    raw = np.zeros((wmax, node.llc_ways))
    for w in range(1, wmax + 1):
        for k in range(1, node.llc_ways + 1):
            alloc = AllocationState(workers={model_id: w}, ways={model_id: k})
            res = measure_max_load(
                {model_id: 1.0},
                alloc,
                zoo,
                node,
                seed=grid_seed(seed, model_id, w, k),
                tol=tol,
                target_queries=target_queries,
            )
            raw[w - 1, k - 1] = res.factor
    grid = smooth_monotone_grid(raw)
    table = {
        (w, k): float(grid[w - 1, k - 1])
        for w in range(1, wmax + 1)
        for k in range(1, node.llc_ways + 1)
    }
    profile = ModelProfile(
        model_id=model_id,
        cores=node.cores,
        llc_ways=node.llc_ways,
        knee=capacity_knee(spec, node),
        ref_workers=min(node.cores // 2, wmax),
        qps_table=table,
        seed=seed,
        membw_by_workers=membw_by_workers(model_id, zoo, node),
        memory_footprint=spec.memory_footprint,
    )
    profile.scalability = classify_scalability(profile, node.cores)
    return profile


def profile_worker_scalability(
    model_id: str,
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> dict[int, float]:
    """Full-LLC QPS per worker count, isotonic-smoothed, OOM points absent."""
    return profile_model(
        model_id, zoo, node, seed, tol=tol, target_queries=target_queries
    ).qps_by_workers()


def profile_llc_sensitivity(
    model_id: str,
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    workers: int | None = None,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> dict[int, float]:
    """QPS per way count at a fixed worker count (default: half the cores)."""
    p = profile_model(model_id, zoo, node, seed, tol=tol, target_queries=target_queries)
    w = p.ref_workers if workers is None else workers
    if not 1 <= w <= p.max_workers:
        raise ConfigError(
            f"{model_id}: reference workers {w} outside feasible 1..{p.max_workers}"
        )
    return {k: p.qps_at(w, k) for k in range(1, p.llc_ways + 1)}


def build_qps_table(
    model_id: str,
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> dict[tuple[int, int], float]:
    """The full monotone (workers, ways) grid for one model."""
    return profile_model(
        model_id, zoo, node, seed, tol=tol, target_queries=target_queries
    ).qps_table


@dataclass
class ProfileSet:
    """Profiles for a zoo on one node type, persistable as JSON."""

    node: NodeConfig
    seed: int
    profiles: dict[str, ModelProfile] = field(default_factory=dict)
    zoo_digest: str = ""

    def __getitem__(self, model_id: str) -> ModelProfile:
        try:
            return self.profiles[model_id]
        except KeyError:
            raise MissingProfileError(f"no profile for model {model_id!r}") from None

    def __contains__(self, model_id: str) -> bool:
        return model_id in self.profiles

    def ids(self) -> list[str]:
        return sorted(self.profiles)

    def isolated_max(self) -> dict[str, float]:
        return {m: p.isolated_max_load for m, p in sorted(self.profiles.items())}


def build_profiles(
    zoo: ModelZoo,
    node: NodeConfig,
    seed: int,
    model_ids: Iterable[str] | None = None,
    tol: float = 0.02,
    target_queries: int = 2000,
) -> ProfileSet:
    ids = sorted(model_ids) if model_ids is not None else sorted(zoo.ids())
    pset = ProfileSet(node=node, seed=seed, zoo_digest=zoo.source_digest)
    for m in ids:
        pset.profiles[m] = profile_model(
            m, zoo, node, seed, tol=tol, target_queries=target_queries
        )
    return pset


def profiling_cost(node: NodeConfig) -> dict[str, int]:
    """Probe counts per model for curve-only vs full-grid profiling, and the
    worst-case table payload in bytes (float64 per cell)."""
    grid = node.cores * node.llc_ways
    return {
        "curve_points": node.cores,
        "grid_points": grid,
        "table_bytes": grid * 8,
    }


def profiles_to_json(pset: ProfileSet) -> str:
    doc = {
        "seed": pset.seed,
        "zoo_digest": pset.zoo_digest,
        "node": {
            "cores": pset.node.cores,
            "llc_ways": pset.node.llc_ways,
            "mem_bandwidth_gb_s": pset.node.mem_bandwidth,
            "mem_capacity_gb": pset.node.mem_capacity / 1e9,
        },
        "profiles": {
            m: {
                "cores": p.cores,
                "llc_ways": p.llc_ways,
                "knee": p.knee,
                "ref_workers": p.ref_workers,
                "scalability": p.scalability,
                "seed": p.seed,
                "memory_footprint": p.memory_footprint,
                "membw_by_workers": {
                    str(w): v for w, v in sorted(p.membw_by_workers.items())
                },
                "qps_table": {
                    f"{w},{k}": v for (w, k), v in sorted(p.qps_table.items())
                },
            }
            for m, p in sorted(pset.profiles.items())
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def profiles_from_json(text: str) -> ProfileSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"profile file is not valid JSON: {exc}") from exc
    try:
        nd = doc["node"]
        node = NodeConfig(
            cores=int(nd["cores"]),
            llc_ways=int(nd["llc_ways"]),
            mem_bandwidth=float(nd["mem_bandwidth_gb_s"]),
            mem_capacity=float(nd["mem_capacity_gb"]) * 1e9,
        )
        pset = ProfileSet(
            node=node, seed=int(doc["seed"]), zoo_digest=doc.get("zoo_digest", "")
        )
        for m, rec in doc["profiles"].items():
            table = {}
            for key, v in rec["qps_table"].items():
                w, k = key.split(",")
                table[(int(w), int(k))] = float(v)
            pset.profiles[m] = ModelProfile(
                model_id=m,
                cores=int(rec["cores"]),
                llc_ways=int(rec["llc_ways"]),
                knee=int(rec["knee"]),
                ref_workers=int(rec["ref_workers"]),
                qps_table=table,
                scalability=rec.get("scalability", ""),
                seed=int(rec.get("seed", 0)),
                membw_by_workers={
                    int(w): float(v)
                    for w, v in rec.get("membw_by_workers", {}).items()
                },
                memory_footprint=float(rec.get("memory_footprint", 0.0)),
            )
    except KeyError as exc:
        raise ConfigError(f"profile file missing field {exc}") from exc
    return pset


def save_profiles(pset: ProfileSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(profiles_to_json(pset))


def load_profiles(path: str) -> ProfileSet:
    with open(path, "r", encoding="utf-8") as fh:
        return profiles_from_json(fh.read())
