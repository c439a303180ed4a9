"""Model zoo, arrival processes, batch-size sampling, and load schedules.

Queries for a model arrive as a Poisson process whose rate is piecewise
constant over time (a LoadSchedule). Each query carries a batch size drawn
from a clipped log-normal distribution shared by all models.

Units: times are seconds, rates are queries/second, memory sizes are bytes,
bandwidth is GB/s (1 GB = 1e9 bytes), SLAs are milliseconds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidRateError

GB = 1e9

# Clipped log-normal batch-size distribution. Sigma is fixed; mu was found by
# bisecting until the clipped empirical mean hits BATCH_TARGET_MEAN (see
# calibrate_batch_mu, which tests re-run as an oracle).
BATCH_SIGMA = 1.2
BATCH_TARGET_MEAN = 220.0
BATCH_MIN = 1
BATCH_MAX = 1024
BATCH_MU = 4.811431671541868


@dataclass(frozen=True)
class ModelSpec:
    """Resource signature of one recommendation model.

    Attributes:
        id: short stable identifier, lowercase.
        memory_footprint: bytes of memory one worker pins (embeddings + buffers).
        compute_cost_per_item: seconds of core time per batch item at full cache.
        memory_bytes_per_item: DRAM traffic per batch item at full cache, bytes.
        peak_bandwidth: per-worker DRAM demand during the memory phase, GB/s.
        cache_sensitivity: relative slowdown when the LLC share drops to zero ways.
        cache_working_set_ways: ways beyond which more LLC does not help.
        sla_ms: p95 latency target, milliseconds.
    """

    id: str
    memory_footprint: float
    compute_cost_per_item: float
    memory_bytes_per_item: float
    peak_bandwidth: float
    cache_sensitivity: float
    cache_working_set_ways: int
    sla_ms: float

    def validate(self) -> None:
        if not self.id:
            raise ConfigError("model id must be non-empty")
        if self.memory_footprint <= 0:
            raise ConfigError(f"{self.id}: memory_footprint must be positive")
        if self.compute_cost_per_item < 0 or self.memory_bytes_per_item < 0:
            raise ConfigError(f"{self.id}: per-item costs must be non-negative")
        if self.compute_cost_per_item == 0 and self.memory_bytes_per_item == 0:
            raise ConfigError(f"{self.id}: model must cost something per item")
        if self.peak_bandwidth <= 0:
            raise ConfigError(f"{self.id}: peak_bandwidth must be positive")
        if not 0.0 <= self.cache_sensitivity <= 1.0:
            raise ConfigError(f"{self.id}: cache_sensitivity outside [0, 1]")
        if self.cache_working_set_ways < 1:
            raise ConfigError(f"{self.id}: cache_working_set_ways must be >= 1")
        if self.sla_ms <= 0:
            raise ConfigError(f"{self.id}: sla_ms must be positive")


@dataclass(frozen=True)
class BatchSizeModel:
    """Clipped log-normal batch sizes, identical for every model."""

    mu: float = BATCH_MU
    sigma: float = BATCH_SIGMA
    lo: int = BATCH_MIN
    hi: int = BATCH_MAX

    def sample_array(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raw = rng.lognormal(self.mu, self.sigma, n)
        return np.clip(np.rint(raw), self.lo, self.hi)

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.sample_array(rng, 1)[0])


@dataclass
class ModelZoo:
    """A named set of ModelSpecs plus the shared batch-size distribution."""

    models: dict[str, ModelSpec]
    batch: BatchSizeModel = field(default_factory=BatchSizeModel)
    source_digest: str = ""

    def __getitem__(self, model_id: str) -> ModelSpec:
        return self.models[model_id]

    def __contains__(self, model_id: str) -> bool:
        return model_id in self.models

    def __len__(self) -> int:
        return len(self.models)

    def ids(self) -> list[str]:
        return list(self.models)


def _spec_from_record(rec: Mapping) -> ModelSpec:
    try:
        spec = ModelSpec(
            id=str(rec["id"]),
            memory_footprint=float(rec["memory_footprint_gb_per_worker"]) * GB,
            compute_cost_per_item=float(rec["compute_us_per_item"]) * 1e-6,
            memory_bytes_per_item=float(rec["memory_kb_per_item"]) * 1e3,
            peak_bandwidth=float(rec["peak_bandwidth_gb_per_worker"]),
            cache_sensitivity=float(rec["cache_sensitivity"]),
            cache_working_set_ways=int(rec["cache_working_set_ways"]),
            sla_ms=float(rec["sla_ms"]),
        )
    except KeyError as exc:
        raise ConfigError(f"zoo record missing field {exc}") from exc
    spec.validate()
    return spec


def _spec_to_record(spec: ModelSpec) -> dict:
    return {
        "id": spec.id,
        "memory_footprint_gb_per_worker": spec.memory_footprint / GB,
        "compute_us_per_item": spec.compute_cost_per_item * 1e6,
        "memory_kb_per_item": spec.memory_bytes_per_item / 1e3,
        "peak_bandwidth_gb_per_worker": spec.peak_bandwidth,
        "cache_sensitivity": spec.cache_sensitivity,
        "cache_working_set_ways": spec.cache_working_set_ways,
        "sla_ms": spec.sla_ms,
    }


def zoo_from_json(text: str) -> ModelZoo:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"zoo file is not valid JSON: {exc}") from exc
    if "models" not in doc or not doc["models"]:
        raise ConfigError("zoo file has no models")
    models: dict[str, ModelSpec] = {}
    for rec in doc["models"]:
        spec = _spec_from_record(rec)
        if spec.id in models:
            raise ConfigError(f"duplicate model id {spec.id!r}")
        models[spec.id] = spec
    batch_cfg = doc.get("batch", {})
    batch = BatchSizeModel(
        mu=float(batch_cfg.get("lognormal_mu", BATCH_MU)),
        sigma=float(batch_cfg.get("lognormal_sigma", BATCH_SIGMA)),
        lo=int(batch_cfg.get("clip", [BATCH_MIN, BATCH_MAX])[0]),
        hi=int(batch_cfg.get("clip", [BATCH_MIN, BATCH_MAX])[1]),
    )
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return ModelZoo(models=models, batch=batch, source_digest=digest)


def zoo_to_json(zoo: ModelZoo) -> str:
    doc = {
        "batch": {
            "lognormal_mu": zoo.batch.mu,
            "lognormal_sigma": zoo.batch.sigma,
            "clip": [zoo.batch.lo, zoo.batch.hi],
            "target_mean": BATCH_TARGET_MEAN,
        },
        "models": [_spec_to_record(m) for m in zoo.models.values()],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def load_zoo(path: str) -> ModelZoo:
    with open(path, "r", encoding="utf-8") as fh:
        return zoo_from_json(fh.read())


def default_zoo() -> ModelZoo:
    text = resources.files("herasim.data").joinpath("default_zoo.json").read_text()
    return zoo_from_json(text)


def calibrate_batch_mu(
    target: float = BATCH_TARGET_MEAN,
    sigma: float = BATCH_SIGMA,
    lo_mu: float = 3.0,
    hi_mu: float = 7.0,
    samples: int = 4_000_000,
    seed: int = 20240501,
    iters: int = 40,
) -> float:
    """Bisect the log-normal mu until the clipped empirical mean hits target.

    The same standard-normal draws are reused for every candidate mu, so the
    clipped mean is a monotone function of mu and bisection is exact up to
    float resolution.
    """
    z = np.random.default_rng(seed).standard_normal(samples)

    def clipped_mean(mu: float) -> float:
        raw = np.exp(mu + sigma * z)
        return float(np.clip(np.rint(raw), BATCH_MIN, BATCH_MAX).mean())

    lo, hi = lo_mu, hi_mu
    if not clipped_mean(lo) < target < clipped_mean(hi):
        raise ConfigError("target mean outside the bisection bracket")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if clipped_mean(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class Query:
    """One inference request."""

    model_id: str
    arrival_time: float
    batch_size: int

    def __post_init__(self) -> None:
        if self.arrival_time < 0:
            raise ConfigError("arrival_time must be non-negative")
        if not BATCH_MIN <= self.batch_size <= BATCH_MAX:
            raise ConfigError("batch_size outside the supported range")


@dataclass(frozen=True)
class LoadSchedule:
    """Piecewise-constant arrival rates per model.

    phases is a list of (start_time, {model_id: rate}) with strictly
    increasing start times. Before the first phase every rate is zero.
    """

    phases: tuple[tuple[float, dict[str, float]], ...]

    @staticmethod
    def constant(rates: Mapping[str, float]) -> "LoadSchedule":
        return LoadSchedule(phases=((0.0, dict(rates)),))

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigError("schedule needs at least one phase")
        prev = -float("inf")
        for start, rates in self.phases:
            if start <= prev:
                raise ConfigError("phase start times must be strictly increasing")
            prev = start
            for model_id, rate in rates.items():
                if rate < 0:
                    raise ConfigError(f"negative rate for {model_id!r}")

    def models(self) -> set[str]:
        out: set[str] = set()
        for _, rates in self.phases:
            out.update(rates)
        return out

    def rate_at(self, model_id: str, t: float) -> float:
        if t < 0:
            raise ValueError("time must be non-negative")
        if model_id not in self.models():
            raise KeyError(f"unknown model {model_id!r}")
        rate = 0.0
        for start, rates in self.phases:
            if start <= t:
                rate = rates.get(model_id, 0.0)
            else:
                break
        return rate


def next_interarrival(rng: np.random.Generator, rate: float) -> float:
    """One exponential gap for a Poisson process at the given rate."""
    if rate <= 0:
        raise InvalidRateError(f"rate must be positive, got {rate}")
    return float(rng.exponential(1.0 / rate))


def _poisson_times(rng: np.random.Generator, rate: float, start: float, end: float) -> np.ndarray:
    span = end - start
    if rate <= 0 or span <= 0:
        return np.empty(0)
    n = int(rate * span * 1.25) + 32
    ts = np.cumsum(rng.exponential(1.0 / rate, n))
    while ts[-1] < span:
        more = rng.exponential(1.0 / rate, n // 2 + 32)
        ts = np.concatenate([ts, ts[-1] + np.cumsum(more)])
    return start + ts[ts < span]


def generate_arrivals(
    schedule: LoadSchedule,
    model_id: str,
    horizon: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Arrival times in [0, horizon) for one model under the schedule."""
    if horizon <= 0:
        raise ConfigError("horizon must be positive")
    chunks = []
    starts = [s for s, _ in schedule.phases]
    for i, (start, rates) in enumerate(schedule.phases):
        if start >= horizon:
            break
        end = min(horizon, starts[i + 1] if i + 1 < len(starts) else horizon)
        chunks.append(_poisson_times(rng, rates.get(model_id, 0.0), start, end))
    if not chunks:
        return np.empty(0)
    return np.concatenate(chunks)


def generate_queries(
    schedule: LoadSchedule,
    model_id: str,
    horizon: float,
    seed: int,
    batch: BatchSizeModel | None = None,
) -> Iterator[Query]:
    """Convenience stream of Query objects for one model."""
    batch = batch or BatchSizeModel()
    times = generate_arrivals(
        schedule, model_id, horizon, np.random.default_rng(np.random.SeedSequence((seed, 0)))
    )
    sizes = batch.sample_array(np.random.default_rng(np.random.SeedSequence((seed, 1))), len(times))
    for t, b in zip(times, sizes):
        yield Query(model_id=model_id, arrival_time=float(t), batch_size=int(b))


def build_fluctuating_schedule(
    low_model: str,
    high_model: str,
    low_max: float,
    high_max: float,
    t1: float = 120.0,
    t2: float = 240.0,
    end: float = 360.0,
    ramp_step: float = 10.0,
) -> LoadSchedule:
    """Two-model diurnal-style schedule.

    Both models ramp from 10% to 70% of their max load over [0, t1). At t1 the
    high-scalability model falls to 20% while the other holds 70%. At t2 the
    high-scalability model spikes to 60% and the other drops to 10%.
    """
    if not 0 < t1 < t2 < end:
        raise ConfigError("need 0 < t1 < t2 < end")
    if ramp_step <= 0 or t1 / ramp_step < 2:
        raise ConfigError("ramp_step must allow at least two ramp phases")
    phases: list[tuple[float, dict[str, float]]] = []
    steps = int(round(t1 / ramp_step))
    for i in range(steps):
        frac = 0.10 + (0.70 - 0.10) * i / (steps - 1)
        phases.append(
            (i * ramp_step, {low_model: frac * low_max, high_model: frac * high_max})
        )
    phases.append((t1, {low_model: 0.70 * low_max, high_model: 0.20 * high_max}))
    phases.append((t2, {low_model: 0.10 * low_max, high_model: 0.60 * high_max}))
    return LoadSchedule(phases=tuple(phases))
