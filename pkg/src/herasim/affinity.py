"""Co-location affinity estimated from isolated profiles alone.

Affinity predicts how well two models share one node without ever measuring
them together. Each model is imagined at its half-core reference worker
count; the LLC score searches every way split for the one that preserves the
largest mean fraction of each model's full-LLC QPS, and the DRAM score is the
fraction of combined bandwidth demand the node can actually supply. The
system score is the binding constraint (the minimum).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .errors import ConfigError, IncompleteProfileError
from .perfmodel import NodeConfig
from .profiler import ModelProfile, ProfileSet

AFFINITY_CSV_COLUMNS = (
    "model_a",
    "model_b",
    "coaff_llc",
    "coaff_dram",
    "coaff_system",
    "ways_a",
    "ways_b",
    "est_qps_a",
    "est_qps_b",
)


def _pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def best_way_split(
    pa: ModelProfile, pb: ModelProfile, llc_ways: int
) -> tuple[int, int, float]:
    """Way split maximizing the mean preserved QPS fraction of both models.

    Returns (ways_a, ways_b, score). Ties prefer the most balanced split,
    then the smaller ways_a.
    """
    if llc_ways < 2:
        raise ConfigError("need at least two ways to split an LLC")
    full_a = pa.qps_at(pa.ref_workers, llc_ways)
    full_b = pb.qps_at(pb.ref_workers, llc_ways)
    if full_a <= 0 or full_b <= 0:
        raise ConfigError(
            f"cannot score split for {pa.model_id}+{pb.model_id}: "
            "zero QPS at full LLC"
        )
    best: tuple[float, int, int] | None = None
    best_key: tuple[float, int, int] | None = None
    for ka in range(1, llc_ways):
        kb = llc_ways - ka
        score = 0.5 * (
            pa.qps_at(pa.ref_workers, ka) / full_a
            + pb.qps_at(pb.ref_workers, kb) / full_b
        )
        key = (score, -abs(ka - kb), -ka)
        if best_key is None or key > best_key:
            best_key = key
            best = (score, ka, kb)
    assert best is not None
    score, ka, kb = best
    return ka, kb, score


def coaff_llc(
    profile_a: ModelProfile, profile_b: ModelProfile, cacheway_max: int
) -> tuple[float, tuple[int, int]]:
    """LLC affinity: best-split mean preserved fraction, in (0, 1].

    Returns (value, (ways_a, ways_b)) for the winning split.
    """
    ka, kb, score = best_way_split(profile_a, profile_b, cacheway_max)
    return score, (ka, kb)


def coaff_dram(membw_a: float, membw_b: float, membw_system: float) -> float:
    """DRAM affinity: suppliable fraction of the pair's combined demand.

    Inputs are bandwidths in GB/s. Zero combined demand means no contention
    and scores 1.0.
    """
    if membw_system <= 0:
        raise ConfigError("system memory bandwidth must be positive")
    if membw_a < 0 or membw_b < 0:
        raise ConfigError("bandwidth demand must be non-negative")
    demand = membw_a + membw_b
    if demand == 0:
        return 1.0
    return min(1.0, membw_system / demand)


def coaff_system(llc: float, dram: float) -> float:
    """System affinity is the binding constraint of the two resources."""
    return min(llc, dram)


def _ref_membw(profile: ModelProfile) -> float:
    try:
        return profile.membw_by_workers[profile.ref_workers]
    except KeyError:
        raise IncompleteProfileError(
            f"{profile.model_id}: no bandwidth measurement at "
            f"{profile.ref_workers} workers"
        ) from None


@dataclass(frozen=True)
class PairAffinity:
    a: str
    b: str
    coaff_llc: float
    coaff_dram: float
    coaff_system: float
    ways_a: int
    ways_b: int
    est_qps_a: float
    est_qps_b: float

    def est_qps(self) -> float:
        return self.est_qps_a + self.est_qps_b


def score_pair(a: str, b: str, profiles: ProfileSet, node: NodeConfig) -> PairAffinity:
    pa, pb = profiles[a], profiles[b]
    ka, kb, llc = best_way_split(pa, pb, node.llc_ways)
    dram = coaff_dram(_ref_membw(pa), _ref_membw(pb), node.mem_bandwidth)
    return PairAffinity(
        a=a,
        b=b,
        coaff_llc=llc,
        coaff_dram=dram,
        coaff_system=coaff_system(llc, dram),
        ways_a=ka,
        ways_b=kb,
        est_qps_a=pa.qps_at(pa.ref_workers, ka) * dram,
        est_qps_b=pb.qps_at(pb.ref_workers, kb) * dram,
    )


@dataclass
class AffinityMatrix:
    """Symmetric pairwise affinity scores, including self pairs."""

    pairs: dict[tuple[str, str], PairAffinity] = field(default_factory=dict)

    def get(self, a: str, b: str) -> PairAffinity:
        return self.pairs[_pair_key(a, b)]

    def coaff(self, a: str, b: str) -> float:
        return self.get(a, b).coaff_system

    def est_qps_for(self, model_id: str, partner: str) -> float:
        """Estimated QPS of model_id when co-located with partner."""
        pair = self.get(model_id, partner)
        return pair.est_qps_a if pair.a == model_id else pair.est_qps_b

    def ways_for(self, model_id: str, partner: str) -> int:
        pair = self.get(model_id, partner)
        return pair.ways_a if pair.a == model_id else pair.ways_b

    def ids(self) -> list[str]:
        out: set[str] = set()
        for a, b in self.pairs:
            out.add(a)
            out.add(b)
        return sorted(out)


def build_affinity_matrix(
    profiles: ProfileSet,
    node: NodeConfig,
    model_ids: Iterable[str] | None = None,
    include_self: bool = True,
) -> AffinityMatrix:
    ids = sorted(model_ids) if model_ids is not None else profiles.ids()
    matrix = AffinityMatrix()
    for i, a in enumerate(ids):
        for b in ids[i if include_self else i + 1 :]:
            matrix.pairs[(a, b)] = score_pair(a, b, profiles, node)
    return matrix


def matrix_to_csv(matrix: AffinityMatrix) -> str:
    lines = [",".join(AFFINITY_CSV_COLUMNS)]
    for (a, b), p in sorted(matrix.pairs.items()):
        lines.append(
            f"{a},{b},{p.coaff_llc:.6f},{p.coaff_dram:.6f},{p.coaff_system:.6f},"
            f"{p.ways_a},{p.ways_b},{p.est_qps_a:.6f},{p.est_qps_b:.6f}"
        )
    return "\n".join(lines) + "\n"


def matrix_to_json(matrix: AffinityMatrix) -> str:
    doc = {
        "pairs": [
            {
                "a": p.a,
                "b": p.b,
                "coaff_llc": p.coaff_llc,
                "coaff_dram": p.coaff_dram,
                "coaff_system": p.coaff_system,
                "ways_a": p.ways_a,
                "ways_b": p.ways_b,
                "est_qps_a": p.est_qps_a,
                "est_qps_b": p.est_qps_b,
            }
            for _, p in sorted(matrix.pairs.items())
        ]
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def matrix_from_json(text: str) -> AffinityMatrix:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"affinity file is not valid JSON: {exc}") from exc
    matrix = AffinityMatrix()
    for rec in doc.get("pairs", []):
        try:
            pair = PairAffinity(
                a=str(rec["a"]),
                b=str(rec["b"]),
                coaff_llc=float(rec["coaff_llc"]),
                coaff_dram=float(rec["coaff_dram"]),
                coaff_system=float(rec["coaff_system"]),
                ways_a=int(rec["ways_a"]),
                ways_b=int(rec["ways_b"]),
                est_qps_a=float(rec["est_qps_a"]),
                est_qps_b=float(rec["est_qps_b"]),
            )
        except KeyError as exc:
            raise ConfigError(f"affinity record missing field {exc}") from exc
        matrix.pairs[_pair_key(pair.a, pair.b)] = pair
    return matrix
