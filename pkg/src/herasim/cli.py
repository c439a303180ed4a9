"""Command-line front end.

Subcommands: profile, affinity, plan, simulate, experiment. Global flags
pick the zoo, node, seed, and output directory; reports land under the
output directory (HERASIM_OUT overrides the default).
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

from . import __version__
from .affinity import build_affinity_matrix, matrix_to_csv, matrix_to_json
from .errors import ConfigError, HerasimError, MissingProfileError
from .harness import (
    OUT_DIR_ENV,
    POLICIES,
    SCENARIOS,
    ExperimentConfig,
    default_out_dir,
    measured_credit_fn,
    node_label,
    run_scenario,
    run_suite,
)
from .perfmodel import AllocationState, NodeConfig, default_node, load_node
from .profiler import (
    ProfileSet,
    build_profiles,
    load_profiles,
    profiling_cost,
    save_profiles,
)
from .rmu import HeraManager, PartiesManager
from .scheduler import schedule, server_layout, validate_plan
from .simcore import rows_to_csv, run_sim
from .workload import LoadSchedule, ModelZoo, default_zoo, load_zoo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING_PROFILES = 3
EXIT_CHECKS_FAILED = 4


def _parse_kv(text: str, cast) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        key, _, value = part.partition("=")
        try:
            out[key.strip()] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"bad value in {part!r}: {exc}") from exc
    if not out:
        raise ConfigError(f"no key=value entries in {text!r}")
    return out


def _load_tools(args) -> tuple[ModelZoo, NodeConfig]:
    zoo = load_zoo(args.zoo) if args.zoo else default_zoo()
    node = load_node(args.node) if args.node else default_node()
    return zoo, node


def _profiles_path(args, node: NodeConfig) -> str:
    if args.profiles:
        return args.profiles
    return os.path.join(
        args.out, f"profiles-{node_label(node)}-seed{args.seed}.json"
    )


def _load_pset(args, node: NodeConfig) -> ProfileSet:
    path = _profiles_path(args, node)
    if not os.path.exists(path):
        raise MissingProfileError(
            f"no profiles at {path}; run `herasim profile` first"
        )
    return load_profiles(path)


def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(f"wrote {path}")


def cmd_profile(args) -> int:
    zoo, node = _load_tools(args)
    ids = sorted(args.models.split(",")) if args.models else None
    cost = profiling_cost(node)
    pset = build_profiles(
        zoo, node, args.seed, model_ids=ids,
        tol=args.tol, target_queries=args.queries,
    )
    path = _profiles_path(args, node)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    save_profiles(pset, path)
    print(f"wrote {path}")
    print(
        f"probes per model: {cost['curve_points']} (worker curve), "
        f"{cost['grid_points']} (full grid)"
    )
    for m in sorted(pset.ids()):
        p = pset[m]
        print(
            f"{m:10s} scalability={p.scalability:4s} "
            f"isolated_max={p.isolated_max_load:10.2f} qps "
            f"max_workers={p.max_workers}"
        )
    return EXIT_OK


def cmd_affinity(args) -> int:
    zoo, node = _load_tools(args)
    pset = _load_pset(args, node)
    matrix = build_affinity_matrix(pset, node)
    _write(os.path.join(args.out, "affinity.csv"), matrix_to_csv(matrix))
    _write(os.path.join(args.out, "affinity.json"), matrix_to_json(matrix))
    ranked = sorted(
        matrix.pairs.values(), key=lambda p: p.coaff_system, reverse=True
    )
    for p in ranked[: args.top]:
        print(
            f"{p.a:10s}+{p.b:10s} system={p.coaff_system:.4f} "
            f"llc={p.coaff_llc:.4f} dram={p.coaff_dram:.4f} "
            f"ways={p.ways_a}/{p.ways_b}"
        )
    return EXIT_OK


def cmd_plan(args) -> int:
    zoo, node = _load_tools(args)
    pset = _load_pset(args, node)
    if args.targets:
        targets = _parse_kv(args.targets, float)
        for m in targets:
            if m not in pset.ids():
                raise ConfigError(f"target for unprofiled model {m!r}")
    else:
        import statistics

        med = statistics.median(
            pset[m].isolated_max_load for m in pset.ids()
        )
        targets = {m: args.level * med for m in sorted(pset.ids())}
    matrix = build_affinity_matrix(pset, node)
    credit_fn = (
        measured_credit_fn(pset, zoo, node) if args.credit == "measured" else None
    )
    plan = schedule(
        args.policy, targets, pset, node,
        matrix=matrix, seed=args.seed, credit_fn=credit_fn,
    )
    validate_plan(plan, pset, node)
    lines = ["node_id,models,est_qps,workers,ways"]
    for s in plan.servers:
        lines.append(
            "{},{},{},{},{}".format(
                s.node_id,
                "+".join(s.models),
                "+".join(f"{q:.2f}" for q in s.est_qps),
                ";".join(f"{m}:{w}" for m, w in sorted(s.workers.items())),
                ";".join(f"{m}:{k}" for m, k in sorted(s.ways.items())),
            )
        )
    _write(
        os.path.join(args.out, f"plan-{args.policy}.csv"), "\n".join(lines) + "\n"
    )
    print(
        f"{args.policy}: {plan.server_count()} servers, "
        f"targets covered: {plan.covers_targets()}"
    )
    for note in plan.notes:
        print(f"note: {note}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    zoo, node = _load_tools(args)
    rates = _parse_kv(args.rates, float)
    members = tuple(sorted(rates))
    if args.workers:
        workers = {k: int(v) for k, v in _parse_kv(args.workers, int).items()}
        ways = {k: int(v) for k, v in _parse_kv(args.ways, int).items()} if args.ways else {}
        alloc = AllocationState(
            workers=workers, ways=ways, partitioning_enabled=bool(ways)
        )
    else:
        pset = _load_pset(args, node)
        workers, ways = server_layout(members, pset, node)
        alloc = AllocationState(workers=workers, ways=ways)
    if args.manager == "hera":
        manager = HeraManager(_load_pset(args, node), zoo, node)
    elif args.manager == "parties":
        manager = PartiesManager(zoo, node)
    else:
        manager = None
    res = run_sim(
        LoadSchedule.constant(rates), alloc, zoo, node,
        horizon=args.horizon, seed=args.seed, manager=manager,
    )
    _write(os.path.join(args.out, "simulate.csv"), rows_to_csv(res.rows))
    for m in members:
        rows = [r for r in res.rows if r.model == m]
        sla = zoo[m].sla_ms
        violated = sum(1 for r in rows if r.p95_ms > sla)
        print(
            f"{m:10s} completions={res.completions.get(m, 0):7d} "
            f"violation_windows={violated}/{len(rows)} sla={sla:g}ms"
        )
    if manager is not None:
        print(f"reallocations: {res.reallocations}")
    print(f"digest: {res.digest}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    node = load_node(args.node) if args.node else default_node()
    config = ExperimentConfig(
        scenario=args.scenario if args.scenario != "all" else SCENARIOS[0],
        zoo_path=args.zoo,
        node=node,
        seeds=tuple(int(s) for s in args.seeds.split(",")) if args.seeds else (args.seed,),
        out_dir=args.out,
        profiles_path=args.profiles,
        credit=args.credit,
        jobs=args.jobs,
        make_figures=not args.no_figures,
    )
    if args.scenario == "all":
        reports = run_suite(config)
    else:
        reports = {args.scenario: run_scenario(config)}
    failed = 0
    for name, report in reports.items():
        for check in report["checks"]:
            ok = check["passed"]
            failed += 0 if ok else 1
            print(
                f"{'PASS' if ok else 'FAIL'} [{name}] {check['name']}"
                + (f" ({check['detail']})" if check.get("detail") else "")
            )
    if failed:
        print(f"{failed} check(s) failed")
        return EXIT_CHECKS_FAILED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="herasim",
        description="QoS-aware co-location simulator for recommendation inference",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--zoo", help="model zoo JSON (default: packaged zoo)")
    parser.add_argument("--node", help="node config JSON (default: packaged node)")
    parser.add_argument("--seed", type=int, default=42, help="base RNG seed")
    parser.add_argument(
        "--out",
        default=default_out_dir(),
        help=f"output directory (default: reports or ${OUT_DIR_ENV})",
    )
    parser.add_argument(
        "--profiles", help="profiles JSON path (default: under --out)"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="measure per-model QPS tables")
    p.add_argument("--models", help="comma-separated model ids (default: all)")
    p.add_argument("--tol", type=float, default=0.02, help="bisection tolerance")
    p.add_argument(
        "--queries", type=int, default=2000, help="queries per probe run"
    )
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("affinity", help="estimate pairwise co-location affinity")
    p.add_argument("--top", type=int, default=10, help="pairs to print")
    p.set_defaults(func=cmd_affinity)

    p = sub.add_parser("plan", help="place models on servers for a target load")
    p.add_argument("--policy", choices=POLICIES, default="hera")
    p.add_argument(
        "--targets", help="per-model target QPS, e.g. 'din=900,ncf=1200'"
    )
    p.add_argument(
        "--level",
        type=float,
        default=1.0,
        help="per-model target as a multiple of the median isolated QPS",
    )
    p.add_argument(
        "--credit",
        choices=("estimate", "measured"),
        default="estimate",
        help="random policies: credit pairs from the matrix or a measurement",
    )
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", help="run one node simulation")
    p.add_argument(
        "--rates", required=True, help="arrival rates, e.g. 'din=900,ncf=1200'"
    )
    p.add_argument(
        "--workers", help="workers per model (default: boot-time layout)"
    )
    p.add_argument("--ways", help="LLC ways per model (with --workers)")
    p.add_argument(
        "--manager", choices=("none", "hera", "parties"), default="none"
    )
    p.add_argument("--horizon", type=float, default=60.0, help="seconds")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("experiment", help="run a reporting scenario")
    p.add_argument("scenario", choices=SCENARIOS + ("all",))
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--jobs", type=int, default=0, help="worker processes")
    p.add_argument(
        "--credit",
        choices=("estimate", "measured"),
        default="estimate",
        help="random policies: credit pairs from the matrix or a measurement",
    )
    p.add_argument(
        "--no-figures", action="store_true", help="skip figure rendering"
    )
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MissingProfileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_PROFILES
    except HerasimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
