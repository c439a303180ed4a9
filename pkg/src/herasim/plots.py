"""Figure rendering for experiment reports: one PNG per scenario.

Renderers take the scenario's report dict (and, for time series or
distributions, re-read the CSV written next to it) and return the path of
the PNG they wrote. matplotlib runs on the Agg backend so no display is
needed.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

POLICY_COLORS = {
    "deeprecsys": "#888888",
    "random": "#d62728",
    "random_plus": "#ff7f0e",
    "hera": "#1f77b4",
    "parties": "#d62728",
    "hera_cat": "#1f77b4",
    "hera_nocat": "#8abce0",
}

_SAVE_OPTS = {"dpi": 120, "metadata": {"Software": None}}


def _read_csv(out_dir: str, name: str) -> list[dict]:
    path = os.path.join(out_dir, f"{name}.csv")
    if not os.path.exists(path):
        return []
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _save(fig, out_dir: str, name: str) -> str:
    path = os.path.join(out_dir, f"{name}.png")
    fig.savefig(path, **_SAVE_OPTS)
    plt.close(fig)
    return path


def render_emu_constant(report: dict, out_dir: str) -> str | None:
    rows = _read_csv(out_dir, "emu_constant")
    if not rows:
        return None
    policies = list(report["summary"])
    values = {p: [] for p in policies}
    for r in rows:
        if r["policy"] in values:
            values[r["policy"]].extend([float(r["emu"])] * int(r["count"]))
    fig, ax = plt.subplots(figsize=(7, 4))
    positions = range(1, len(policies) + 1)
    ax.violinplot(
        [values[p] for p in policies], positions=positions, showextrema=False
    )
    for pos, p in zip(positions, policies):
        s = report["summary"][p]
        ax.scatter(
            [pos] * 3,
            [s["min"], s["median"], s["max"]],
            color=POLICY_COLORS.get(p, "k"),
            zorder=3,
            s=18,
        )
    ax.axhline(100.0, color="k", linewidth=0.8, linestyle=":")
    ax.set_xticks(list(positions))
    ax.set_xticklabels(policies)
    ax.set_ylabel("EMU (%)")
    ax.set_title("EMU at max sustainable constant load")
    fig.tight_layout()
    return _save(fig, out_dir, "emu_constant")


def render_fluctuating(report: dict, out_dir: str) -> str | None:
    rows = _read_csv(out_dir, "fluctuating")
    if not rows:
        return None
    pair = report["pair"]
    seed = str(report["meta"]["seeds"][0])
    fig, axes = plt.subplots(2, len(pair), figsize=(11, 6), sharex=True)
    for col, model in enumerate(pair):
        top, bottom = axes[0][col], axes[1][col]
        for policy in ("hera", "parties"):
            sel = [
                r
                for r in rows
                if r["model"] == model
                and r["policy"] == policy
                and r["seed"] == seed
            ]
            t = [float(r["time"]) for r in sel]
            color = POLICY_COLORS[policy]
            top.plot(
                t,
                [min(float(r["norm_latency"]), 5.0) for r in sel],
                color=color,
                linewidth=0.8,
                label=policy,
            )
            bottom.step(
                t,
                [int(r["workers"]) for r in sel],
                where="post",
                color=color,
                linewidth=1.0,
                label=policy,
            )
        top.axhline(1.0, color="k", linewidth=0.8, linestyle=":")
        top.set_title(model)
        top.set_ylabel("p95 / SLA")
        bottom.set_ylabel("workers")
        bottom.set_xlabel("time (s)")
    axes[0][0].legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir, "fluctuating")


def render_cluster(report: dict, out_dir: str) -> str | None:
    servers = report["servers"]
    labels: list[str] = []
    policies: list[str] = []
    for key in servers:
        label, policy, _ = key.split("|")
        if label not in labels:
            labels.append(label)
        if policy not in policies:
            policies.append(policy)
    policies = [p for p in ("deeprecsys", "random", "random_plus", "hera") if p in policies]
    seed = str(report["meta"]["seeds"][0])
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / len(policies)
    for i, policy in enumerate(policies):
        xs = [j + i * width for j in range(len(labels))]
        ys = [servers[f"{label}|{policy}|{seed}"] for label in labels]
        ax.bar(xs, ys, width=width, label=policy, color=POLICY_COLORS.get(policy))
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(labels))])
    xlabel = (
        "target level (x median isolated QPS)"
        if report["distribution"] == "even"
        else "low/high demand split"
    )
    ax.set_xticklabels(labels)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("servers required")
    ax.set_title(f"Cluster size, {report['distribution']} demand")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir, f"cluster_{report['distribution']}")


def render_ablation(report: dict, out_dir: str) -> str | None:
    summary = report["summary"]
    variants = list(summary)
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.35
    for i, mode in enumerate(("hera_nocat", "hera_cat")):
        xs = [j + i * width for j in range(len(variants))]
        ys = [summary[v][mode]["mean"] for v in variants]
        ax.bar(xs, ys, width=width, label=mode, color=POLICY_COLORS[mode])
    ax.axhline(100.0, color="k", linewidth=0.8, linestyle=":", label="deeprecsys")
    ax.set_xticks([j + width / 2 for j in range(len(variants))])
    ax.set_xticklabels(variants)
    ax.set_ylabel("mean EMU (%)")
    ax.set_title("EMU with and without LLC partitioning")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, out_dir, report["meta"]["scenario"])


def render_validation(report: dict, out_dir: str) -> str | None:
    points = report["points"]
    xs = [p["estimated"] for p in points]
    ys = [p["measured"] for p in points]
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(xs, ys, s=22, color=POLICY_COLORS["hera"])
    lo = min(xs + ys) - 0.05
    hi = max(xs + ys) + 0.05
    ax.plot([lo, hi], [lo, hi], color="k", linewidth=0.8, linestyle=":")
    ax.set_xlim(lo, hi)
    ax.set_ylim(lo, hi)
    r = report["pearson_r"]
    label = f"r = {r:.3f}" if r is not None else report["pearson_note"]
    ax.text(0.05, 0.92, label, transform=ax.transAxes)
    ax.set_xlabel("estimated affinity")
    ax.set_ylabel("measured normalized pair QPS")
    ax.set_title("Affinity estimate vs simulation")
    fig.tight_layout()
    return _save(fig, out_dir, "affinity_validation")
