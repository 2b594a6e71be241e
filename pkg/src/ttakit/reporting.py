"""Run artifacts: tab-separated tables and matplotlib figures.

Every run directory gets summary.tsv (flat key/value), batches.tsv,
reliability_bins.tsv and, when labels are known, reliability_diagram.png.
Runs with a learned policy additionally get policy_history.tsv and
policy_probs.png.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import AdaptationReport
from .metrics import ReliabilityBin, reliability_bins
from .policy import PolicyState


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_summary(summary: dict, path: Path) -> None:
    _write_tsv(path, ["key", "value"], [[k, v] for k, v in summary.items()])


def write_batches(report: AdaptationReport, path: Path) -> None:
    keys: list[str] = []
    for rec in report.batch_records:
        for k in rec:
            if k not in keys:
                keys.append(k)
    rows = [[rec.get(k, "") for k in keys] for rec in report.batch_records]
    _write_tsv(path, keys, rows)


def write_reliability(bins: list[ReliabilityBin], path: Path) -> None:
    _write_tsv(
        path,
        ["bin_low", "bin_high", "count", "mean_confidence", "accuracy"],
        [[b.bin_low, b.bin_high, b.count, b.mean_confidence, b.accuracy] for b in bins],
    )


def reliability_diagram(
    bins: list[ReliabilityBin], path: Path, title: str = "reliability"
) -> None:
    lows = [b.bin_low for b in bins]
    width = bins[0].bin_high - bins[0].bin_low if bins else 0.1
    accs = [b.accuracy for b in bins]
    confs = [b.mean_confidence for b in bins]
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.bar(lows, accs, width=width, align="edge", color="#4878b0", edgecolor="white", label="accuracy")
    ax.plot(
        [lows[0], lows[-1] + width] if bins else [0, 1],
        [lows[0], lows[-1] + width] if bins else [0, 1],
        "k--",
        linewidth=1,
        label="perfect",
    )
    ax.plot([l + width / 2 for l in lows], confs, "r.-", markersize=4, label="confidence")
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_policy_history(report: AdaptationReport, policy: PolicyState, path: Path) -> None:
    header = ["epoch", "index", "subpolicy", "prob", "samples"] + [
        f"mag{j}" for j in range(policy.num_ops)
    ]
    rows = []
    for snap in report.policy_history:
        for i, sub in enumerate(policy.subpolicies):
            rows.append(
                [snap["epoch"], i, sub.name, snap["probs"][i], snap["sample_counts"][i]]
                + list(snap["mags"][i])
            )
    _write_tsv(path, header, rows)


def policy_probability_figure(
    report: AdaptationReport, policy: PolicyState, path: Path, top_k: int = 10
) -> None:
    if not report.policy_history:
        return
    final = np.asarray(report.policy_history[-1]["probs"])
    order = np.argsort(-final)[:top_k]
    names = [policy.subpolicies[i].name for i in order]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for i in order:
        series = [snap["probs"][i] for snap in report.policy_history]
        ax.plot(range(len(series)), series, marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("sampling probability")
    ax.set_title("top sub-policies")
    ax.legend(names, fontsize=6, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_figure(report: AdaptationReport, path: Path) -> None:
    keys = [k for k in ("loss", "loss_pl", "loss_kd", "loss_aug") if any(k in r for r in report.batch_records)]
    if not keys:
        return
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for k in keys:
        series = [r[k] for r in report.batch_records if k in r]
        ax.plot(series, label=k, linewidth=1)
    ax.set_xlabel("batch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(
    report: AdaptationReport,
    out_dir,
    policy: PolicyState | None = None,
    num_bins: int = 10,
    diagram_range: tuple[float, float] = (0.0, 1.0),
) -> dict:
    """Write all artifacts for a finished run; returns the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = report.summary(num_bins=num_bins)
    write_summary(summary, out / "summary.tsv")
    write_batches(report, out / "batches.tsv")
    np.save(out / "probs.npy", report.probs)
    if report.labels is not None:
        bins = reliability_bins(report.probs, report.labels, num_bins=num_bins, conf_range=diagram_range)
        write_reliability(bins, out / "reliability_bins.tsv")
        reliability_diagram(bins, out / "reliability_diagram.png", title=f"{report.method} ({report.protocol})")
    if policy is not None and report.policy_history:
        write_policy_history(report, policy, out / "policy_history.tsv")
        policy_probability_figure(report, policy, out / "policy_probs.png")
    loss_figure(report, out / "losses.png")
    return summary
