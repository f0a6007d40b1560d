"""Static plot files for runs, evaluations, and the bound probe."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import PRECISION_THRESHOLDS, MetricsReport  # noqa: E402


def plot_run(run_dir: Path) -> Path:
    """Loss curves per stage plus validation mIoU, from metrics.jsonl."""
    run_dir = Path(run_dir)
    records = [json.loads(line) for line in
               (run_dir / "metrics.jsonl").read_text(encoding="utf-8").splitlines() if line]
    fig, (ax_loss, ax_miou) = plt.subplots(1, 2, figsize=(10, 4))
    for stage, key, label in ((1, "train_loss", "stage 1"), (2, "weak_loss", "stage 2"),
                              (3, "train_loss", "stage 3")):
        ys = [r[key] for r in records if r.get("stage") == stage and key in r]
        if ys:
            ax_loss.plot(range(len(ys)), ys, label=label)
    ax_loss.set_xlabel("epoch (within stage)")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    miou = [(i, r["val_student"]["mIoU"]) for i, r in enumerate(records)
            if "val_student" in r]
    if miou:
        ax_miou.plot([m[0] for m in miou], [m[1] for m in miou], label="student")
    tmiou = [(i, r["val_teacher"]["mIoU"]) for i, r in enumerate(records)
             if "val_teacher" in r]
    if tmiou:
        ax_miou.plot([m[0] for m in tmiou], [m[1] for m in tmiou], label="teacher")
    ax_miou.set_xlabel("logged epoch")
    ax_miou.set_ylabel("val mIoU (%)")
    ax_miou.legend()
    fig.tight_layout()
    out = run_dir / "curves.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_metrics_bars(report: MetricsReport, out: Path) -> Path:
    labels = [f"P@{x}" for x in PRECISION_THRESHOLDS] + ["oIoU", "mIoU"]
    values = [report.precision[x] for x in PRECISION_THRESHOLDS] + [report.oiou, report.miou]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values)
    ax.set_ylabel("percent")
    ax.set_ylim(0, 100)
    ax.set_title(report.split)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)


def plot_bound_probe(report, out: Path) -> Path:
    by_q: dict[float, list[float]] = {}
    eps_by_q: dict[float, list[float]] = {}
    for cell in report.cells:
        by_q.setdefault(cell["q"], []).append(cell["gap"])
        eps_by_q.setdefault(cell["q"], []).append(cell["eps_hat"])
    qs = sorted(by_q)
    fig, (ax_gap, ax_eps) = plt.subplots(1, 2, figsize=(10, 4))
    gap_means = [sum(by_q[q]) / len(by_q[q]) for q in qs]
    ax_gap.plot(qs, gap_means, marker="o")
    ax_gap.set_xlabel("corruption q")
    ax_gap.set_ylabel("mean risk gap")
    eps_means = [sum(eps_by_q[q]) / len(eps_by_q[q]) for q in qs]
    ax_eps.plot(qs, eps_means, marker="o", color="tab:orange")
    ax_eps.set_xlabel("corruption q")
    ax_eps.set_ylabel("mean approximation error")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return Path(out)
