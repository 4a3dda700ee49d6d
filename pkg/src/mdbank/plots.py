"""Figure rendering for training curves, PR curves, sweeps, and embeddings."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CLASS_COLORS = {0: "0.6", 1: "tab:red", 2: "tab:green", 3: "tab:blue"}


def plot_training_curves(metrics_path: str | Path, out_path: str | Path) -> Path:
    steps, l_det, l_mt, l_adv, l_total = [], [], [], [], []
    with open(metrics_path) as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["step"])
            l_det.append(rec["l_det"])
            l_mt.append(rec["l_mt"])
            l_adv.append(rec["l_adv"])
            l_total.append(rec["l_total"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, l_total, label="l_total", lw=0.8)
    ax.plot(steps, l_det, label="l_det", lw=0.8)
    ax.plot(steps, l_mt, label="l_mt", lw=0.8)
    ax.plot(steps, l_adv, label="l_adv", lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_pr_curves(report: dict, out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for class_id, curve in sorted(report.get("curves", {}).items(), key=lambda kv: int(kv[0])):
        ap = report["per_class_ap"][str(class_id)]
        ax.plot(
            curve["recall"],
            curve["precision"],
            label=f"class {class_id} (AP {ap:.3f})",
            color=CLASS_COLORS.get(int(class_id) % 4),
        )
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(f"mAP {report['map']:.3f}")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_sweep(curve: dict, out_path: str | Path) -> Path:
    points = sorted(curve["points"], key=lambda p: p["value"])
    values = [p["value"] for p in points]
    maps = [p["map"] for p in points]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, maps, marker="o")
    if min(values) > 0:
        ax.set_xscale("log")
    ax.set_xlabel(curve["param"])
    ax.set_ylabel("target mAP")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_embeddings(rows: list[dict], out_path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 6))
    for domain, marker in (("source", "o"), ("target", "^")):
        for class_id in sorted({r["class_id"] for r in rows}):
            pts = [(r["x"], r["y"]) for r in rows if r["domain"] == domain and r["class_id"] == class_id]
            if not pts:
                continue
            xs, ys = zip(*pts)
            ax.scatter(
                xs, ys, s=12, marker=marker, alpha=0.6,
                color=CLASS_COLORS.get(class_id % 4),
                label=f"{domain} c{class_id}",
            )
    ax.set_xticks([])
    ax.set_yticks([])
    ax.legend(fontsize=7, markerscale=1.2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
