"""Figure rendering for evaluation and training outputs."""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ParameterError


def save_roc_png(roc_points, out_path: str, title: str = "ROC") -> str:
    """Plot (FAR, VR) sweep points as a step curve."""
    if not roc_points:
        raise ParameterError("no ROC points to plot")
    fars = [p[0] for p in roc_points]
    vrs = [p[1] for p in roc_points]
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.step(fars, vrs, where="post", color="tab:blue")
    ax.plot(fars, vrs, ".", color="tab:blue", markersize=3)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("verification rate")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlim(0, 1.05)
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def read_train_log(log_path: str) -> list[dict]:
    """Rows of a training log TSV, numeric fields parsed ("-" stays a string)."""
    rows = []
    with open(log_path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            rows.append(row)
    return rows


def save_loss_png(log_path: str, out_path: str) -> str:
    """Plot per-epoch mean loss from the trainer's TSV log, one line per stage."""
    rows = [r for r in read_train_log(log_path) if r.get("batch") == "epoch"]
    if not rows:
        raise ParameterError(f"{log_path}: no epoch summary rows to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    stages = []
    for r in rows:
        if r["stage"] not in stages:
            stages.append(r["stage"])
    for stage in stages:
        xs = [int(r["step"]) for r in rows if r["stage"] == stage]
        ys = [float(r["loss"]) for r in rows if r["stage"] == stage]
        ax.plot(xs, ys, marker="o", markersize=3, label=f"stage {stage}")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("mean epoch loss")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
