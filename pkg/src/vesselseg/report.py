"""Evaluation reports: CSV, aligned text tables, overlay and curve figures.

Figures are rendered headless to files next to the delimited output; the
overlay sheets show input / label / probability / mask side by side for the
best and worst slice of each stack ranked by in-plane average Hausdorff
distance.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import metrics as mx
from .metrics import METRIC_NAMES, MetricsReport


def write_metrics_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stack"] + list(METRIC_NAMES))
        for sid, vals in report.rows():
            w.writerow([sid] + [f"{vals[m]:.6g}" for m in METRIC_NAMES])
        w.writerow(["Mean"] + [f"{report.mean(m):.6g}" for m in METRIC_NAMES])
        w.writerow(["SD"] + [f"{report.sd(m):.6g}" for m in METRIC_NAMES])


def read_metrics_csv(path) -> MetricsReport:
    report = MetricsReport()
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0][1:]
    for row in rows[1:]:
        if row[0] in ("Mean", "SD"):
            continue
        vals = {m.lower(): float(v) for m, v in zip(header, row[1:])}
        report.add(row[0], **vals)
    return report


def format_table(report: MetricsReport, title: str = "Per-stack segmentation metrics") -> str:
    """Aligned text table: metrics as rows, stacks as columns, mean/SD last."""
    ids = [str(s) for s in report.stack_ids]
    cols = ids + ["Mean", "SD"]
    width = max(8, max((len(c) for c in cols), default=8) + 2)
    head = "Metric".ljust(9) + "".join(c.rjust(width) for c in cols)
    lines = [title, "=" * len(head), head, "-" * len(head)]
    for m in METRIC_NAMES:
        cells = [f"{v:.2f}".rjust(width) for v in report.values[m]]
        cells += [f"{report.mean(m):.2f}".rjust(width), f"{report.sd(m):.2f}".rjust(width)]
        lines.append(m.ljust(9) + "".join(cells))
    lines.append("-" * len(head))
    return "\n".join(lines) + "\n"


def per_slice_avd(mask: np.ndarray, truth: np.ndarray):
    """In-plane AVD per z slice; None where the metric is undefined."""
    out = []
    for z in range(mask.shape[0]):
        try:
            out.append(mx.average_hausdorff(mask[z][None], truth[z][None]))
        except mx.MetricUndefinedError:
            out.append(None)
    return out


def best_worst_slices(mask: np.ndarray, truth: np.ndarray):
    """(best_z, worst_z) by per-slice AVD; None when no slice is scoreable."""
    scores = [(avd, z) for z, avd in enumerate(per_slice_avd(mask, truth)) if avd is not None]
    if not scores:
        return None, None
    return min(scores)[1], max(scores)[1]


def render_overlay(path, image, label, prob, mask, z: int, title: str = "") -> None:
    """Four-panel sheet for one slice: input, label, network output, mask."""
    panels = [
        (image[z], "gray", "Input"),
        (label[z], "gray", "Label"),
        (prob[z], "magma", "Output"),
        (mask[z], "gray", "Mask"),
    ]
    fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
    for ax, (img, cmap, name) in zip(axes, panels):
        ax.imshow(np.asarray(img), cmap=cmap, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_stack_overlays(out_dir, stack_id, image, label, prob, mask) -> list:
    """Best and worst slice sheets for one stack; returns written paths."""
    out_dir = Path(out_dir)
    best, worst = best_worst_slices(mask, label)
    if best is None:
        best, worst = 0, mask.shape[0] - 1  # nothing scoreable: show the ends
    written = []
    for tag, z in (("best", best), ("worst", worst)):
        p = out_dir / f"stack{stack_id}_{tag}_z{z:02d}.png"
        render_overlay(p, image, label, prob, mask, z, f"Stack {stack_id}: {tag} slice (z={z})")
        written.append(p)
    return written


def render_training_curves(path, rows) -> None:
    """ERR / CLS monitor curves for train and test splits."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for split, color in (("train", "tab:blue"), ("test", "tab:orange")):
        sel = [r for r in rows if r["split"] == split]
        if not sel:
            continue
        k = [r["update"] for r in sel]
        axes[0].plot(k, [r["err"] for r in sel], color=color, label=split)
        axes[1].plot(k, [r["cls"] for r in sel], color=color, label=split)
    axes[0].set_ylabel("ERR (weighted cross-entropy)")
    axes[1].set_ylabel("CLS (argmax error)")
    axes[1].set_xlabel("update")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_log_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["update", "split", "err", "cls"])
        for r in rows:
            w.writerow([r["update"], r["split"], f"{r['err']:.8g}", f"{r['cls']:.8g}"])


def read_log_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [
        {"update": int(r["update"]), "split": r["split"],
         "err": float(r["err"]), "cls": float(r["cls"])}
        for r in rows
    ]
