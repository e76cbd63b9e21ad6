"""Report figures rendered to files next to the delimited outputs.

Pure file writers: every function takes already-computed report data and a
destination path, renders with the Agg backend, and returns the path.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .analysis import CostReport, group_totals
from .metrics import MetricsReport


def training_curves_figure(records: list, path: str) -> str:
    epochs = [r["epoch"] for r in records]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r["train_loss"] for r in records], marker="o", color="tab:red")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("Training loss")
    ax_loss.grid(True, alpha=0.3)
    for key, label in (("val_oa", "OA"), ("val_mean_f1", "mean F1"), ("val_fwiou", "fwIoU")):
        ax_val.plot(epochs, [r[key] for r in records], marker=".", label=label)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation score")
    ax_val.set_ylim(0.0, 1.05)
    ax_val.set_title("Validation metrics")
    ax_val.legend()
    ax_val.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cost_breakdown_figure(report: CostReport, path: str) -> str:
    groups = group_totals(report)
    names = [g for g, _, _ in groups]
    params = [p / 1e6 for _, p, _ in groups]
    flops = [f / 1e9 for _, _, f in groups]
    pos = np.arange(len(names))
    fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(11, 0.5 * len(names) + 2.5))
    ax_p.barh(pos, params, color="tab:blue")
    ax_p.set_yticks(pos, names)
    ax_p.invert_yaxis()
    ax_p.set_xlabel("parameters (M)")
    ax_p.set_title(f"Parameters, total {report.total_params / 1e6:.2f} M")
    ax_f.barh(pos, flops, color="tab:orange")
    ax_f.set_yticks(pos, names)
    ax_f.invert_yaxis()
    ax_f.set_xlabel("FLOPs (G)")
    ax_f.set_title(f"FLOPs, total {report.total_flops / 1e9:.2f} G "
                   f"(mac_factor {report.conventions.mac_factor})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def confusion_figure(report: MetricsReport, path: str, class_names: list = None) -> str:
    counts = np.asarray(report.confusion.counts, dtype=np.float64)
    n = counts.shape[0]
    names = class_names or [f"class{i}" for i in range(n)]
    rows = counts.sum(axis=1, keepdims=True)
    shares = np.divide(counts, rows, out=np.zeros_like(counts), where=rows > 0)
    fig, ax = plt.subplots(figsize=(1.0 * n + 2.5, 1.0 * n + 2))
    im = ax.imshow(shares, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n), names, rotation=45, ha="right")
    ax.set_yticks(range(n), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"Row-normalized confusion (OA {report.oa:.3f}, fwIoU {report.fwiou:.3f})")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, f"{int(counts[i, j])}", ha="center", va="center",
                    color="white" if shares[i, j] > 0.5 else "black", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def ablation_figure(fold_rows: list, path: str) -> str:
    """fold_rows: dicts with fold, mp_fwiou, fcn_fwiou (fractions)."""
    folds = [str(r["fold"]) for r in fold_rows]
    mp = [100.0 * r["mp_fwiou"] for r in fold_rows]
    fcn = [100.0 * r["fcn_fwiou"] for r in fold_rows]
    pos = np.arange(len(folds))
    width = 0.38
    fig, ax = plt.subplots(figsize=(1.2 * len(folds) + 4, 4.5))
    ax.bar(pos - width / 2, fcn, width, label="fcn_baseline", color="tab:gray")
    ax.bar(pos + width / 2, mp, width, label="mp_resnet", color="tab:green")
    for i, (a, b) in enumerate(zip(fcn, mp)):
        ax.annotate(f"{b - a:+.2f}", (pos[i], max(a, b) + 0.5), ha="center", fontsize=9)
    ax.set_xticks(pos, [f"fold {f}" for f in folds])
    ax.set_ylabel("validation fwIoU (%)")
    mean_delta = np.mean([m - f for m, f in zip(mp, fcn)])
    ax.set_title(f"Per-fold validation fwIoU (mean delta {mean_delta:+.2f} pp)")
    ax.legend()
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
