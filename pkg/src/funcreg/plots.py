"""Figure rendering for study outputs.

All figures are written as SVG next to the delimited files they visualize.
Rendering is headless (Agg) and reproducible: a fixed svg.hashsalt and a
stripped Date field keep bytes stable across runs on one machine.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "funcreg"

_SVG_META = {"Date": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def perturbation_figure(report, split: str, path) -> Path:
    """Loss and accuracy versus perturbation magnitude, one line per space."""
    spaces = sorted({r.space for r in report.records})
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for space in spaces:
        agg = sorted((a["magnitude"], a) for a in report.aggregates
                     if a["space"] == space and a["split"] == split)
        if not agg:
            continue
        mags = [m for m, _ in agg]
        ax_loss.errorbar(mags, [a["loss_mean"] for _, a in agg],
                         yerr=[a["loss_std"] for _, a in agg],
                         marker="o", capsize=2, label=space)
        ax_acc.errorbar(mags, [a["acc_mean"] for _, a in agg],
                        yerr=[a["acc_std"] for _, a in agg],
                        marker="o", capsize=2, label=space)
    base = report.baseline.get(split)
    if base is not None:
        ax_loss.axhline(base["loss"], color="gray", ls=":", lw=1)
        ax_acc.axhline(base["accuracy"], color="gray", ls=":", lw=1)
    ax_loss.set_xlabel("magnitude")
    ax_loss.set_ylabel("loss")
    ax_acc.set_xlabel("magnitude")
    ax_acc.set_ylabel("accuracy")
    ax_loss.legend(fontsize=8)
    fig.suptitle(f"perturbation response, split={split}")
    fig.tight_layout()
    return _save(fig, path)


def interpolation_figure(records, path) -> Path:
    """Accuracy and loss along the weight-interpolation path, per split."""
    splits = sorted({r.split for r in records})
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for split in splits:
        rows = sorted((r.alpha, r.acc, r.loss) for r in records
                      if r.split == split)
        alphas = [r[0] for r in rows]
        ax_acc.plot(alphas, [r[1] for r in rows], marker="o", label=split)
        ax_loss.plot(alphas, [r[2] for r in rows], marker="o", label=split)
    ax_acc.set_xlabel("alpha (0=start, 1=end)")
    ax_acc.set_ylabel("accuracy")
    ax_loss.set_xlabel("alpha (0=start, 1=end)")
    ax_loss.set_ylabel("loss")
    ax_acc.legend(fontsize=8)
    fig.suptitle("weight interpolation sweep")
    fig.tight_layout()
    return _save(fig, path)


def ablation_figure(table, path) -> Path:
    """Mean ID / OOD accuracy per variant with across-seed std bars."""
    rows = table.rows
    x = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(7.0, 3.6))
    ax.bar([i - width / 2 for i in x], [r.id_acc_mean for r in rows], width,
           yerr=[r.id_acc_std for r in rows], capsize=3, label="id_test")
    ax.bar([i + width / 2 for i in x], [r.ood_acc_mean for r in rows], width,
           yerr=[r.ood_acc_std for r in rows], capsize=3, label="ood avg")
    ax.set_xticks(list(x))
    ax.set_xticklabels([r.variant for r in rows], fontsize=9)
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=8)
    fig.suptitle("regularizer ablation")
    fig.tight_layout()
    return _save(fig, path)


def report_figure(rows, path) -> Path:
    """Grouped ID / OOD accuracy bars, one group per collected run.

    rows: list of dicts with keys run, id_acc, ood_avg (empty string when a
    run never evaluated that split family).
    """
    labels = [r["run"] for r in rows]
    ids = [r["id_acc"] if r["id_acc"] != "" else 0.0 for r in rows]
    oods = [r["ood_avg"] if r["ood_avg"] != "" else 0.0 for r in rows]
    x = range(len(rows))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(6.0, 1.3 * len(rows)), 3.8))
    ax.bar([i - width / 2 for i in x], ids, width, label="id_test")
    ax.bar([i + width / 2 for i in x], oods, width, label="ood avg")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=8, rotation=20, ha="right")
    ax.set_ylabel("final accuracy")
    ax.legend(fontsize=8)
    fig.suptitle("run comparison")
    fig.tight_layout()
    return _save(fig, path)
