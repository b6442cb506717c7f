"""Report figures. Rendered off-screen to files; nothing here opens a window."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 120,
}


def _save(fig, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_sweep(table, path):
    """Precision and recall against threshold, with fp/hour on a twin axis."""
    rows = sorted(table.rows, key=lambda r: r.threshold)
    th = [r.threshold for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.plot(th, [r.precision for r in rows], marker="o", label="precision")
        ax.plot(th, [r.recall for r in rows], marker="s", label="recall")
        ax.axhline(table.precision_min, color="0.6", ls=":", lw=0.8)
        ax.axhline(table.recall_min, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel("threshold")
        ax.set_ylabel("rate")
        ax.set_ylim(-0.02, 1.02)
        ax2 = ax.twinx()
        ax2.plot(th, [r.fp_per_hour for r in rows], color="tab:red", alpha=0.6, marker="x", label="FP/hour")
        ax2.set_ylabel("FP/hour")
        ax2.spines["right"].set_visible(True)
        lines = ax.get_lines()[:2] + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="lower left")
        gate = "met" if table.gate_satisfied else "not met"
        ax.set_title(f"threshold sweep (gate {gate})")
        return _save(fig, path)


def plot_queues(stats, path):
    """High-water mark per stage, plus drops when strict mode lost anything."""
    stages = list(stats.high_water)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        x = range(len(stages))
        ax.bar([i - 0.2 for i in x], [stats.high_water[s] for s in stages], width=0.4, label="high water")
        ax.bar([i + 0.2 for i in x], [stats.drops[s] for s in stages], width=0.4, label="drops")
        ax.set_xticks(list(x))
        ax.set_xticklabels(stages)
        ax.set_ylabel("items")
        ax.set_title(f"queues (drain {stats.drain_seconds * 1000:.1f} ms)")
        ax.legend()
        return _save(fig, path)


def plot_latency(summary, path):
    """Mean predict latency per class from a ``LatencyRecorder.summary()``."""
    labels = list(summary)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.bar(labels, [summary[k]["mean_us"] for k in labels], color="tab:gray")
        for i, k in enumerate(labels):
            ax.annotate(f"n={summary[k]['calls']}", (i, summary[k]["mean_us"]), ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("mean latency (us)")
        ax.set_title("inference latency")
        return _save(fig, path)
