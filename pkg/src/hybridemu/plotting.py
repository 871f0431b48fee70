"""Figures for the report command. Rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .replay import EmulationReport  # noqa: E402

COLORS = {"fwd": "#4c72b0", "bwd": "#dd8452", "optim": "#55a868", "comm": "#8c8c8c"}


def _color(label: str) -> str:
    base = label.split(":", 1)[0].split(".", 1)[0]
    return COLORS.get(base, COLORS["comm"])


def gantt(report: EmulationReport, path: str | Path, max_ranks: int = 32) -> Path:
    """One row per rank, one bar per node, time in milliseconds."""
    ranks = sorted(set(report.node_rank.values()))[:max_ranks]
    rows = {r: i for i, r in enumerate(ranks)}
    fig, ax = plt.subplots(figsize=(10, 0.3 * len(ranks) + 1.5))
    bars: dict[str, list] = {}
    for nid, (s, d) in report.node_times.items():
        r = report.node_rank[nid]
        if r not in rows:
            continue
        c = _color(report.node_label[nid])
        bars.setdefault(c, []).append((rows[r], s / 1e6, d / 1e6))
    for c, items in bars.items():
        for row, s, d in items:
            ax.broken_barh([(s, d)], (row - 0.4, 0.8), facecolors=c, linewidth=0)
    ax.set_yticks(range(len(ranks)))
    ax.set_yticklabels([str(r) for r in ranks])
    ax.invert_yaxis()
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("rank")
    handles = [plt.Rectangle((0, 0), 1, 1, color=c) for c in COLORS.values()]
    ax.legend(handles, list(COLORS), loc="upper right", fontsize=7, ncol=4)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def memory_plot(report: EmulationReport, path: str | Path) -> Path:
    """Step plot of allocated bytes for each sandbox rank."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    for r in sorted(report.timelines):
        pts = report.timelines[r]
        if not pts:
            continue
        ax.step([t / 1e6 for t, _ in pts], [b / 2**30 for _, b in pts], where="post", label=f"rank {r}")
    ax.set_xlabel("time (ms)")
    ax.set_ylabel("allocated (GiB)")
    if report.timelines:
        ax.legend(fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
