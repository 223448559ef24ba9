"""Learning-curve rendering: one vector-graphics file per metric.

Runs sharing a label (multiple seeds) are drawn as a median line with a
min-max band; single runs are plain lines. Every chart gets a companion
aggregate CSV on the same grid.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .training import MetricsRow

log = logging.getLogger(__name__)

PLOT_METRICS = ("success_rate", "per_step_reward")
_METRIC_LABELS = {
    "success_rate": "evaluation success rate",
    "per_step_reward": "train per-step env reward",
}


def _series(rows: list[MetricsRow], metric: str) -> tuple[np.ndarray, np.ndarray]:
    x = np.array([row.env_steps for row in rows], dtype=np.float64)
    y = np.array([getattr(row, metric) for row in rows], dtype=np.float64)
    keep = ~np.isnan(y)
    return x[keep], y[keep]


def emit_plots(
    runs: list[tuple[str, list[MetricsRow]]],
    out_dir,
    metrics: tuple[str, ...] = PLOT_METRICS,
) -> list[Path]:
    """Render one SVG per metric (plus an aggregate CSV); returns chart paths.

    ``runs`` is a list of (label, metrics rows); runs with equal labels are
    aggregated. A metric that is empty across all runs is skipped with a
    warning instead of producing an empty chart.
    """
    if not runs:
        raise ValueError("need at least one metrics table")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[list[MetricsRow]]] = {}
    for label, rows in runs:
        groups.setdefault(label, []).append(rows)

    written = []
    for metric in metrics:
        series = {
            label: [_series(rows, metric) for rows in tables]
            for label, tables in groups.items()
        }
        series = {
            label: [(x, y) for x, y in pairs if len(x)] for label, pairs in series.items()
        }
        if all(not pairs for pairs in series.values()):
            log.warning("metric %r empty in every run; chart omitted", metric)
            continue

        fig, ax = plt.subplots(figsize=(7, 4.5))
        csv_rows: list[dict] = []
        for label, pairs in sorted(series.items()):
            if not pairs:
                continue
            if len(pairs) == 1:
                x, y = pairs[0]
                ax.plot(x, y, label=label)
                for xi, yi in zip(x, y):
                    csv_rows.append({"label": label, "env_steps": xi, "median": yi,
                                     "min": yi, "max": yi})
            else:
                grid = np.unique(np.concatenate([x for x, _ in pairs]))
                stacked = np.stack([np.interp(grid, x, y) for x, y in pairs])
                med = np.median(stacked, axis=0)
                lo = stacked.min(axis=0)
                hi = stacked.max(axis=0)
                (line,) = ax.plot(grid, med, label=f"{label} (median of {len(pairs)})")
                ax.fill_between(grid, lo, hi, alpha=0.2, color=line.get_color())
                for xi, mi, li, hi_i in zip(grid, med, lo, hi):
                    csv_rows.append({"label": label, "env_steps": xi, "median": mi,
                                     "min": li, "max": hi_i})
        ax.set_xlabel("environment steps")
        ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        chart_path = out_dir / f"{metric}.svg"
        fig.savefig(chart_path)
        plt.close(fig)
        written.append(chart_path)

        with open(out_dir / f"{metric}_aggregate.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["label", "env_steps", "median", "min", "max"])
            writer.writeheader()
            for row in csv_rows:
                writer.writerow(row)
    return written
