"""Delimited-output and figure rendering for the report paths.

Figures are rendered with the Agg backend into in-memory buffers and
written atomically; PNG metadata is pinned so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import io
import math
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .artifacts import atomic_write_bytes
from .assessment import SelectionResult
from .metrics import MetricReport

_PNG_METADATA = {"Software": "retouch"}


def _finite_or_nan(value) -> float:
    if value is None:
        return math.nan
    if isinstance(value, float) and math.isinf(value):
        return math.nan
    return float(value)


def write_metrics_csv(reports: Sequence[MetricReport], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["variant", "index", "image_path", "ssim", "psnr", "mse", "chosen",
         "no_match", "error"]
    )
    for report in reports:
        for row in report.rows:
            writer.writerow([
                report.variant, row.index, row.image_path,
                row.ssim, row.psnr, row.mse, row.chosen,
                int(row.no_match), row.error or "",
            ])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def render_metrics_figure(reports: Sequence[MetricReport], path) -> None:
    """Bar chart of per-variant metric means (infinite PSNR plotted as a gap)."""
    names = [r.variant for r in reports]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2))
    for ax, metric, label in zip(axes, ("ssim", "psnr", "mse"), ("SSIM", "PSNR (dB)", "MSE")):
        values = [_finite_or_nan(r.mean(metric)) for r in reports]
        ax.bar(range(len(names)), values, color="#4878cf")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.set_title(label, fontsize=10)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle("Selected-output fidelity vs original, per assessment variant", fontsize=10)
    fig.tight_layout()
    _save_figure(fig, path)


def write_scores_csv(selection: SelectionResult, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["proposal", "cma", "iqa", "combined", "chosen"])
    for s in selection.scores:
        writer.writerow([
            s.proposal_index, s.cma, s.iqa, s.combined,
            int(s.proposal_index == selection.chosen),
        ])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def render_scores_figure(selection: SelectionResult, path) -> None:
    """Grouped bars of per-proposal scores with the chosen proposal flagged."""
    idx = [s.proposal_index for s in selection.scores]
    x = range(len(idx))
    width = 0.27
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar([i - width for i in x], [s.cma for s in selection.scores],
           width, label="alignment", color="#4878cf")
    ax.bar(x, [s.iqa for s in selection.scores],
           width, label="fidelity penalty", color="#d65f5f")
    ax.bar([i + width for i in x], [s.combined for s in selection.scores],
           width, label="combined", color="#6acc65")
    ax.set_xticks(list(x))
    ax.set_xticklabels([
        f"P{k}*" if k == selection.chosen else f"P{k}" for k in idx
    ])
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend(fontsize=8)
    ax.set_title("Proposal assessment (chosen marked *)", fontsize=10)
    fig.tight_layout()
    _save_figure(fig, path)


def _save_figure(fig, path) -> None:
    buf = io.BytesIO()
    try:
        fig.savefig(buf, format="png", dpi=110, metadata=_PNG_METADATA)
    finally:
        plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
