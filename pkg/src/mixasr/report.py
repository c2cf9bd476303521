"""Delimited reports, summary tables, and figure rendering.

All writers are deterministic: fixed column orders, LF line endings, repr-style
float formatting, and PNG output stripped of software metadata so identical
inputs produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .metrics import EvalResult
from .objectives import CodebookStats

FIGURE_DPI = 120


def format_cell(value) -> str:
    """Stable text form for a delimited cell."""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_delimited(
    path: str | Path, header: Sequence[str], rows: Iterable[Sequence], delimiter: str = "\t"
) -> None:
    """Write a header plus rows as delimiter-separated text."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(delimiter.join(header) + "\n")
        for row in rows:
            if len(row) != len(header):
                raise DataError(f"row width {len(row)} does not match header width {len(header)}")
            fh.write(delimiter.join(format_cell(cell) for cell in row) + "\n")


def save_figure(fig, path: str | Path) -> None:
    """Render a figure to PNG without volatile metadata, then release it."""
    fig.savefig(Path(path), format="png", dpi=FIGURE_DPI, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------
# report content
# ---------------------------------------------------------------------------


def wer_summary(result: EvalResult) -> str:
    """Human-readable WER breakdown table."""
    lines = [
        "metric            value",
        "----------------  ---------",
        f"wer               {result.wer:.2f}%",
        f"substitutions     {result.substitutions}",
        f"insertions        {result.insertions}",
        f"deletions         {result.deletions}",
        f"hits              {result.hits}",
        f"reference words   {result.ref_words}",
        f"hypothesis words  {result.hyp_words}",
        f"utterances        {result.num_utterances}",
    ]
    return "\n".join(lines) + "\n"


def wer_figure(result: EvalResult):
    """Bar chart of the pooled edit-operation counts."""
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    labels = ["hits", "substitutions", "insertions", "deletions"]
    counts = [result.hits, result.substitutions, result.insertions, result.deletions]
    ax.bar(labels, counts, color=["#4c9f70", "#c25b56", "#c2a14d", "#7a6fb3"])
    ax.set_ylabel("word count")
    ax.set_title(f"word error rate {result.wer:.2f}%")
    for idx, count in enumerate(counts):
        ax.text(idx, count, str(count), ha="center", va="bottom", fontsize=9)
    fig.tight_layout()
    return fig


def usage_figure(stats: CodebookStats):
    """Per-group codeword histograms with effective-usage annotations."""
    n_groups = len(stats.histograms)
    fig, axes = plt.subplots(n_groups, 1, figsize=(6.0, 2.2 * n_groups), squeeze=False)
    for g in range(n_groups):
        ax = axes[g][0]
        hist = stats.histograms[g]
        ax.bar(np.arange(len(hist)), hist, color="#5b7fb3")
        ax.set_ylabel(f"group {g}")
        ax.set_title(
            f"effective usage {stats.effective_usage[g]:.2f} of {len(hist)}", fontsize=9
        )
    axes[-1][0].set_xlabel("codeword index")
    fig.tight_layout()
    return fig


def projection_figure(points: np.ndarray, domains: Sequence[str]):
    """2-D scatter of projected code vectors, colored by domain."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 2:
        raise DataError(f"expected [n, >=2] projections, got {points.shape}")
    if len(domains) != len(points):
        raise DataError(f"got {len(points)} points but {len(domains)} domain labels")
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"]
    for idx, domain in enumerate(sorted(set(domains))):
        sel = np.array([d == domain for d in domains])
        ax.scatter(
            points[sel, 0], points[sel, 1], s=6, alpha=0.6,
            color=palette[idx % len(palette)], label=domain, linewidths=0,
        )
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(frameon=False, markerscale=2)
    fig.tight_layout()
    return fig


def training_figure(records: Sequence[Mapping]):
    """Loss-component curves over optimizer steps from a training log.

    Per-step records are flat loss dictionaries; evaluation records carry an
    ``event`` marker and a dev-set loss.
    """
    steps = [r for r in records if "event" not in r and "total" in r]
    if not steps:
        raise DataError("no step records in the training log")
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    for key, color in (("total", "#333333"), ("ctc", "#4c72b0"),
                       ("ss_src", "#55a868"), ("ss_tgt", "#dd8452")):
        values = [(r["step"], r[key]) for r in steps if key in r]
        if values:
            ax.plot([v[0] for v in values], [v[1] for v in values],
                    label=key, color=color, linewidth=1.0)
    evals = [(r["step"], r["dev_ctc"]) for r in records if r.get("event") == "eval"]
    if evals:
        ax.plot([e[0] for e in evals], [e[1] for e in evals],
                label="dev ctc", color="#c44e52", linewidth=1.4, linestyle="--")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return fig
