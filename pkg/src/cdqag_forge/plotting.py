"""Figure rendering for dataset statistics and evaluation reports.

Figures are written as PNG files next to the delimited output; headless
backend, no interactive display.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import EvalReport
from .triplet_engine import RATIO_BUCKETS, StatsReport


def _bar(ax, labels, values, title, rotate=45):
    ax.bar(range(len(labels)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=rotate, ha="right", fontsize=8)
    ax.set_title(title)
    ax.grid(axis="y", alpha=0.3)


def save_stats_figures(stats: StatsReport, outdir: str | Path) -> list[Path]:
    """Answer frequencies, question-type distribution, mask-area deciles."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(8, 4))
    items = sorted(stats.answer_freq.items(), key=lambda kv: -kv[1])
    _bar(ax, [k for k, _ in items], [v for _, v in items], "Answer frequency")
    path = outdir / "answer_frequency.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    _bar(
        ax,
        list(stats.type_counts),
        list(stats.type_counts.values()),
        "Question type distribution",
        rotate=0,
    )
    path = outdir / "question_types.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(7, 4))
    _bar(
        ax,
        list(RATIO_BUCKETS),
        [stats.area_ratio_hist[b] for b in RATIO_BUCKETS],
        "Mask area ratio (deciles)",
    )
    path = outdir / "mask_area_ratio.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written


def save_eval_figures(report: EvalReport, outdir: str | Path) -> list[Path]:
    """Grouped per-type accuracy / mIoU / oIoU bars."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    names = list(report.per_type)
    acc = [report.per_type[n].accuracy for n in names]
    miou = [report.per_type[n].miou for n in names]
    oiou = [report.per_type[n].oiou for n in names]
    x = range(len(names))
    width = 0.27
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar([i - width for i in x], acc, width, label="accuracy", color="#4878a8")
    ax.bar(list(x), miou, width, label="mIoU", color="#e49444")
    ax.bar([i + width for i in x], oiou, width, label="oIoU", color="#6a9f58")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    ax.set_title(
        f"Per-type scores (AA={report.aa:.3f} OA={report.oa:.3f} "
        f"mIoU={report.miou:.3f} oIoU={report.oiou:.3f})"
    )
    path = Path(outdir) / "per_type_scores.png"
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def stats_to_csv(stats: StatsReport) -> str:
    rows = ["section,key,value"]
    rows.append(f"summary,n_triplets,{stats.n_triplets}")
    rows.append(f"summary,n_pairs,{stats.n_pairs}")
    rows.append(f"summary,word_len_mean,{stats.word_len_mean:.4f}")
    rows.append(f"summary,word_len_min,{stats.word_len_min}")
    rows.append(f"summary,word_len_max,{stats.word_len_max}")
    for key, val in stats.answer_freq.items():
        rows.append(f"answer_freq,{key},{val}")
    for key, val in stats.type_counts.items():
        rows.append(f"type_counts,{key},{val}")
    for key, val in stats.area_ratio_hist.items():
        rows.append(f"area_ratio_hist,{key},{val}")
    return "\n".join(rows) + "\n"
