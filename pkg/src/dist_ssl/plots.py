"""Static figures for run directories and timelines (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from dist_ssl.clipset import PhaseBand  # noqa: E402
from dist_ssl.evaluation import PhaseTimeline  # noqa: E402

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


def _colour(k: int):
    return plt.get_cmap("tab10")(k % 10)


def plot_timeline(
    path: str | Path,
    timeline: PhaseTimeline,
    bands: Sequence[PhaseBand] | None = None,
    num_classes: int | None = None,
) -> Path:
    """Colour bands: ground-truth phases (if given) above the predicted windows."""
    rows = [("predicted", [(w.start_s, w.end_s, w.label) for w in timeline.windows])]
    if bands:
        rows.insert(0, ("oracle", [(b.start_s, b.end_s, b.label) for b in bands]))
    fig, ax = plt.subplots(figsize=(8, 0.6 + 0.5 * len(rows)))
    for i, (_, spans) in enumerate(reversed(rows)):
        for start, end, k in spans:
            ax.broken_barh([(start, end - start)], (i + 0.1, 0.8), facecolors=_colour(k),
                           edgecolor="white", linewidth=0.5)
    ax.set_yticks([i + 0.5 for i in range(len(rows))])
    ax.set_yticklabels([name for name, _ in reversed(rows)])
    ax.set_xlim(0, timeline.duration_s)
    ax.set_xlabel("time (s)")
    classes = num_classes or 1 + max(k for _, spans in rows for *_, k in spans)
    ax.legend(handles=[Patch(color=_colour(k), label=f"class {k}") for k in range(classes)],
              loc="upper center", bbox_to_anchor=(0.5, -0.6), ncol=classes, frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def plot_audit(path: str | Path, audits: dict[str, dict]) -> Path:
    """Correct and incorrect retained pseudo-labels per stage and variant."""
    names = list(audits)
    correct = [audits[n]["correct_retained"] for n in names]
    wrong = [audits[n]["incorrect_retained"] for n in names]
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.2))
    ax.bar(names, correct, color="#4c9f70", label="correct")
    ax.bar(names, wrong, bottom=correct, color="#d1495b", label="incorrect")
    ax.set_ylabel("retained pseudo-labels")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)


def plot_accuracy(path: str | Path, accuracy: dict[str, float]) -> Path:
    names = list(accuracy)
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(names), 3.0))
    ax.bar(names, [100 * accuracy[n] for n in names], color="#3c6e9f")
    ax.set_ylabel("test accuracy (%)")
    low = min(100 * v for v in accuracy.values())
    ax.set_ylim(max(0.0, low - 10), 100)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return Path(path)
