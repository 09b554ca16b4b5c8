"""Test metrics, pseudo-label audits and sliding-window timeline inference."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from dist_ssl.backend import TrainedModel
from dist_ssl.clipset import ClipSet, OracleView, PhaseBand
from dist_ssl.errors import ValidationError
from dist_ssl.fileio import atomic_write_text
from dist_ssl.reliability import PseudoLabelRecord
from dist_ssl.sampling import SamplingParams, uniform_indices

_EPS = 1e-9


def confusion_matrix(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return matrix


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    denom = predicted + actual
    # F1 = 2TP / (2TP + FP + FN); a class nobody predicts or holds scores 0
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def metrics_from_confusion(confusion: np.ndarray) -> dict:
    n = int(confusion.sum())
    f1 = per_class_f1(confusion)
    return {
        "n": n,
        "accuracy": float(np.trace(confusion) / n) if n else 0.0,
        "macro_f1": float(f1.mean()),
        "per_class_f1": [float(v) for v in f1],
        "per_class_counts": [int(v) for v in confusion.sum(axis=1)],
        "confusion": confusion.tolist(),
    }


def evaluate(model: TrainedModel, test: ClipSet, sampling: SamplingParams) -> dict:
    """Accuracy, macro-F1 and confusion on the uniform view of every test clip."""
    if len(test) == 0:
        raise ValidationError("cannot evaluate on an empty test set")
    predictions = model.predict_clips(test.stacked_frames(), sampling).argmax(axis=1)
    truth = test.oracle(purpose="evaluate").labels(test.ids)
    return metrics_from_confusion(confusion_matrix(truth, predictions, test.num_classes))


QUADRANTS = ("correct_retained", "incorrect_retained", "correct_discarded", "incorrect_discarded")


def pseudo_label_audit(records: Sequence[PseudoLabelRecord], oracle: OracleView) -> dict:
    """Split scored records by (retained, correct) against the hidden labels."""
    counts = dict.fromkeys(QUADRANTS, 0)
    for r in records:
        if r.clip_id not in oracle:
            raise KeyError(f"no oracle label for clip {r.clip_id!r}")
        correct = r.argmax_class == oracle.label(r.clip_id)
        key = ("correct" if correct else "incorrect") + ("_retained" if r.retained else "_discarded")
        counts[key] += 1
    return counts


def precision(correct: int, incorrect: int) -> float | None:
    total = correct + incorrect
    return correct / total if total else None


def audit_summary(
    records: Sequence[PseudoLabelRecord],
    oracle: OracleView,
    candidate_ids: Sequence[str] | None = None,
) -> dict:
    """Quadrant counts plus precision before and after the last selection step.

    ``candidate_ids`` is the set that entered the final filter (the top half in
    stage 1); when omitted, every scored record counts as a candidate.
    """
    quadrants = pseudo_label_audit(records, oracle)
    candidates = set(candidate_ids) if candidate_ids is not None else None
    pool = [r for r in records if candidates is None or r.clip_id in candidates]
    pool_correct = sum(r.argmax_class == oracle.label(r.clip_id) for r in pool)
    return {
        **quadrants,
        "scored": len(records),
        "candidates": len(pool),
        "retained": quadrants["correct_retained"] + quadrants["incorrect_retained"],
        "precision_all": precision(
            quadrants["correct_retained"] + quadrants["correct_discarded"],
            quadrants["incorrect_retained"] + quadrants["incorrect_discarded"],
        ),
        "precision_candidates": precision(pool_correct, len(pool) - pool_correct),
        "precision_retained": precision(quadrants["correct_retained"], quadrants["incorrect_retained"]),
    }


@dataclass(frozen=True)
class TimelineWindow:
    start_s: float
    end_s: float
    label: int


@dataclass(frozen=True)
class PhaseTimeline:
    windows: tuple[TimelineWindow, ...]
    window_s: float
    stride_s: float
    duration_s: float

    def labels(self) -> list[int]:
        return [w.label for w in self.windows]

    def starts(self) -> list[float]:
        return [w.start_s for w in self.windows]


def window_starts(duration_s: float, window_s: float, stride_s: float, flush_last: bool = False) -> list[float]:
    if window_s <= 0 or stride_s <= 0:
        raise ValidationError("window and stride must be positive")
    if duration_s + _EPS < window_s:
        raise ValidationError(f"sequence of {duration_s:.3f} s is shorter than one {window_s} s window")
    starts = []
    k = 0
    while k * stride_s + window_s <= duration_s + _EPS:
        starts.append(round(k * stride_s, 9))
        k += 1
    last = round(duration_s - window_s, 9)
    if flush_last and starts[-1] + window_s < duration_s - _EPS:
        starts.append(last)
    return starts


def timeline_predict(
    model: TrainedModel,
    frames: np.ndarray,
    fps: float,
    sampling: SamplingParams,
    window_s: float = 3.0,
    overlap_s: float = 1.0,
    flush_last: bool = False,
) -> PhaseTimeline:
    """Classify consecutive windows of a long (N, H, W) sequence."""
    if fps <= 0:
        raise ValidationError("fps must be positive")
    if not 0 <= overlap_s < window_s:
        raise ValidationError("overlap must lie in [0, window)")
    stride_s = window_s - overlap_s
    duration = frames.shape[0] / fps
    starts = window_starts(duration, window_s, stride_s, flush_last)
    views = []
    for start in starts:
        first = int(round(start * fps))
        last = min(int(round((start + window_s) * fps)), frames.shape[0])
        window = frames[first:last]
        views.append(window[uniform_indices(len(window), sampling.target_frames)])
    probs = model.probs_from_views(torch.from_numpy(np.ascontiguousarray(np.stack(views))))
    windows = tuple(
        TimelineWindow(s, round(s + window_s, 9), int(k)) for s, k in zip(starts, probs.argmax(axis=1))
    )
    return PhaseTimeline(windows, window_s, stride_s, duration)


def oracle_window_labels(bands: Sequence[PhaseBand], timeline: PhaseTimeline) -> list[int]:
    """The phase covering most of each window (earliest phase on ties)."""
    labels = []
    for w in timeline.windows:
        best, best_overlap = None, -1.0
        for band in bands:
            overlap = min(w.end_s, band.end_s) - max(w.start_s, band.start_s)
            if overlap > best_overlap + _EPS:
                best, best_overlap = band.label, overlap
        labels.append(best)
    return labels


def format_timeline(timeline: PhaseTimeline) -> str:
    lines = ["start\tend\tclass"]
    lines += [f"{w.start_s:.3f}\t{w.end_s:.3f}\t{w.label}" for w in timeline.windows]
    return "\n".join(lines) + "\n"


def write_timeline(path: str | Path, timeline: PhaseTimeline) -> Path:
    return atomic_write_text(path, format_timeline(timeline))
