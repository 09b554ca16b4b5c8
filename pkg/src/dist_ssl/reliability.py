"""Checkpoint-consistency reliability of pseudo-labels and top-half selection.

The final checkpoint's argmax ``c`` is treated as a one-hot target. Each
earlier checkpoint's probability vector ``z`` is combined with that target
elementwise as ``z * e / (z + e)`` (0/0 taken as 0) and summed over classes,
which leaves ``z[c] / (z[c] + 1)``. The two earlier checkpoints are weighted
1 and 2 by position and the sum divided by 3:

    R = (z1[c] / (z1[c] + 1) + 2 * z2[c] / (z2[c] + 1)) / 3

so R lies in (0, 0.5] whenever z1[c] and z2[c] are positive. No rescaling to
[0, 1] is applied.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dist_ssl.backend import CheckpointSet, TrainedModel
from dist_ssl.clipset import ClipSet
from dist_ssl.errors import ValidationError
from dist_ssl.fileio import atomic_write_text
from dist_ssl.sampling import SamplingParams

log = logging.getLogger(__name__)

NORMALISATION_TOL = 1e-6
MANIFEST_HEADER = ("clip_id", "argmax_class", "reliability", "invariant", "retained", "stage")


@dataclass(frozen=True)
class CheckpointPredictions:
    z1: np.ndarray
    z2: np.ndarray
    zf: np.ndarray

    def __post_init__(self):
        vectors = [np.asarray(v, dtype=np.float64) for v in (self.z1, self.z2, self.zf)]
        n = vectors[0].shape
        for name, v in zip(("z1", "z2", "zf"), vectors):
            if v.ndim != 1 or v.size == 0:
                raise ValidationError(f"{name} must be a non-empty probability vector")
            if v.shape != n:
                raise ValidationError("checkpoint probability vectors differ in length")
            if np.any(v < 0) or abs(v.sum() - 1.0) > NORMALISATION_TOL:
                raise ValidationError(f"{name} is not a normalised probability vector (sum={v.sum()!r})")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class PseudoLabelRecord:
    """One pseudo-label. ``retained`` implies ``invariant`` whenever the
    invariance filter ran; the unfiltered ablation retains records directly."""

    clip_id: str
    argmax_class: int
    reliability: float | None = None
    invariant: bool = False
    retained: bool = False
    stage: int = 1

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"record {self.clip_id!r}: stage must be 1 or 2")


def reliability_score(preds: CheckpointPredictions) -> tuple[int, float]:
    c = int(np.argmax(preds.zf))
    a, b = preds.z1[c], preds.z2[c]
    return c, float((a / (a + 1.0) + 2.0 * b / (b + 1.0)) / 3.0)


def reliability_scores(z1: np.ndarray, z2: np.ndarray, zf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise form of :func:`reliability_score` for (N, C) probability arrays."""
    classes = np.argmax(zf, axis=1)
    rows = np.arange(len(classes))
    a, b = z1[rows, classes], z2[rows, classes]
    return classes, (a / (a + 1.0) + 2.0 * b / (b + 1.0)) / 3.0


def score_unlabeled_set(
    checkpoints: CheckpointSet | Sequence[TrainedModel],
    unlabeled: ClipSet,
    sampling: SamplingParams,
) -> list[PseudoLabelRecord]:
    """Stage-1 records for every clip, scored on the uniform view only."""
    models = checkpoints.models() if isinstance(checkpoints, CheckpointSet) else list(checkpoints)
    if len(models) != 3:
        raise ValidationError(f"need three checkpoints, got {len(models)}")
    for m in models:
        if m.spec.num_classes != unlabeled.num_classes:
            raise ValidationError(
                f"checkpoint predicts {m.spec.num_classes} classes, clip set has {unlabeled.num_classes}"
            )
    if len(unlabeled) == 0:
        return []
    frames = unlabeled.stacked_frames()
    z1, z2, zf = (m.predict_clips(frames, sampling) for m in models)
    classes, scores = reliability_scores(z1, z2, zf)
    return [
        PseudoLabelRecord(cid, int(k), float(r), stage=1)
        for cid, k, r in zip(unlabeled.ids, classes, scores)
    ]


def pseudo_label_all(model: TrainedModel, unlabeled: ClipSet, sampling: SamplingParams, stage: int = 2) -> list[PseudoLabelRecord]:
    """Argmax pseudo-labels from a single teacher, without a reliability score."""
    if model.spec.num_classes != unlabeled.num_classes:
        raise ValidationError(
            f"teacher predicts {model.spec.num_classes} classes, clip set has {unlabeled.num_classes}"
        )
    if len(unlabeled) == 0:
        return []
    probs = model.predict_clips(unlabeled.stacked_frames(), sampling)
    return [
        PseudoLabelRecord(cid, int(k), None, stage=stage)
        for cid, k in zip(unlabeled.ids, np.argmax(probs, axis=1))
    ]


def median(values: Iterable[float]) -> float:
    ordered = sorted(values)
    n = len(ordered)
    if n == 0:
        raise ValueError("median of an empty sequence")
    mid = n // 2
    return ordered[mid] if n % 2 else (ordered[mid - 1] + ordered[mid]) / 2.0


def select_top_half(records: Sequence[PseudoLabelRecord]) -> list[PseudoLabelRecord]:
    """Records whose score is strictly above the median of all scores, in input order."""
    if not records:
        return []
    if any(r.reliability is None for r in records):
        raise ValidationError("every record needs a reliability score before selection")
    cut = median(r.reliability for r in records)
    kept = [r for r in records if r.reliability > cut]
    if not kept:
        log.warning("degenerate selection: no score exceeds the median %.6f (%d records)", cut, len(records))
    return kept


def mark(records: Sequence[PseudoLabelRecord], **flags) -> list[PseudoLabelRecord]:
    return [replace(r, **flags) for r in records]


def _flag(value: bool) -> str:
    return "1" if value else "0"


def format_manifest(records: Sequence[PseudoLabelRecord]) -> str:
    lines = ["\t".join(MANIFEST_HEADER)]
    for r in records:
        score = "NA" if r.reliability is None else f"{r.reliability:.6f}"
        lines.append("\t".join(
            [r.clip_id, str(r.argmax_class), score, _flag(r.invariant), _flag(r.retained), str(r.stage)]
        ))
    return "\n".join(lines) + "\n"


def write_manifest(path: str | Path, records: Sequence[PseudoLabelRecord]) -> Path:
    return atomic_write_text(path, format_manifest(records))


def read_manifest(path: str | Path) -> list[PseudoLabelRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise ValidationError(f"{path}: not a pseudo-label manifest (bad header)")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise ValidationError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
        cid, k, score, inv, ret, stage = parts
        records.append(PseudoLabelRecord(
            cid, int(k), None if score == "NA" else float(score), inv == "1", ret == "1", int(stage)
        ))
    return records
