"""Dual invariance filtering of pseudo-labels.

A pseudo-label survives only if the teacher's hard prediction on the uniform
view equals its hard prediction on a stratified-random, strongly augmented
view of the same clip. The randomised view of each clip is seeded from
``(seed, clip_id)``, so verdicts do not depend on iteration order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from dist_ssl.backend import TrainedModel
from dist_ssl.clipset import ClipSet
from dist_ssl.errors import ValidationError
from dist_ssl.fileio import atomic_write_text
from dist_ssl.reliability import PseudoLabelRecord
from dist_ssl.sampling import AugmentParams, SamplingParams, stable_seed, training_view_batch

VERDICT_HEADER = ("clip_id", "pred_uniform", "pred_augmented", "keep")


@dataclass(frozen=True)
class InvarianceVerdict:
    clip_id: str
    pred_uniform: int
    pred_augmented: int

    @property
    def keep(self) -> bool:
        return dual_invariance_keep(self.pred_uniform, self.pred_augmented)


def dual_invariance_keep(pred_uniform: int, pred_augmented: int) -> bool:
    return int(pred_uniform) == int(pred_augmented)


def counterpart_seed(seed: int, clip_id: str) -> int:
    return stable_seed("invariance", seed, clip_id)


def invariance_verdicts(
    model: TrainedModel,
    clips: ClipSet,
    clip_ids: Sequence[str],
    sampling: SamplingParams,
    aug: AugmentParams,
    seed: int,
    batch_size: int = 256,
) -> list[InvarianceVerdict]:
    if model.spec.num_classes != clips.num_classes:
        raise ValidationError(
            f"model predicts {model.spec.num_classes} classes, clip set has {clips.num_classes}"
        )
    missing = [c for c in clip_ids if c not in clips]
    if missing:
        raise KeyError(f"clip id {missing[0]!r} not found in clip set")
    verdicts = []
    for start in range(0, len(clip_ids), batch_size):
        ids = list(clip_ids[start : start + batch_size])
        frames = np.stack([clips[c].frames for c in ids])
        uniform = model.predict_clips(frames, sampling).argmax(axis=1)
        views = training_view_batch(frames, sampling, aug, [counterpart_seed(seed, c) for c in ids])
        augmented = model.probs_from_views(views).argmax(axis=1)
        verdicts += [InvarianceVerdict(c, int(u), int(a)) for c, u, a in zip(ids, uniform, augmented)]
    return verdicts


def apply_verdicts(
    records: Sequence[PseudoLabelRecord], verdicts: Sequence[InvarianceVerdict]
) -> list[PseudoLabelRecord]:
    """Set ``invariant``/``retained`` and relabel with the uniform-view prediction."""
    by_id = {v.clip_id: v for v in verdicts}
    out = []
    for r in records:
        v = by_id[r.clip_id]
        out.append(replace(r, argmax_class=v.pred_uniform, invariant=v.keep, retained=v.keep))
    return out


def filter_records(
    model: TrainedModel,
    records: Sequence[PseudoLabelRecord],
    clips: ClipSet,
    sampling: SamplingParams,
    aug: AugmentParams,
    seed: int,
) -> list[PseudoLabelRecord]:
    """Keep only the records whose clip passes the invariance check."""
    verdicts = invariance_verdicts(model, clips, [r.clip_id for r in records], sampling, aug, seed)
    return [r for r in apply_verdicts(records, verdicts) if r.retained]


def format_verdicts(verdicts: Sequence[InvarianceVerdict]) -> str:
    lines = ["\t".join(VERDICT_HEADER)]
    lines += [f"{v.clip_id}\t{v.pred_uniform}\t{v.pred_augmented}\t{int(v.keep)}" for v in verdicts]
    return "\n".join(lines) + "\n"


def write_verdicts(path: str | Path, verdicts: Sequence[InvarianceVerdict]) -> Path:
    return atomic_write_text(path, format_verdicts(verdicts))


def read_verdicts(path: str | Path) -> list[InvarianceVerdict]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != VERDICT_HEADER:
        raise ValidationError(f"{path}: not a verdict sidecar")
    out = []
    for line in lines[1:]:
        cid, u, a, _ = line.split("\t")
        out.append(InvarianceVerdict(cid, int(u), int(a)))
    return out
