"""Clip collections, the synthetic motion dataset, and on-disk persistence.

Every synthetic class is a bright Gaussian blob drifting across a toroidal
frame in a class-specific direction, so a single frame carries no class
information; only the motion does.

Oracle labels of unlabeled and test clips are kept off the public surface.
``Clip.label`` raises for anything outside the labeled split, and the only
way to read the hidden labels is through :meth:`ClipSet.oracle`, whose reads
are broadcast to any active :func:`watch_oracle_access` recorder.
"""

from __future__ import annotations

import contextlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from dist_ssl.errors import ClassCoverageError, LabelQuarantineError, ParameterError
from dist_ssl.fileio import atomic_write_bytes, atomic_write_text

LABELED = "labeled"
UNLABELED = "unlabeled"
TEST = "test"
SPLITS = (LABELED, UNLABELED, TEST)

CLIP_SECONDS = 3.0
METADATA_FILE = "metadata.json"
CLIPSET_SCHEMA = 1

# blob appearance and motion at difficulty 0
_BACKGROUND = 0.2
_AMPLITUDE = 0.7
_SPEED_FRACTION = 0.03  # pixels per frame, as a fraction of frame size
_BLOB_FRACTION = 0.09
# how far each nuisance factor moves at difficulty 1
_NOISE_STD = 1.5
_ANGLE_JITTER_DEG = 30.0
_SPEED_JITTER = 0.5
_BLOB_JITTER = 0.3
_DISTRACTOR_AMPLITUDE = 0.6


@dataclass(frozen=True)
class Clip:
    id: str
    frames: np.ndarray = field(repr=False)
    split: str = UNLABELED
    _oracle_label: int = field(default=-1, repr=False)

    @property
    def label(self) -> int:
        if self.split != LABELED:
            raise LabelQuarantineError(
                f"label of {self.split} clip {self.id!r} is quarantined; use ClipSet.oracle()"
            )
        return self._oracle_label

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


OracleListener = Callable[[str, str, str], None]
_listeners: list[OracleListener] = []


@contextlib.contextmanager
def watch_oracle_access() -> Iterator[list[tuple[str, str, str]]]:
    """Record every oracle read as ``(clip_id, split, purpose)`` while active."""
    events: list[tuple[str, str, str]] = []

    def listener(clip_id: str, split: str, purpose: str) -> None:
        events.append((clip_id, split, purpose))

    _listeners.append(listener)
    try:
        yield events
    finally:
        _listeners.remove(listener)


class OracleView:
    """Audit-only accessor for hidden labels."""

    def __init__(self, clips: dict[str, Clip], purpose: str):
        self._clips = clips
        self.purpose = purpose

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._clips

    def label(self, clip_id: str) -> int:
        try:
            clip = self._clips[clip_id]
        except KeyError:
            raise KeyError(f"no oracle label for clip {clip_id!r}") from None
        for listener in list(_listeners):
            listener(clip_id, clip.split, self.purpose)
        return clip._oracle_label

    def labels(self, clip_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.label(c) for c in clip_ids], dtype=np.int64)


@dataclass(frozen=True)
class ClipSet:
    clips: tuple[Clip, ...]
    num_classes: int
    generator_seed: int = 0
    difficulty: float = 0.0
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ParameterError("num_classes", "must be positive")
        ids = [c.id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise ParameterError("clips", "clip ids must be unique")
        for clip in self.clips:
            if clip.split not in SPLITS:
                raise ParameterError("split", f"unknown split {clip.split!r} on clip {clip.id!r}")
            if not 0 <= clip._oracle_label < self.num_classes:
                raise ParameterError("oracle_label", f"clip {clip.id!r} label out of range")
        object.__setattr__(self, "_index", {c.id: c for c in self.clips})

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self) -> Iterator[Clip]:
        return iter(self.clips)

    def __getitem__(self, clip_id: str) -> Clip:
        try:
            return self._index[clip_id]
        except KeyError:
            raise KeyError(f"unknown clip id {clip_id!r}") from None

    def __contains__(self, clip_id: str) -> bool:
        return clip_id in self._index

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.clips]

    @property
    def frame_shape(self) -> tuple[int, ...] | None:
        return tuple(self.clips[0].frames.shape) if self.clips else None

    def subset(self, split: str) -> "ClipSet":
        return replace(self, clips=tuple(c for c in self.clips if c.split == split))

    def select(self, clip_ids: Sequence[str]) -> "ClipSet":
        return replace(self, clips=tuple(self[c] for c in clip_ids))

    def stacked_frames(self) -> np.ndarray:
        if not self.clips:
            return np.zeros((0, 1, 1, 1), dtype=np.float32)
        return np.stack([c.frames for c in self.clips])

    def labeled_examples(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Frames, labels and ids of the labeled split (the only public labels)."""
        labeled = [c for c in self.clips if c.split == LABELED]
        if not labeled:
            return np.zeros((0, 1, 1, 1), dtype=np.float32), np.zeros(0, dtype=np.int64), []
        frames = np.stack([c.frames for c in labeled])
        labels = np.array([c.label for c in labeled], dtype=np.int64)
        return frames, labels, [c.id for c in labeled]

    def oracle(self, purpose: str = "audit") -> OracleView:
        return OracleView(self._index, purpose)


def _check_int(name: str, value, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise ParameterError(name, f"expected an integer, got {value!r}")
    if value < minimum:
        raise ParameterError(name, f"must be >= {minimum}, got {value}")
    return int(value)


def _check_difficulty(difficulty) -> float:
    if not isinstance(difficulty, (int, float)) or not 0.0 <= difficulty <= 1.0:
        raise ParameterError("difficulty", f"must lie in [0, 1], got {difficulty!r}")
    return float(difficulty)


def class_direction(label: int, num_classes: int) -> float:
    return 2.0 * math.pi * label / num_classes


def _render(
    positions: np.ndarray,
    size: int,
    sigma: float,
    amplitude: float,
    distractor: tuple[float, float, float] | None,
) -> np.ndarray:
    grid = np.arange(size, dtype=np.float64)

    def torus_sq(centre: np.ndarray) -> np.ndarray:
        d = np.abs(grid[None, :] - centre[:, None])
        d = np.minimum(d, size - d)
        return d * d

    dy = torus_sq(positions[:, 0])
    dx = torus_sq(positions[:, 1])
    blob = np.exp(-(dy[:, :, None] + dx[:, None, :]) / (2.0 * sigma * sigma))
    frames = _BACKGROUND + amplitude * blob
    if distractor is not None:
        cy, cx, amp = distractor
        still = np.exp(
            -(torus_sq(np.array([cy]))[0][:, None] + torus_sq(np.array([cx]))[0][None, :])
            / (2.0 * sigma * sigma)
        )
        frames = frames + amp * still[None]
    return frames


def _motion_track(rng: np.random.Generator, label: int, num_classes: int, n_frames: int,
                  size: int, difficulty: float, start: np.ndarray | None = None):
    angle = class_direction(label, num_classes)
    angle += math.radians(_ANGLE_JITTER_DEG) * difficulty * rng.standard_normal()
    speed = _SPEED_FRACTION * size * (1.0 + _SPEED_JITTER * difficulty * rng.uniform(-1.0, 1.0))
    if start is None:
        start = rng.uniform(0.0, size, size=2)
    steps = np.arange(n_frames, dtype=np.float64)
    # row axis points down, so "up" is negative dy
    velocity = np.array([-math.sin(angle), math.cos(angle)]) * speed
    positions = start[None, :] + steps[:, None] * velocity[None, :]
    return positions, velocity


def _render_clip(rng: np.random.Generator, label: int, num_classes: int, n_frames: int,
                 size: int, difficulty: float) -> np.ndarray:
    positions, _ = _motion_track(rng, label, num_classes, n_frames, size, difficulty)
    positions %= size
    sigma = _BLOB_FRACTION * size * (1.0 + _BLOB_JITTER * difficulty * rng.uniform(-1.0, 1.0))
    distractor = None
    if difficulty > 0:
        cy, cx = rng.uniform(0.0, size, size=2)
        distractor = (cy, cx, _DISTRACTOR_AMPLITUDE * difficulty * rng.uniform())
    frames = _render(positions, size, sigma, _AMPLITUDE, distractor)
    if difficulty > 0:
        frames = frames + _NOISE_STD * difficulty * rng.standard_normal(frames.shape)
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    num_clips: int,
    num_classes: int,
    frames_per_clip: int = 16,
    frame_size: int = 32,
    difficulty: float = 0.3,
    seed: int = 0,
) -> ClipSet:
    """Generate a balanced set of moving-blob clips; every clip starts unlabeled."""
    num_clips = _check_int("num_clips", num_clips, 1)
    num_classes = _check_int("num_classes", num_classes, 2)
    frames_per_clip = _check_int("frames_per_clip", frames_per_clip, 1)
    frame_size = _check_int("frame_size", frame_size, 1)
    difficulty = _check_difficulty(difficulty)
    seed = _check_int("seed", seed, 0)
    if num_clips < num_classes:
        raise ParameterError("num_clips", f"must be >= num_classes ({num_classes}), got {num_clips}")

    rng = np.random.default_rng(seed)
    labels = np.arange(num_clips) % num_classes
    rng.shuffle(labels)
    width = len(str(num_clips - 1))
    clips = []
    for i, label in enumerate(labels):
        frames = _render_clip(rng, int(label), num_classes, frames_per_clip, frame_size, difficulty)
        clips.append(Clip(id=f"clip{i:0{width}d}", frames=frames, _oracle_label=int(label)))
    params = dict(
        num_clips=num_clips,
        num_classes=num_classes,
        frames_per_clip=frames_per_clip,
        frame_size=frame_size,
        difficulty=difficulty,
        seed=seed,
    )
    return ClipSet(tuple(clips), num_classes, seed, difficulty, params)


@dataclass(frozen=True)
class PhaseBand:
    start_s: float
    end_s: float
    label: int


def generate_synthetic_sequence(
    phases: Sequence[tuple[int, float]],
    num_classes: int,
    fps: float,
    frame_size: int = 32,
    frames_per_clip: int = 16,
    difficulty: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, list[PhaseBand]]:
    """Render one long sequence made of consecutive ``(class, seconds)`` phases.

    The blob keeps its position across phase changes; only its direction
    switches. Speed per second matches a clip of ``frames_per_clip`` frames
    spanning three seconds, so windows of a sequence look like clips.
    """
    if not phases:
        raise ParameterError("phases", "need at least one phase")
    if fps <= 0:
        raise ParameterError("fps", "must be positive")
    difficulty = _check_difficulty(difficulty)
    rng = np.random.default_rng(seed)
    frame_scale = (frames_per_clip / CLIP_SECONDS) / fps
    sigma = _BLOB_FRACTION * frame_size
    position = rng.uniform(0.0, frame_size, size=2)
    chunks, bands = [], []
    elapsed = 0.0
    frame_cursor = 0
    for label, seconds in phases:
        if not 0 <= label < num_classes:
            raise ParameterError("phases", f"class {label} out of range")
        end_frame = int(round((elapsed + seconds) * fps))
        n = end_frame - frame_cursor
        if n <= 0:
            raise ParameterError("phases", "phase shorter than one frame")
        _, velocity = _motion_track(
            rng, label, num_classes, 1, frame_size, difficulty, start=position
        )
        steps = np.arange(n + 1, dtype=np.float64)[:, None]
        positions = (position[None, :] + steps * velocity[None, :] * frame_scale) % frame_size
        chunk = _render(positions[:n], frame_size, sigma, _AMPLITUDE, None)
        if difficulty > 0:
            chunk = chunk + _NOISE_STD * difficulty * rng.standard_normal(chunk.shape)
        chunks.append(np.clip(chunk, 0.0, 1.0).astype(np.float32))
        position = positions[n]
        bands.append(PhaseBand(elapsed, elapsed + seconds, int(label)))
        elapsed += seconds
        frame_cursor = end_frame
    return np.concatenate(chunks), bands


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_counts(total: int, labeled_fraction: float, test_fraction: float) -> tuple[int, int, int]:
    n_test = _round_half_up(test_fraction * total)
    n_labeled = _round_half_up(labeled_fraction * (total - n_test))
    return n_labeled, total - n_test - n_labeled, n_test


def split_labeled_unlabeled(
    clipset: ClipSet, labeled_fraction: float, test_fraction: float, seed: int
) -> ClipSet:
    """Assign every clip to exactly one split.

    Test clips are drawn first; the labeled subset is then filled in
    permutation order after reserving the first clip of each class, which
    guarantees class coverage without biasing the rest of the draw.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ParameterError("labeled_fraction", f"must lie in (0, 1], got {labeled_fraction}")
    if not 0.0 <= test_fraction < 1.0:
        raise ParameterError("test_fraction", f"must lie in [0, 1), got {test_fraction}")
    if labeled_fraction < 1.0 and labeled_fraction + test_fraction >= 1.0:
        raise ParameterError("labeled_fraction", "labeled_fraction + test_fraction must be < 1")

    n = len(clipset)
    n_labeled, _, n_test = split_counts(n, labeled_fraction, test_fraction)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    test_idx = order[:n_test]
    pool = order[n_test:]

    # the split is data preparation, not training: it may see every label
    labels = [clipset.clips[i]._oracle_label for i in range(n)]
    first_of_class: dict[int, int] = {}
    for i in pool:
        first_of_class.setdefault(labels[i], int(i))
    missing = sorted(set(range(clipset.num_classes)) - set(first_of_class))
    if missing or n_labeled < clipset.num_classes:
        raise ClassCoverageError(
            f"class coverage: {n_labeled} labeled clips cannot cover all "
            f"{clipset.num_classes} classes (missing from pool: {missing})"
        )
    reserved = [first_of_class[k] for k in sorted(first_of_class)]
    reserved_set = set(reserved)
    chosen = set(reserved)
    for i in pool:
        if len(chosen) >= n_labeled:
            break
        if int(i) not in reserved_set:
            chosen.add(int(i))

    split_of = {int(i): TEST for i in test_idx}
    for i in pool:
        split_of[int(i)] = LABELED if int(i) in chosen else UNLABELED
    clips = tuple(replace(c, split=split_of[i]) for i, c in enumerate(clipset.clips))
    params = dict(clipset.params, labeled_fraction=labeled_fraction,
                  test_fraction=test_fraction, split_seed=seed)
    return replace(clipset, clips=clips, params=params)


def clipset_summary(clipset: ClipSet) -> dict:
    """Counts per split and per class (reads labels directly; reporting only)."""
    per_split = {s: 0 for s in SPLITS}
    per_class = Counter()
    per_split_class = {s: Counter() for s in SPLITS}
    for clip in clipset:
        per_split[clip.split] += 1
        per_class[clip._oracle_label] += 1
        per_split_class[clip.split][clip._oracle_label] += 1
    classes = range(clipset.num_classes)
    summary = {
        "total": len(clipset),
        "num_classes": clipset.num_classes,
        "per_split": per_split,
        "per_class": {k: per_class.get(k, 0) for k in classes},
        "per_split_class": {
            s: {k: per_split_class[s].get(k, 0) for k in classes} for s in SPLITS
        },
    }
    lines = [f"{len(clipset)} clips, {clipset.num_classes} classes"]
    lines.append("  " + "  ".join(f"{s}={per_split[s]}" for s in SPLITS))
    lines.append("  " + "  ".join(f"class{k}={summary['per_class'][k]}" for k in classes))
    summary["text"] = "\n".join(lines)
    return summary


# --- persistence -------------------------------------------------------------
#
# A raw array file is little-endian: int32 ndim, ndim x int32 dims, then the
# values as float32 in row-major order.


def encode_raw_array(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f4")
    header = np.array([array.ndim, *array.shape], dtype="<i4")
    return header.tobytes() + array.tobytes()


def decode_raw_array(blob: bytes) -> np.ndarray:
    ndim = int(np.frombuffer(blob[:4], dtype="<i4")[0])
    dims = tuple(int(d) for d in np.frombuffer(blob[4 : 4 + 4 * ndim], dtype="<i4"))
    values = np.frombuffer(blob[4 + 4 * ndim :], dtype="<f4")
    if values.size != math.prod(dims):
        raise ValueError(f"raw array payload has {values.size} values, header says {dims}")
    return values.reshape(dims).astype(np.float32)


def clipset_metadata(clipset: ClipSet) -> dict:
    return {
        "schema_version": CLIPSET_SCHEMA,
        "num_classes": clipset.num_classes,
        "generator_seed": clipset.generator_seed,
        "difficulty": clipset.difficulty,
        "params": clipset.params,
        "clips": [
            {"id": c.id, "label": c._oracle_label, "split": c.split, "file": f"clips/{c.id}.bin"}
            for c in clipset
        ],
    }


def save_clipset(clipset: ClipSet, directory: str | Path, with_frames: bool = True) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if with_frames:
        (directory / "clips").mkdir(exist_ok=True)
        for clip in clipset:
            atomic_write_bytes(directory / "clips" / f"{clip.id}.bin", encode_raw_array(clip.frames))
    text = json.dumps(clipset_metadata(clipset), indent=1, sort_keys=True)
    atomic_write_text(directory / METADATA_FILE, text + "\n")
    return directory


def load_metadata(directory: str | Path) -> dict:
    return json.loads((Path(directory) / METADATA_FILE).read_text())


def oracle_from_metadata(meta: dict, purpose: str = "audit") -> OracleView:
    """Oracle accessor over the labels recorded in a metadata file (no frames needed)."""
    empty = np.zeros((0,), dtype=np.float32)
    clips = {e["id"]: Clip(e["id"], empty, e["split"], int(e["label"])) for e in meta["clips"]}
    return OracleView(clips, purpose)


def load_clipset(directory: str | Path) -> ClipSet:
    directory = Path(directory)
    meta = load_metadata(directory)
    clips = []
    for entry in meta["clips"]:
        frames = decode_raw_array((directory / entry["file"]).read_bytes())
        clips.append(Clip(entry["id"], frames, entry["split"], int(entry["label"])))
    return ClipSet(
        tuple(clips), int(meta["num_classes"]), int(meta["generator_seed"]),
        float(meta["difficulty"]), dict(meta.get("params", {})),
    )
