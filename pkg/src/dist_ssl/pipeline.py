"""Two-stage self-training with dual invariance filtering, end to end.

Stage 1: teacher on the labeled split with three snapshots, reliability
scoring of every unlabeled clip, top-half selection, invariance filter,
student on labeled plus retained clips. Stage 2: the stage-1 student becomes
the teacher, pseudo-labels every unlabeled clip, the invariance filter alone
decides what is kept, and a fresh student is trained.

The unfiltered ablation (``variant="st"``) is the same code path with the
invariance filter switched off; in stage 2 it keeps every pseudo-label.

Run directory layout::

    <out>/config.snapshot.toml  report.json  run.log  plots/
    <out>/seed_<s>/data/metadata.json
                  /checkpoints/teacher_e*.bin  student_stage{k}.bin  st_student_stage{k}.bin
                  /manifests/stage{k}.tsv  stage{k}_verdicts.tsv  st_stage{k}.tsv
                  /stage{k}.json  st_stage{k}.json   (completion markers, written last)
                  /report.json
"""

from __future__ import annotations

import concurrent.futures
import contextlib
import json
import logging
import math
import multiprocessing
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from dist_ssl.backend import (
    CheckpointSet,
    TrainedModel,
    TrainResult,
    checkpoint_epochs,
    load_model,
    save_model,
    train,
)
from dist_ssl.clipset import (
    TEST,
    UNLABELED,
    ClipSet,
    generate_synthetic_dataset,
    load_clipset,
    load_metadata,
    save_clipset,
    split_counts,
    split_labeled_unlabeled,
)
from dist_ssl.config import ExperimentConfig, config_hash, serialize_config
from dist_ssl.errors import ArtifactError, DistError, StageError, ValidationError
from dist_ssl.evaluation import audit_summary, evaluate
from dist_ssl.fileio import atomic_write_text
from dist_ssl.invariance import apply_verdicts, invariance_verdicts, write_verdicts
from dist_ssl.reliability import (
    PseudoLabelRecord,
    mark,
    pseudo_label_all,
    read_manifest,
    score_unlabeled_set,
    select_top_half,
    write_manifest,
)
from dist_ssl.sampling import stable_seed

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
VARIANTS = ("dist", "st")
DIST_MODELS = ("supervised", "dist_stage1", "dist_stage2")
ABLATION_MODELS = ("st_stage1", "st_stage2")


def _prefix(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    return "" if variant == "dist" else "st_"


@dataclass(frozen=True)
class SeedLayout:
    root: Path

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def manifests(self) -> Path:
        return self.root / "manifests"

    def teacher_checkpoint(self, epoch: int) -> Path:
        return self.checkpoints / f"teacher_e{epoch}.bin"

    def student(self, variant: str, stage: int) -> Path:
        return self.checkpoints / f"{_prefix(variant)}student_stage{stage}.bin"

    def student_snapshot_prefix(self, variant: str, stage: int) -> str:
        return f"{_prefix(variant)}student_stage{stage}"

    def manifest(self, variant: str, stage: int) -> Path:
        return self.manifests / f"{_prefix(variant)}stage{stage}.tsv"

    def verdicts(self, stage: int) -> Path:
        return self.manifests / f"stage{stage}_verdicts.tsv"

    def marker(self, variant: str, stage: int) -> Path:
        return self.root / f"{_prefix(variant)}stage{stage}.json"

    def make(self) -> "SeedLayout":
        for d in (self.data_dir, self.checkpoints, self.manifests):
            d.mkdir(parents=True, exist_ok=True)
        return self


def seed_layout(out_dir: str | Path, seed: int) -> SeedLayout:
    return SeedLayout(Path(out_dir) / f"seed_{seed}")


@dataclass
class StageArtifacts:
    stage: int
    variant: str
    teacher: TrainedModel
    records: list[PseudoLabelRecord]  # every scored unlabeled clip, with flags
    candidate_ids: list[str]  # the clips that reached the final selection step
    student: TrainedModel
    labeled_count: int
    pseudo_manifest: Path | None = None
    student_snapshots: CheckpointSet | None = None

    @property
    def retained(self) -> list[PseudoLabelRecord]:
        return [r for r in self.records if r.retained]

    @property
    def retained_count(self) -> int:
        return len(self.retained)

    @property
    def mixed_size(self) -> int:
        return self.labeled_count + self.retained_count


# --- data -------------------------------------------------------------------


def base_dataset(config: ExperimentConfig) -> ClipSet:
    d = config.data
    if d.dataset_path:
        return load_clipset(d.dataset_path)
    return generate_synthetic_dataset(
        d.num_clips, d.num_classes, d.frames_per_clip, d.frame_size, d.difficulty, d.generator_seed
    )


def prepare_data(config: ExperimentConfig, seed: int, base: ClipSet | None = None) -> ClipSet:
    """The clip set for one seed: a fixed dataset with a seed-dependent split."""
    base = base_dataset(config) if base is None else base
    if base.num_classes != config.data.num_classes:
        raise ValidationError(
            f"dataset has {base.num_classes} classes, config says {config.data.num_classes}"
        )
    data = split_labeled_unlabeled(
        base, config.data.labeled_fraction, config.data.test_fraction, stable_seed("split", seed)
    )
    n_labeled, n_unlabeled, _ = split_counts(len(base), config.data.labeled_fraction, config.data.test_fraction)
    if 0 < n_unlabeled <= n_labeled:
        log.warning("unlabeled split (%d) is not larger than labeled split (%d)", n_unlabeled, n_labeled)
    return data


def load_run_data(config: ExperimentConfig, seed: int, layout: SeedLayout) -> ClipSet:
    """Reload the seed's clip set, regenerating frames when they were not persisted."""
    if not (layout.data_dir / "metadata.json").is_file():
        raise ArtifactError(f"no data/metadata.json under {layout.root}")
    if (layout.data_dir / "clips").is_dir():
        return load_clipset(layout.data_dir)
    data = prepare_data(config, seed)
    recorded = {e["id"]: e["split"] for e in load_metadata(layout.data_dir)["clips"]}
    if recorded != {c.id: c.split for c in data}:
        raise ValidationError(f"regenerated split does not match {layout.data_dir / 'metadata.json'}")
    return data


# --- training ---------------------------------------------------------------


def train_teacher(config: ExperimentConfig, data: ClipSet, seed: int, layout: SeedLayout | None = None) -> TrainResult:
    """Teacher on the labeled split with three snapshots; its final weights are the supervised baseline."""
    frames, labels, _ = data.labeled_examples()
    return train(
        config.model_spec(stable_seed("init", seed, "teacher")),
        frames, labels, config.teacher.schedule(), config.sampling, config.aug,
        seed=stable_seed("order", seed, "teacher"),
        save_checkpoints=True,
        checkpoint_dir=layout.checkpoints if layout else None,
        checkpoint_prefix="teacher",
    )


def labeled_repeats(n_labeled: int, n_pseudo: int, share: float) -> int:
    """How often each labeled clip appears per epoch so labeled clips make up at least ``share``."""
    if share <= 0 or n_pseudo == 0 or n_labeled == 0:
        return 1
    return max(1, math.ceil(share * n_pseudo / ((1.0 - share) * n_labeled)))


def train_student(
    config: ExperimentConfig,
    data: ClipSet,
    retained: list[PseudoLabelRecord],
    seed: int,
    stage: int,
    init_state: dict | None = None,
    snapshot_dir: Path | None = None,
    snapshot_prefix: str = "student",
) -> TrainResult:
    """Student on labeled clips plus retained pseudo-labeled clips.

    Both variants share the initialisation and the epoch-order seed of a
    stage, so they differ only in the pseudo-labels they see.
    """
    frames, labels, _ = data.labeled_examples()
    reps = labeled_repeats(len(labels), len(retained), config.ssl.labeled_share)
    if reps > 1:
        frames, labels = np.concatenate([frames] * reps), np.concatenate([labels] * reps)
    if retained:
        pseudo_frames = np.stack([data[r.clip_id].frames for r in retained])
        pseudo_labels = np.array([r.argmax_class for r in retained], dtype=np.int64)
        frames = np.concatenate([frames, pseudo_frames])
        labels = np.concatenate([labels, pseudo_labels])
    else:
        log.warning("stage %d: no retained pseudo-labels, student trains on labeled clips only", stage)
    keep_snapshots = config.ssl.stage2_teacher == "best_labeled" and stage == 1
    return train(
        config.model_spec(stable_seed("init", seed, "student", stage)),
        frames, labels, config.student.schedule(), config.sampling, config.aug,
        seed=stable_seed("order", seed, "student", stage),
        save_checkpoints=keep_snapshots,
        checkpoint_dir=snapshot_dir if keep_snapshots else None,
        checkpoint_prefix=snapshot_prefix,
        init_state=init_state,
    )


def promoted_teacher(config: ExperimentConfig, data: ClipSet, stage1: StageArtifacts) -> TrainedModel:
    """The stage-1 student's final weights, or its snapshot that fits the labeled split best."""
    if config.ssl.stage2_teacher == "final" or stage1.student_snapshots is None:
        return stage1.student
    frames, labels, _ = data.labeled_examples()
    best, best_acc = stage1.student, -1.0
    for model in stage1.student_snapshots.models():
        acc = float((model.predict_clips(frames, config.sampling).argmax(axis=1) == labels).mean())
        if acc >= best_acc:  # ties go to the later snapshot
            best, best_acc = model, acc
    return best


@contextlib.contextmanager
def timed(phase: str, seed: int):
    """Log the wall time of a phase; records carry ``phase``, ``seed`` and ``elapsed_s``."""
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    log.info("seed %d %s took %.1f s", seed, phase, elapsed,
             extra={"phase": phase, "seed": seed, "elapsed_s": elapsed})


def _filter_seed(seed: int, stage: int) -> int:
    return stable_seed("filter", seed, stage)


def _persist_stage(layout: SeedLayout | None, artifacts: StageArtifacts, teacher_ref: str) -> None:
    if layout is None:
        return
    v, k = artifacts.variant, artifacts.stage
    artifacts.pseudo_manifest = write_manifest(layout.manifest(v, k), artifacts.records)
    save_model(artifacts.student, layout.student(v, k))
    marker = {
        "stage": k,
        "variant": v,
        "teacher": teacher_ref,
        "student": layout.student(v, k).name,
        "manifest": layout.manifest(v, k).name,
        "candidate_ids": artifacts.candidate_ids,
        "labeled_count": artifacts.labeled_count,
        "retained_count": artifacts.retained_count,
        "mixed_size": artifacts.mixed_size,
    }
    if artifacts.student_snapshots is not None:
        marker["student_snapshots"] = [p.name for p in artifacts.student_snapshots.paths]
        marker["student_snapshot_epochs"] = list(artifacts.student_snapshots.epochs)
    # the marker goes last: its presence means the stage finished
    atomic_write_text(layout.marker(v, k), json.dumps(marker, indent=1, sort_keys=True) + "\n")


def run_stage1(
    config: ExperimentConfig,
    data: ClipSet,
    seed: int,
    layout: SeedLayout | None = None,
    variant: str = "dist",
    teacher: TrainResult | None = None,
) -> StageArtifacts:
    _prefix(variant)
    if not data.labeled_examples()[2]:
        raise ValidationError("no labeled clips")
    if teacher is None:
        teacher = train_teacher(config, data, seed, layout)
    unlabeled = data.subset(UNLABELED)
    with timed(f"{variant}_stage1_selection", seed):
        records = score_unlabeled_set(teacher.checkpoints, unlabeled, config.sampling)
        top = select_top_half(records)
        top_ids = [r.clip_id for r in top]
        if variant == "dist":
            verdicts = invariance_verdicts(
                teacher.model, unlabeled, top_ids, config.sampling, config.aug, _filter_seed(seed, 1)
            )
            judged = {r.clip_id: r for r in apply_verdicts(top, verdicts)}
            records = [judged.get(r.clip_id, r) for r in records]
            if layout is not None:
                write_verdicts(layout.verdicts(1), verdicts)
        else:
            chosen = set(top_ids)
            records = [replace(r, retained=r.clip_id in chosen) for r in records]
    retained = [r for r in records if r.retained]
    log.info("seed %d %s stage 1: %d scored, %d in top half, %d retained",
             seed, variant, len(records), len(top), len(retained))

    prefix = layout.student_snapshot_prefix(variant, 1) if layout else "student_stage1"
    with timed(f"{variant}_stage1_student", seed):
        result = train_student(config, data, retained, seed, 1,
                               snapshot_dir=layout.checkpoints if layout else None, snapshot_prefix=prefix)
    artifacts = StageArtifacts(
        1, variant, teacher.model, records, top_ids, result.model,
        labeled_count=len(data.labeled_examples()[2]), student_snapshots=result.checkpoints,
    )
    _persist_stage(layout, artifacts, f"teacher_e{teacher.checkpoints.epochs[-1]}.bin")
    return artifacts


def run_stage2(
    config: ExperimentConfig,
    data: ClipSet,
    seed: int,
    stage1: StageArtifacts | None,
    layout: SeedLayout | None = None,
) -> StageArtifacts:
    if stage1 is None:
        raise ArtifactError("stage1 artifacts missing")
    variant = stage1.variant
    teacher = promoted_teacher(config, data, stage1)
    unlabeled = data.subset(UNLABELED)
    with timed(f"{variant}_stage2_selection", seed):
        records = pseudo_label_all(teacher, unlabeled, config.sampling, stage=2)
        candidate_ids = [r.clip_id for r in records]
        if variant == "dist":
            verdicts = invariance_verdicts(
                teacher, unlabeled, candidate_ids, config.sampling, config.aug, _filter_seed(seed, 2)
            )
            records = apply_verdicts(records, verdicts)
            if layout is not None:
                write_verdicts(layout.verdicts(2), verdicts)
        else:
            records = mark(records, retained=True)
    retained = [r for r in records if r.retained]
    log.info("seed %d %s stage 2: %d pseudo-labels, %d retained", seed, variant, len(records), len(retained))

    init_state = stage1.student.state_dict() if config.ssl.stage2_warm_start else None
    with timed(f"{variant}_stage2_student", seed):
        result = train_student(config, data, retained, seed, 2, init_state=init_state)
    artifacts = StageArtifacts(
        2, variant, teacher, records, candidate_ids, result.model,
        labeled_count=stage1.labeled_count,
    )
    ref = layout.student(variant, 1).name if layout else "stage1_student"
    _persist_stage(layout, artifacts, ref)
    return artifacts


def load_stage(config: ExperimentConfig, data: ClipSet, layout: SeedLayout, variant: str, stage: int) -> StageArtifacts:
    """Rebuild a finished stage from disk; raises if any piece is missing."""
    marker_path = layout.marker(variant, stage)
    label = f"stage{stage} artifacts missing"
    if not marker_path.is_file():
        raise ArtifactError(f"{label}: no {marker_path}")
    marker = json.loads(marker_path.read_text())
    needed = [layout.manifest(variant, stage), layout.student(variant, stage)]
    teacher_path = layout.checkpoints / marker["teacher"]
    needed.append(teacher_path)
    snapshot_paths = [layout.checkpoints / p for p in marker.get("student_snapshots", [])]
    missing = [str(p) for p in needed + snapshot_paths if not p.is_file()]
    if missing:
        raise ArtifactError(f"{label}: {', '.join(missing)}")
    snapshots = None
    if snapshot_paths:
        snapshots = CheckpointSet.load(snapshot_paths, tuple(marker["student_snapshot_epochs"]))
    return StageArtifacts(
        stage, variant, load_model(teacher_path), read_manifest(layout.manifest(variant, stage)),
        list(marker["candidate_ids"]), load_model(layout.student(variant, stage)),
        labeled_count=int(marker["labeled_count"]),
        pseudo_manifest=layout.manifest(variant, stage), student_snapshots=snapshots,
    )


# --- reports ----------------------------------------------------------------


def round_floats(obj, digits: int = 6):
    if isinstance(obj, float):
        return round(obj, digits)
    if isinstance(obj, dict):
        return {k: round_floats(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v, digits) for v in obj]
    return obj


def dump_report(report: dict) -> str:
    return json.dumps(round_floats(report), indent=1, sort_keys=True) + "\n"


def _stage(name: str, seed: int, fn, *args, phase: str | None = None, **kwargs):
    try:
        if phase is None:
            return fn(*args, **kwargs)
        with timed(phase, seed):
            return fn(*args, **kwargs)
    except StageError:
        raise
    except (DistError, ValueError, RuntimeError, OSError, KeyError) as exc:
        raise StageError(f"seed {seed} {name}", exc) from exc


def run_seed(config: ExperimentConfig, seed: int, out_dir: str | Path | None = None, base: ClipSet | None = None) -> dict:
    """Full pipeline for one seed, evaluation and audits included."""
    layout = seed_layout(out_dir, seed).make() if out_dir is not None else None
    data = _stage("data", seed, prepare_data, config, seed, base, phase="data")
    if layout is not None:
        save_clipset(data, layout.data_dir, with_frames=config.run.persist_frames)

    teacher = _stage("teacher", seed, train_teacher, config, data, seed, layout, phase="teacher")
    stages = {}
    variants = VARIANTS if config.ssl.ablation else ("dist",)
    for variant in variants:
        s1 = _stage(f"{variant} stage1", seed, run_stage1, config, data, seed, layout, variant, teacher)
        s2 = _stage(f"{variant} stage2", seed, run_stage2, config, data, seed, s1, layout)
        stages[f"{variant}_stage1"], stages[f"{variant}_stage2"] = s1, s2

    test = data.subset(TEST)
    models = {"supervised": teacher.model, **{k: v.student for k, v in stages.items()}}
    metrics = _stage("evaluate", seed, lambda: {k: evaluate(m, test, config.sampling) for k, m in models.items()},
                     phase="evaluate")
    oracle = data.subset(UNLABELED).oracle(purpose="audit")
    audits = {k: audit_summary(v.records, oracle, v.candidate_ids) for k, v in stages.items()}
    report = {
        "seed": seed,
        "split": {s: sum(c.split == s for c in data) for s in ("labeled", "unlabeled", "test")},
        "checkpoint_epochs": {
            "teacher": list(checkpoint_epochs(config.teacher.epochs)),
        },
        "models": metrics,
        "audit": audits,
    }
    if layout is not None:
        atomic_write_text(layout.root / "report.json", dump_report(report))
    return report


def summarize(config: ExperimentConfig, seed_reports: list[dict]) -> dict:
    names = list(DIST_MODELS) + (list(ABLATION_MODELS) if config.ssl.ablation else [])
    mean = {
        name: {
            metric: float(np.mean([r["models"][name][metric] for r in seed_reports]))
            for metric in ("accuracy", "macro_f1")
        }
        for name in names
    }
    base = mean["supervised"]["accuracy"]
    return {
        "schema_version": REPORT_SCHEMA,
        "config_hash": config_hash(config),
        "seeds": [r["seed"] for r in seed_reports],
        "models": names,
        "mean": mean,
        # accuracy points over the supervised baseline, averaged over seeds
        "improvement_points": {n: 100.0 * (mean[n]["accuracy"] - base) for n in names if n != "supervised"},
        "per_seed": seed_reports,
    }


def _seed_worker(args) -> dict:
    snapshot, seed, out_dir = args
    from dist_ssl.config import parse_config

    return run_seed(parse_config(snapshot), seed, out_dir)


def run_dist(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict:
    """Every configured seed, then the aggregate report and plots."""
    out = Path(out_dir if out_dir is not None else config.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = config.with_out_dir(str(out))
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("dist_ssl")
    pkg_log.addHandler(handler)
    previous_level = pkg_log.level
    pkg_log.setLevel(config.run.log_level.upper())
    try:
        atomic_write_text(out / "config.snapshot.toml", serialize_config(config))
        seeds = list(config.run.seeds)
        if config.run.parallel and len(seeds) > 1:
            snapshot = serialize_config(config)
            ctx = multiprocessing.get_context("spawn")
            with concurrent.futures.ProcessPoolExecutor(len(seeds), mp_context=ctx) as pool:
                seed_reports = list(pool.map(_seed_worker, [(snapshot, s, out) for s in seeds]))
        else:
            base = base_dataset(config)
            seed_reports = [run_seed(config, s, out, base) for s in seeds]
        report = summarize(config, seed_reports)
        atomic_write_text(out / "report.json", dump_report(report))
        _plots(out / "plots", report)
        log.info("run finished: %s", {k: round(v["accuracy"], 4) for k, v in report["mean"].items()})
        return report
    finally:
        pkg_log.removeHandler(handler)
        pkg_log.setLevel(previous_level)
        handler.close()


def _plots(directory: Path, report: dict) -> None:
    from dist_ssl.plots import plot_accuracy, plot_audit

    directory.mkdir(parents=True, exist_ok=True)
    plot_accuracy(directory / "accuracy.png", {k: v["accuracy"] for k, v in report["mean"].items()})
    totals: dict[str, dict] = {}
    for seed_report in report["per_seed"]:
        for stage, audit in seed_report["audit"].items():
            entry = totals.setdefault(stage, {"correct_retained": 0, "incorrect_retained": 0})
            entry["correct_retained"] += audit["correct_retained"]
            entry["incorrect_retained"] += audit["incorrect_retained"]
    plot_audit(directory / "audit.png", totals)
