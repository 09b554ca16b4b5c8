import dataclasses
import logging

import numpy as np
import pytest
import torch
import torch.nn as nn

from dist_ssl.backend import CheckpointSet, ModelSpec, TrainedModel, TrainResult, build_module, register_backend
from dist_ssl.clipset import UNLABELED, generate_synthetic_dataset, watch_oracle_access
from dist_ssl.config import parse_config
from dist_ssl.errors import ArtifactError, StageError
from dist_ssl.pipeline import (
    ABLATION_MODELS,
    DIST_MODELS,
    labeled_repeats,
    load_stage,
    prepare_data,
    run_dist,
    run_seed,
    run_stage1,
    run_stage2,
    seed_layout,
    train_teacher,
)
from dist_ssl.reliability import read_manifest
from tests.conftest import TINY_CONFIG


class ConfidentConstant(nn.Module):
    """Always predicts class 0, more confidently for brighter clips: invariant, distinct scores."""

    def __init__(self, num_classes):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        s = 1.0 + 50.0 * x.mean(dim=(1, 2, 3))
        logits = torch.zeros(len(x), self.num_classes)
        logits[:, 0] = s
        return logits


register_backend("confident_constant", lambda spec: ConfidentConstant(spec.num_classes))


@pytest.fixture
def data(tiny_config):
    return prepare_data(tiny_config, seed=0)


def fixed_teacher(spec):
    model = TrainedModel(spec, build_module(spec))
    states = (model.state_dict(),) * 3
    return TrainResult(model, CheckpointSet((1, 2, 3), states, spec), [], [])


def test_labeled_repeats():
    assert labeled_repeats(100, 0, 0.5) == 1
    assert labeled_repeats(100, 800, 0.0) == 1
    assert labeled_repeats(100, 800, 0.5) == 8
    assert labeled_repeats(100, 801, 0.5) == 9
    assert labeled_repeats(100, 50, 0.5) == 1


def test_stage1_invariants(tiny_config, data):
    s1 = run_stage1(tiny_config, data, seed=0)
    unlabeled = data.subset(UNLABELED)
    assert len(s1.records) == len(unlabeled)
    assert s1.retained_count <= len(unlabeled)
    assert {r.clip_id for r in s1.retained} <= set(s1.candidate_ids)
    assert len(s1.candidate_ids) <= len(unlabeled) // 2
    assert all(r.invariant for r in s1.retained)
    assert s1.mixed_size == len(data.labeled_examples()[2]) + s1.retained_count


def test_invariant_consistent_teacher_keeps_half(tiny_config, data):
    spec = dataclasses.replace(tiny_config.model_spec(), architecture="confident_constant")
    s1 = run_stage1(tiny_config, data, seed=0, teacher=fixed_teacher(spec))
    scores = [r.reliability for r in s1.records]
    assert len(set(scores)) == len(scores)
    assert s1.retained_count == len(scores) // 2
    assert all(r.argmax_class == 0 for r in s1.retained)


def test_degenerate_selection_falls_back_to_labeled(tiny_config, data, caplog):
    spec = dataclasses.replace(tiny_config.model_spec(), zero_head=True)
    with caplog.at_level(logging.WARNING):
        s1 = run_stage1(tiny_config, data, seed=0, teacher=fixed_teacher(spec))
    assert s1.retained_count == 0
    assert s1.mixed_size == len(data.labeled_examples()[2])
    assert "degenerate selection" in caplog.text
    assert "labeled clips only" in caplog.text


def test_all_labeled_reduces_to_supervised(tiny_config):
    cfg = parse_config(TINY_CONFIG.replace("labeled_fraction = 0.25", "labeled_fraction = 1.0"))
    data = prepare_data(cfg, seed=0)
    s1 = run_stage1(cfg, data, seed=0)
    s2 = run_stage2(cfg, data, 0, s1)
    assert s1.records == [] and s1.retained_count == 0
    assert s2.records == [] and s2.retained_count == 0


def test_stage2_requires_stage1(tiny_config, data):
    with pytest.raises(ArtifactError, match="stage1 artifacts missing"):
        run_stage2(tiny_config, data, 0, None)


def test_stage2_pseudo_labels_everything(tiny_config, data):
    s1 = run_stage1(tiny_config, data, seed=0)
    s2 = run_stage2(tiny_config, data, 0, s1)
    assert len(s2.candidate_ids) == len(data.subset(UNLABELED))
    assert all(r.stage == 2 and r.reliability is None for r in s2.records)
    assert all(r.invariant for r in s2.retained)
    assert s2.retained_count <= len(s2.records)


def test_ablation_keeps_unfiltered_sets(tiny_config, data):
    teacher = train_teacher(tiny_config, data, 0)
    dist = run_stage1(tiny_config, data, 0, variant="dist", teacher=teacher)
    st = run_stage1(tiny_config, data, 0, variant="st", teacher=teacher)
    assert {r.clip_id for r in st.retained} == set(st.candidate_ids) == set(dist.candidate_ids)
    assert {r.clip_id for r in dist.retained} <= {r.clip_id for r in st.retained}
    st2 = run_stage2(tiny_config, data, 0, st)
    assert st2.retained_count == len(data.subset(UNLABELED))


def test_pipeline_never_reads_hidden_labels(tiny_config, data):
    with watch_oracle_access() as events:
        s1 = run_stage1(tiny_config, data, seed=0)
        run_stage2(tiny_config, data, 0, s1)
    assert events == []


def test_full_run_reads_hidden_labels_only_to_evaluate_and_audit(tiny_config):
    with watch_oracle_access() as events:
        run_seed(tiny_config, 0)
    assert events
    assert {(split, purpose) for _, split, purpose in events} == {("test", "evaluate"), ("unlabeled", "audit")}


def test_run_layout_and_report(tmp_path, tiny_config):
    cfg = dataclasses.replace(tiny_config, ssl=dataclasses.replace(tiny_config.ssl, ablation=True))
    report = run_dist(cfg, tmp_path)
    assert report["models"] == list(DIST_MODELS + ABLATION_MODELS)
    assert set(report["per_seed"][0]["models"]) == set(DIST_MODELS + ABLATION_MODELS)
    seed_dir = tmp_path / "seed_0"
    for name in ["stage1.tsv", "stage2.tsv", "st_stage1.tsv", "st_stage2.tsv",
                 "stage1_verdicts.tsv", "stage2_verdicts.tsv"]:
        assert (seed_dir / "manifests" / name).is_file()
    for name in ["teacher_e1.bin", "teacher_e2.bin", "teacher_e3.bin", "student_stage1.bin",
                 "student_stage2.bin", "st_student_stage1.bin", "st_student_stage2.bin"]:
        assert (seed_dir / "checkpoints" / name).is_file()
    for name in ["config.snapshot.toml", "report.json", "run.log", "plots/accuracy.png", "plots/audit.png"]:
        assert (tmp_path / name).is_file()
    audit = report["per_seed"][0]["audit"]["dist_stage1"]
    quadrants = ["correct_retained", "incorrect_retained", "correct_discarded", "incorrect_discarded"]
    assert sum(audit[q] for q in quadrants) == audit["scored"]
    assert str(tmp_path) not in (tmp_path / "report.json").read_text()


def test_run_is_deterministic(tmp_path, tiny_config):
    run_dist(tiny_config, tmp_path / "a")
    run_dist(tiny_config, tmp_path / "b")
    for rel in ["report.json", "seed_0/report.json", "seed_0/manifests/stage1.tsv",
                "seed_0/manifests/stage2.tsv", "seed_0/manifests/stage1_verdicts.tsv"]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_resume_stage2_from_disk(tmp_path, tiny_config, data):
    layout = seed_layout(tmp_path, 0).make()
    s1 = run_stage1(tiny_config, data, 0, layout)
    restored = load_stage(tiny_config, data, layout, "dist", 1)
    # the manifest stores scores to 6 dp
    assert [dataclasses.replace(r, reliability=None) for r in restored.records] == \
        [dataclasses.replace(r, reliability=None) for r in s1.records]
    assert [r.reliability for r in restored.records] == pytest.approx([r.reliability for r in s1.records], abs=1e-6)
    assert restored.candidate_ids == s1.candidate_ids
    a = run_stage2(tiny_config, data, 0, s1)
    b = run_stage2(tiny_config, data, 0, restored)
    assert a.records == b.records
    (layout.checkpoints / "student_stage1.bin").unlink()
    with pytest.raises(ArtifactError, match="stage1 artifacts missing"):
        load_stage(tiny_config, data, layout, "dist", 1)


def test_best_labeled_teacher_option(tmp_path, tiny_config, data):
    cfg = dataclasses.replace(tiny_config, ssl=dataclasses.replace(tiny_config.ssl, stage2_teacher="best_labeled"))
    layout = seed_layout(tmp_path, 0).make()
    s1 = run_stage1(cfg, data, 0, layout)
    assert s1.student_snapshots is not None and s1.student_snapshots.epochs == (1, 2, 3)
    restored = load_stage(cfg, data, layout, "dist", 1)
    s2 = run_stage2(cfg, data, 0, restored, layout)
    assert read_manifest(layout.manifest("dist", 2)) == s2.records


def test_stage_errors_carry_context(tiny_config):
    wrong = generate_synthetic_dataset(40, 3, frames_per_clip=8, frame_size=16, seed=0)
    with pytest.raises(StageError, match="seed 0 data"):
        run_seed(tiny_config, 0, base=wrong)


def test_warm_start_option(tiny_config, data):
    cfg = dataclasses.replace(tiny_config, ssl=dataclasses.replace(tiny_config.ssl, stage2_warm_start=True))
    s1 = run_stage1(cfg, data, 0)
    s2 = run_stage2(cfg, data, 0, s1)
    assert s2.student is not s1.student
    assert np.isfinite(s2.student.predict_clips(data.stacked_frames()[:2], cfg.sampling)).all()
