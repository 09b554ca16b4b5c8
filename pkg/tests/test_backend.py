import numpy as np
import pytest
import torch

from dist_ssl.backend import (
    CheckpointSet,
    ModelSpec,
    TrainedModel,
    TrainSchedule,
    build_module,
    checkpoint_epochs,
    load_model,
    lr_at_epoch,
    predict_probs,
    save_model,
    train,
)
from dist_ssl.clipset import TEST, generate_synthetic_dataset, split_labeled_unlabeled
from dist_ssl.errors import ParameterError, TrainingError, ValidationError
from dist_ssl.evaluation import evaluate
from dist_ssl.sampling import AugmentParams, SamplingParams

S, A = SamplingParams(8), AugmentParams()
SPEC = ModelSpec(num_classes=4, input_shape=(8, 16, 16), width=8)


def test_learning_rate_steps():
    schedule = TrainSchedule()
    assert lr_at_epoch(schedule, 0) == 0.005
    assert lr_at_epoch(schedule, 1) == 0.005
    assert lr_at_epoch(schedule, 4) == pytest.approx(0.00405, abs=1e-15)
    with pytest.raises(ParameterError):
        lr_at_epoch(schedule, 40)
    with pytest.raises(ParameterError):
        lr_at_epoch(schedule, -1)


def test_checkpoint_epochs():
    assert checkpoint_epochs(40) == (14, 27, 40)
    assert checkpoint_epochs(3) == (1, 2, 3)
    assert checkpoint_epochs(6) == (2, 4, 6)
    with pytest.raises(ParameterError):
        checkpoint_epochs(2)


@pytest.mark.parametrize("n", range(3, 200))
def test_checkpoint_epochs_distinct_and_ceiling(n):
    e1, e2, e3 = checkpoint_epochs(n)
    assert e1 < e2 < e3 == n
    assert e1 == int(np.ceil(n / 3)) and e2 == int(np.ceil(2 * n / 3))


@pytest.mark.parametrize("kwargs", [dict(epochs=2), dict(base_lr=0), dict(batch_size=0), dict(momentum=1.0)])
def test_schedule_validation(kwargs):
    with pytest.raises(ParameterError):
        TrainSchedule(**kwargs)


def test_unknown_architecture():
    with pytest.raises(ParameterError):
        build_module(ModelSpec(architecture="nope"))


def test_probability_vector(rng):
    model = TrainedModel(SPEC, build_module(SPEC))
    p = predict_probs(model, rng.random((8, 16, 16)))
    assert p.shape == (4,)
    assert p.sum() == pytest.approx(1.0, abs=1e-6)


def test_zero_head_is_uniform(rng):
    spec = ModelSpec(num_classes=4, input_shape=(8, 16, 16), width=8, zero_head=True)
    p = predict_probs(TrainedModel(spec, build_module(spec)), rng.random((8, 16, 16)))
    np.testing.assert_allclose(p, 0.25, atol=1e-12)


def test_shape_mismatch(rng):
    model = TrainedModel(SPEC, build_module(SPEC))
    with pytest.raises(ValidationError):
        predict_probs(model, rng.random((6, 16, 16)))


def tiny_task(n=24, classes=4):
    cs = generate_synthetic_dataset(n, classes, frames_per_clip=8, frame_size=16, difficulty=0.1, seed=2)
    return cs.stacked_frames(), cs.oracle().labels(cs.ids)


def test_single_class_gives_constant_predictor():
    frames, _ = tiny_task(8)
    spec = ModelSpec(num_classes=1, input_shape=(8, 16, 16), width=8)
    result = train(spec, frames, np.zeros(8, dtype=np.int64), TrainSchedule(epochs=3), S, A, seed=0)
    assert (result.model.predict_clips(frames, S).argmax(axis=1) == 0).all()


def test_label_out_of_range():
    frames, labels = tiny_task()
    with pytest.raises(TrainingError):
        train(SPEC, frames, labels + 4, TrainSchedule(epochs=3), S, A, seed=0)
    with pytest.raises(TrainingError):
        train(SPEC, frames, labels[:-1], TrainSchedule(epochs=3), S, A, seed=0)


def test_non_finite_loss_aborts():
    frames, labels = tiny_task()
    frames = frames.copy()
    frames[:] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train(SPEC, frames, labels, TrainSchedule(epochs=3), S, A, seed=0)


def test_training_is_deterministic():
    frames, labels = tiny_task()
    a = train(SPEC, frames, labels, TrainSchedule(epochs=3), S, A, seed=4)
    b = train(SPEC, frames, labels, TrainSchedule(epochs=3), S, A, seed=4)
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])
    assert a.epoch_lr == pytest.approx([0.005, 0.005, 0.0045], abs=1e-15)
    assert all(np.isfinite(a.epoch_loss))


def test_checkpoints_round_trip(tmp_path):
    frames, labels = tiny_task()
    result = train(SPEC, frames, labels, TrainSchedule(epochs=6), S, A, seed=1,
                   save_checkpoints=True, checkpoint_dir=tmp_path)
    assert result.checkpoints.epochs == (2, 4, 6)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["teacher_e2.bin", "teacher_e4.bin", "teacher_e6.bin"]
    loaded = CheckpointSet.load([tmp_path / f"teacher_e{e}.bin" for e in (2, 4, 6)], (2, 4, 6))
    for original, restored in zip(result.checkpoints.models(), loaded.models()):
        np.testing.assert_array_equal(original.predict_clips(frames, S), restored.predict_clips(frames, S))
    # the last snapshot is the final model
    np.testing.assert_array_equal(loaded.models()[-1].predict_clips(frames, S), result.model.predict_clips(frames, S))


def test_save_and_load_model(tmp_path):
    model = TrainedModel(SPEC, build_module(SPEC))
    save_model(model, tmp_path / "m.bin")
    restored = load_model(tmp_path / "m.bin")
    assert restored.spec == SPEC
    frames, _ = tiny_task(4)
    np.testing.assert_array_equal(model.predict_clips(frames, S), restored.predict_clips(frames, S))


def test_checkpoint_set_validation():
    with pytest.raises(ValidationError):
        CheckpointSet((3, 2, 1), ({}, {}, {}), SPEC)


@pytest.mark.slow
def test_noise_free_full_labels_reach_95_percent():
    cs = split_labeled_unlabeled(generate_synthetic_dataset(600, 4, 16, 32, 0.0, 1), 1.0, 0.2, seed=0)
    x, y, _ = cs.labeled_examples()
    model = train(ModelSpec(input_shape=(8, 32, 32)), x, y, TrainSchedule(epochs=12), S, A, seed=0).model
    assert evaluate(model, cs.subset(TEST), S)["accuracy"] >= 0.95
