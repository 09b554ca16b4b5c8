import random

import pytest

from dist_ssl.backend import ModelSpec, TrainedModel, build_module
from dist_ssl.clipset import UNLABELED
from dist_ssl.errors import ValidationError
from dist_ssl.invariance import (
    InvarianceVerdict,
    apply_verdicts,
    dual_invariance_keep,
    filter_records,
    invariance_verdicts,
    read_verdicts,
    write_verdicts,
)
from dist_ssl.reliability import PseudoLabelRecord
from dist_ssl.sampling import AugmentParams, SamplingParams

S, A = SamplingParams(8), AugmentParams()


def model(zero_head=False, num_classes=4, seed=0):
    spec = ModelSpec(num_classes=num_classes, input_shape=(8, 16, 16), width=8,
                     init_seed=seed, zero_head=zero_head)
    return TrainedModel(spec, build_module(spec))


@pytest.fixture(scope="module")
def unlabeled(small_split):
    return small_split.subset(UNLABELED)


def records_for(clips):
    return [PseudoLabelRecord(c, 0, 0.3) for c in clips.ids]


def test_keep_rule():
    assert dual_invariance_keep(2, 2)
    assert not dual_invariance_keep(2, 1)
    assert InvarianceVerdict("x", 3, 3).keep
    assert not InvarianceVerdict("x", 3, 0).keep


def test_constant_model_keeps_everything(unlabeled):
    verdicts = invariance_verdicts(model(zero_head=True), unlabeled, unlabeled.ids, S, A, seed=0)
    assert all(v.keep for v in verdicts)


def test_invariant_model_returns_its_input(unlabeled):
    records = records_for(unlabeled)
    kept = filter_records(model(zero_head=True), records, unlabeled, S, A, seed=0)
    assert [r.clip_id for r in kept] == [r.clip_id for r in records]
    assert all(r.invariant and r.retained for r in kept)


def test_empty_input(unlabeled):
    assert filter_records(model(), [], unlabeled, S, A, seed=0) == []


def test_missing_clip_is_named(unlabeled):
    with pytest.raises(KeyError, match="ghost"):
        invariance_verdicts(model(), unlabeled, ["ghost"], S, A, seed=0)


def test_class_count_mismatch(unlabeled):
    with pytest.raises(ValidationError):
        invariance_verdicts(model(num_classes=3), unlabeled, unlabeled.ids, S, A, seed=0)


def test_verdicts_do_not_depend_on_order_or_batching(unlabeled):
    m = model(seed=3)
    ids = unlabeled.ids
    base = {v.clip_id: v for v in invariance_verdicts(m, unlabeled, ids, S, A, seed=9)}
    shuffled = ids[:]
    random.Random(0).shuffle(shuffled)
    again = invariance_verdicts(m, unlabeled, shuffled, S, A, seed=9, batch_size=5)
    assert {v.clip_id: v for v in again} == base


def test_label_source_and_monotonicity(unlabeled):
    m = model(seed=5)
    records = records_for(unlabeled)
    kept = filter_records(m, records, unlabeled, S, A, seed=1)
    assert len(kept) <= len(records)
    uniform = m.predict_clips(unlabeled.stacked_frames(), S).argmax(axis=1)
    by_id = dict(zip(unlabeled.ids, uniform))
    for r in kept:
        assert r.invariant and r.retained
        assert r.argmax_class == by_id[r.clip_id]


def test_apply_verdicts_flags():
    records = [PseudoLabelRecord("a", 0, 0.4), PseudoLabelRecord("b", 1, 0.3)]
    out = apply_verdicts(records, [InvarianceVerdict("a", 2, 2), InvarianceVerdict("b", 1, 0)])
    assert (out[0].argmax_class, out[0].invariant, out[0].retained) == (2, True, True)
    assert (out[1].argmax_class, out[1].invariant, out[1].retained) == (1, False, False)
    assert out[0].reliability == 0.4


def test_verdict_sidecar_round_trip(tmp_path):
    verdicts = [InvarianceVerdict("a", 1, 1), InvarianceVerdict("b", 2, 0)]
    path = write_verdicts(tmp_path / "v.tsv", verdicts)
    assert path.read_text().splitlines()[2] == "b\t2\t0\t0"
    assert read_verdicts(path) == verdicts

