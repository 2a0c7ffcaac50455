import warnings

import numpy as np
import pytest

from abd.events import filter_inclusion, stay_from_dict, window_stay
from abd.model import ModelConfig
from abd.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from abd.synthgen import default_generator_config, sample_cohort, to_records
from abd.train_eval import (PredictionError, SplitError, TrainConfig, evaluate_checkpoints, make_splits, predict,
                            train_model)
from abd.train_eval.data import build_sequence_batch, bucketed_groups, pack_stays
from abd.train_eval.engine import PAIR_MAP, derive_transitions
from abd.train_eval.splits import stays_of
from abd.train_eval.training import check_provenance

TINY = ModelConfig(d_model=8, d_state=4, n_layers=1, dropout=0.0)


def cohort(n, seed=1, variant="base"):
    return filter_inclusion(to_records(sample_cohort(default_generator_config(variant, seed, n))[0]))


@pytest.fixture(scope="module")
def small():
    stays = cohort(50)
    plan = make_splits([s.patient_id for s in stays], 0)
    res = train_model(stays, plan, TrainConfig(epochs=2, seed=0), TINY, folds=[0, 1])
    return stays, plan, res


def test_splits():
    ids = [f"p{i:03d}" for i in range(100)]
    plan = make_splits(ids + ids[:10], 3)
    assert len(plan.dev) == 80 and len(plan.test) == 20
    assert [len(f) for f in plan.folds] == [16] * 5
    assert make_splits(ids, 3) == plan and make_splits(ids, 4) != plan
    assert not set(plan.dev) & set(plan.test)
    uneven = make_splits([f"p{i}" for i in range(23)], 0)
    sizes = [len(f) for f in uneven.folds]
    assert max(sizes) - min(sizes) <= 1
    with pytest.raises(SplitError):
        make_splits(ids[:9], 0)


def test_patient_stays_travel_together():
    stays = cohort(40)
    plan = make_splits([s.patient_id for s in stays], 0)
    multi = [p for p in {s.patient_id for s in stays} if sum(s.patient_id == p for s in stays) >= 2]
    assert multi
    where = {p: ("test" if p in plan.test else plan.fold_of()[p]) for p in multi}
    for s in stays:
        if s.patient_id in where:
            assert (s.patient_id in plan.test) == (where[s.patient_id] == "test")


def test_split_roundtrip():
    plan = make_splits([f"p{i}" for i in range(30)], 2)
    assert type(plan).from_dict(plan.to_dict()) == plan


def test_training_loss_decreases_and_logs(small):
    _, _, res = small
    for r in res:
        losses = [row["train_loss"] for row in r.log]
        assert len(losses) == 2 and losses[1] < losses[0]
        assert r.checkpoint.meta["best_epoch"] in (1, 2)


def test_no_leakage_every_fold(small):
    _, plan, res = small
    for r in res:
        f = r.fold
        assert r.data.vocab.provenance == set(plan.train_patients(f)) & r.data.vocab.provenance
        assert not r.data.vocab.provenance & (set(plan.val_patients(f)) | set(plan.test))
        check_provenance(r.data, plan.train_patients(f))
        with pytest.raises(SplitError):
            check_provenance(r.data, plan.val_patients(f))


def test_prefix_invariance(small):
    stays, plan, res = small
    ckpt = res[0].checkpoint
    rng = np.random.default_rng(0)
    checked = 0
    for idx in rng.permutation(len(stays))[:50]:
        s = stays[idx]
        o, t = predict(ckpt, s)
        K = len(o)
        assert t.shape == (K, 6) and np.allclose(o.sum(1), 1, atol=1e-12)
        if K < 2:
            continue
        j = int(rng.integers(1, K))
        cut = 12.0 * (j + 1)  # keeps windows 1..j, all data before hour 12 (j + 1)
        trunc = stay_from_dict({
            "stay_id": s.stay_id, "patient_id": s.patient_id, "los_hours": cut, "death_hour": None,
            "statics": s.statics,
            "events": [[float(a), str(b), float(c)] for a, b, c in zip(s.times, s.codes, s.values) if a < cut],
            "scores": [[a, b, c] for a, b, c in s.scores if a < cut]})
        o2, t2 = predict(ckpt, trunc)
        assert len(o2) == j
        assert np.array_equal(o2, o[:j]) and np.array_equal(t2, t[:j])
        checked += 1
    assert checked >= 30


def test_determinism_bit_identical():
    stays = cohort(20, seed=4)
    plan = make_splits([s.patient_id for s in stays], 1)
    a = train_model(stays, plan, TrainConfig(epochs=1, seed=5), TINY, folds=[2])[0]
    b = train_model(stays, plan, TrainConfig(epochs=1, seed=5), TINY, folds=[2])[0]
    assert a.log == b.log
    for k in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[k].data, b.checkpoint.params[k].data)


def test_checkpoint_roundtrip(small, tmp_path):
    stays, _, res = small
    ckpt = res[0].checkpoint
    save_checkpoint(ckpt, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.config == ckpt.config and back.arch == ckpt.arch and back.meta == ckpt.meta
    o1, _ = predict(ckpt, stays[0])
    o2, _ = predict(back, stays[0])
    assert np.array_equal(o1, o2)
    blob = (tmp_path / "ck" / "params.bin").read_bytes()
    (tmp_path / "ck" / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")
    (tmp_path / "ck" / "vocab.json").unlink()
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "ck")


def test_prediction_mismatch_rejected(small):
    stays, _, res = small
    ckpt = res[0].checkpoint
    s = res[0].data.stays[stays[0].stay_id]
    from abd.events import clean_stay
    cleaned = clean_stay(stays[0], ckpt.vocab)
    cleaned.codes = cleaned.codes.copy()
    cleaned.codes[0] = "vital:unseen"
    with pytest.raises(PredictionError):
        predict(ckpt, cleaned)
    assert s.n_intervals == len(predict(ckpt, stays[0])[0])


def test_ablated_head_derives_transitions():
    stays = cohort(20, seed=2)
    plan = make_splits([s.patient_id for s in stays], 0)
    r = train_model(stays, plan, TrainConfig(epochs=1, seed=0, transition_head=False), TINY, folds=[0])[0]
    assert r.checkpoint.meta["transition_head"] is False
    o, t = predict(r.checkpoint, stays[0])
    np.testing.assert_allclose(t, derive_transitions(o, np.arange(len(o)) - 1))


def test_derive_transitions():
    o = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0, 0, 1.0, 0]])
    t = derive_transitions(o, np.array([-1, 0, 1]))
    assert t.argmax(1).tolist() == [0, 2, 4]
    # Coma -> Delirium maps to Masked and is dropped from the distribution
    assert PAIR_MAP[2, 1].sum() == 0
    mixed = derive_transitions(np.full((2, 4), 0.25), np.array([-1, 0]))
    np.testing.assert_allclose(mixed.sum(1), 1)


def test_gru_and_linear_archs_train():
    stays = cohort(20, seed=6)
    plan = make_splits([s.patient_id for s in stays], 0)
    for arch, cfg in (("gru", ModelConfig(d_model=8, gru_widths=(8, 4), dropout=0.0)), ("linear", None)):
        r = train_model(stays, plan, TrainConfig(arch=arch, epochs=1, seed=0), cfg, folds=[0])[0]
        o, t = predict(r.checkpoint, stays[0])
        assert np.allclose(o.sum(1), 1) and np.allclose(t.sum(1), 1)


def test_batches():
    stays = cohort(20, seed=6)
    plan = make_splits([s.patient_id for s in stays], 0)
    data = train_model(stays, plan, TrainConfig(epochs=1, seed=0), TINY, folds=[0])[0].data
    arrays = list(data.stays.values())
    groups = bucketed_groups(arrays, 32, np.random.default_rng(0))
    assert sorted(s.stay_id for g in groups for s in g) == sorted(s.stay_id for s in arrays)
    assert all(sum(s.n_intervals for s in g) >= 32 for g in pack_stays(arrays, 32)[:-1])
    b = build_sequence_batch(arrays[:3], 999, 5)
    assert b.codes.shape[1] <= 5 and b.n_rows == sum(s.n_intervals for s in arrays[:3])


def test_cross_cohort_smoke(small):
    _, _, res = small
    other = cohort(20, seed=9, variant="hospital_b")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = evaluate_checkpoints([r.checkpoint for r in res], other, group_by="sex_male")
    assert rep.n_folds == 2
    assert set(rep.outcome) == {"Normal", "Delirium", "Coma", "Deceased"}
    assert set(rep.groups) <= {"0", "1", "missing"}


def test_transition_class_weights():
    from types import SimpleNamespace
    from abd.train_eval.training import transition_class_weights
    stays = [SimpleNamespace(transition=np.array([-1, 0, 0, 0, 0, 0, 0, 2, 0, 5]))]
    np.testing.assert_array_equal(transition_class_weights(stays, "uniform"), np.ones(6))
    # 9 valid labels over 3 present classes: 7 NoChange, 1 NormalToDelirium, 1 AnyToDeath
    w = transition_class_weights(stays, "balanced")
    np.testing.assert_allclose(w, [9 / 21, 1, 3, 1, 1, 3])
    with pytest.raises(ValueError):
        TrainConfig(class_weights="inverse")
