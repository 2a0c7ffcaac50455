import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abd.train_eval import auroc, evaluate, fp_offset_histogram, lead_credit_relabel
from abd.train_eval.metrics import (NO_EVENT, FoldScores, confusion_matrix, fold_aurocs, fold_interval,
                                    metrics_table_csv)


def brute_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert auroc([0.1, 0.2], [1, 1]) is None and auroc([0.1, 0.2], [0, 0]) is None


def test_auroc_exhaustive_small_cases():
    # every label vector and every score ranking with ties, lengths up to 6
    for n in range(2, 7):
        for labels in itertools.product([0, 1], repeat=n):
            for scores in itertools.product(range(3), repeat=n) if n <= 5 else [tuple(range(n))]:
                assert auroc(scores, labels) == brute_auroc(scores, labels)


@settings(max_examples=500, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=12))
def test_auroc_matches_concordant_pairs(pairs):
    scores, labels = zip(*pairs)
    got, want = auroc(scores, labels), brute_auroc(scores, labels)
    assert (got is None and want is None) or got == pytest.approx(want, abs=1e-12)


def test_fold_interval():
    iv = fold_interval([0.8, 0.82, 0.84, 0.86, 0.88])
    half = 1.96 * np.std([0.8, 0.82, 0.84, 0.86, 0.88], ddof=1) / np.sqrt(5)
    assert iv.mean == pytest.approx(0.84) and iv.high - iv.mean == pytest.approx(half)
    assert iv.low <= iv.mean <= iv.high
    assert fold_interval([0.7]).to_dict()["ci_low"] == 0.7 == fold_interval([0.7]).high
    assert fold_interval([None, None]).mean is None
    assert fold_interval([None, 0.6, 0.8]).mean == pytest.approx(0.7)


def test_confusion_skips_masked():
    m = confusion_matrix(np.array([0, 1, -1, 1]), np.array([0, 0, 1, 1]), 2)
    assert m.tolist() == [[1, 0], [1, 1]]


def test_lead_credit_examples():
    labels = np.zeros(14, dtype=int)
    labels[0] = -1
    labels[10] = 2
    out = lead_credit_relabel(labels, 4)
    assert np.flatnonzero(out[:, 2] == 1).tolist() == [6, 7, 8, 9, 10]
    assert out[5, 2] == 0
    assert out[0].tolist() == [-1] * 6
    # NoChange keeps its raw indicator
    assert out[:, 0].tolist() == [-1] + [1] * 9 + [0] + [1] * 3
    with pytest.raises(ValueError):
        lead_credit_relabel(labels, -1)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(-1, 5), min_size=1, max_size=20))
def test_lead_credit_identity_and_monotone(labels):
    labels = np.array(labels)
    raw = lead_credit_relabel(labels, 0)
    onehot = np.full((len(labels), 6), -1)
    v = labels >= 0
    onehot[v] = np.eye(6, dtype=int)[labels[v]]
    assert np.array_equal(raw, onehot)
    counts = [int((lead_credit_relabel(labels, h) == 1).sum()) for h in range(6)]
    assert counts == sorted(counts)


def test_fp_offsets():
    pred = [np.array([0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 2, 0, 2]), np.array([0, 2, 2])]
    true = [np.array([-1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0]), np.array([-1, 0, 0])]
    hist = fp_offset_histogram(pred, true, classes=[2])
    assert hist[2] == Counter({-3: 1, 2: 1, NO_EVENT: 2})


def test_fp_offset_tie_goes_before_event():
    hist = fp_offset_histogram([np.array([0, 0, 2, 0, 0])], [np.array([-1, 2, 0, 2, 0])], classes=[2])
    assert hist[2] == Counter({-1: 1})


def _fold(rng, n_stays=30, K=10):
    ol, tl, op, tp = [], [], [], []
    for _ in range(n_stays):
        o = rng.integers(0, 4, K)
        t = rng.integers(0, 6, K)
        t[0] = -1
        ol.append(o)
        tl.append(t)
        op.append(rng.dirichlet(np.ones(4), K))
        tp.append(rng.dirichlet(np.ones(6), K))
    return FoldScores([f"s{i}" for i in range(n_stays)], op, tp, ol, tl, ["a", "b"] * (n_stays // 2))


def test_evaluate_report_and_horizon_zero_bit_exact():
    rng = np.random.default_rng(0)
    folds = [_fold(rng) for _ in range(5)]
    rep = evaluate(folds, lead_horizons=(0, 4))
    assert rep.n_folds == 5
    for head in ("outcome", "transition"):
        for c, iv in getattr(rep, head).items():
            assert 0 <= iv.mean <= 1 and iv.low <= iv.mean <= iv.high
            assert rep.lead[0][head][c] == iv  # identical floats, not approximately
    assert rep.confusion_transition.sum() == sum(int((t >= 0).sum()) for f in folds for t in f.transition_labels)
    assert set(rep.groups) == {"a", "b"}
    d = rep.to_dict()
    assert set(d) >= {"outcome", "transition", "lead", "confusion", "fp_offsets", "groups"}
    assert "lead_4" in rep.table_csv(4).splitlines()[0]


def test_undefined_class_reported_as_none():
    rng = np.random.default_rng(1)
    f = _fold(rng)
    f.outcome_labels = [np.zeros(10, dtype=int) for _ in f.outcome_labels]
    rep = evaluate([f])
    assert rep.outcome["Coma"].mean is None
    assert "undefined" in metrics_table_csv([("raw", {"outcome": rep.outcome, "transition": rep.transition})])


def test_masked_rows_excluded():
    rng = np.random.default_rng(2)
    f = _fold(rng)
    a = fold_aurocs(f)
    f.transition_probs = [np.where((t < 0)[:, None], rng.dirichlet(np.ones(6), len(t)), p)
                          for p, t in zip(f.transition_probs, f.transition_labels)]
    assert fold_aurocs(f) == a
