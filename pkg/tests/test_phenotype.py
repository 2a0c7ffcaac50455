import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from abd.phenotype import (AbdState, ScoreSnapshot, assemble_trajectory, collect_interval_scores,
                           forward_fill_scores, label_stay, phenotype_interval)
from abd.events import stay_from_dict, window_stay

N, D, C, X, U = AbdState.NORMAL, AbdState.DELIRIUM, AbdState.COMA, AbdState.DECEASED, AbdState.UNKNOWN

RASS = [None] + list(range(-5, 5))
GCS = [None] + list(range(3, 16))
CAM = [None, True, False]


def oracle(rass, gcs, cam):
    """Decision logic written out branch by branch, independent of the implementation."""
    if rass is not None:
        if rass <= -4:
            return C
        if rass == -3:
            if gcs is None:
                return U
            return C if gcs <= 8 else D
    else:
        if gcs is not None and gcs <= 8:
            return C
    if cam is True:
        return D
    if cam is False:
        return N
    return U


def test_truth_table_exhaustive():
    # 11 RASS options x 14 GCS options x 3 CAM options
    cases = list(itertools.product(RASS, GCS, CAM))
    assert len(cases) == 462
    failures = [(r, g, c) for r, g, c in cases
                if phenotype_interval(ScoreSnapshot(1, r, g, c)) != oracle(r, g, c)]
    assert failures == []


@pytest.mark.parametrize("snap,expected", [
    (dict(rass=-4), C),
    (dict(rass=-3, gcs=9), D),
    (dict(gcs=7), C),
    (dict(rass=0, cam=True), D),
    (dict(rass=0), U),
])
def test_reference_examples(snap, expected):
    assert phenotype_interval(ScoreSnapshot(1, **snap)) == expected


def test_coma_dominance():
    for r in (-5, -4):
        for g, c in itertools.product(GCS, CAM):
            assert phenotype_interval(ScoreSnapshot(1, r, g, c)) == C


@pytest.mark.parametrize("snap", [dict(rass=5), dict(rass=-6), dict(gcs=2), dict(gcs=16)])
def test_out_of_range_rejected(snap):
    with pytest.raises(ValueError):
        phenotype_interval(ScoreSnapshot(1, **snap))


# ----------------------------------------------------------------------------
# forward fill

FIELDS = ("rass", "gcs", "cam")


def fill_oracle(seq):
    """seq: list of dicts name -> value or None (raw measurements)."""
    out = [dict(s) for s in seq]
    for k in range(1, len(seq)):
        for name in FIELDS:
            if seq[k][name] is None and seq[k - 1][name] is not None \
                    and any(seq[k][o] is not None for o in FIELDS if o != name):
                out[k][name] = seq[k - 1][name]
    return out


def snapshots(seq):
    return [ScoreSnapshot(k + 1, s["rass"], s["gcs"], s["cam"]) for k, s in enumerate(seq)]


score_row = st.fixed_dictionaries({
    "rass": st.one_of(st.none(), st.integers(-5, 4)),
    "gcs": st.one_of(st.none(), st.integers(3, 15)),
    "cam": st.one_of(st.none(), st.booleans()),
})


@settings(max_examples=1000, deadline=None)
@given(st.lists(score_row, min_size=1, max_size=12))
def test_forward_fill_property(seq):
    filled = forward_fill_scores(snapshots(seq))
    expected = fill_oracle(seq)
    for k, (got, exp, raw) in enumerate(zip(filled, expected, seq)):
        for name in FIELDS:
            assert getattr(got, name) == exp[name]
            assert got.filled[name] == (raw[name] is None and exp[name] is not None)
        # fill conditionality: nothing measured means nothing filled
        if all(raw[n] is None for n in FIELDS):
            assert all(getattr(got, n) is None for n in FIELDS)
        # non-chaining: a filled value never comes from a filled value
        if k and any(got.filled.values()):
            prev = filled[k - 1]
            for name in FIELDS:
                if got.filled[name]:
                    assert not prev.filled[name]


def test_fill_reference_examples():
    seq = [dict(rass=0, gcs=15, cam=False), dict(rass=0, gcs=15, cam=None), dict(rass=0, gcs=14, cam=None)]
    out = forward_fill_scores(snapshots(seq))
    assert out[1].cam is False and out[1].filled["cam"]
    assert out[2].cam is None
    empty = forward_fill_scores(snapshots([dict(rass=0, gcs=15, cam=True), dict(rass=None, gcs=None, cam=None)]))
    assert (empty[1].rass, empty[1].gcs, empty[1].cam) == (None, None, None)


def test_three_interval_gap_never_bridged():
    seq = [dict(rass=0, gcs=None, cam=True)] + [dict(rass=None, gcs=15, cam=None)] * 3
    out = forward_fill_scores(snapshots(seq))
    assert out[1].rass == 0 and out[1].cam is True
    assert out[2].rass is None and out[3].cam is None


# ----------------------------------------------------------------------------
# collection and trajectory assembly


def _stay(los, scores, death=None):
    return stay_from_dict({"stay_id": "s", "patient_id": "p", "los_hours": los, "death_hour": death,
                           "statics": {}, "events": [], "scores": scores})


def test_collect_last_value_and_boundary():
    stay = _stay(48, [[13, "RASS", -1], [19, "RASS", 2], [24, "GCS", 9], [30, "CAM", 1]])
    snaps = collect_interval_scores(stay, window_stay(stay))
    assert snaps[0].rass == 2 and snaps[0].gcs is None
    assert snaps[1].gcs == 9 and snaps[1].cam is True


def test_collect_empty_window():
    stay = _stay(48, [[30, "CAM", 0]])
    assert (lambda s: (s.rass, s.gcs, s.cam))(collect_interval_scores(stay, window_stay(stay))[0]) == (None,) * 3


def test_assemble_reference_and_identity():
    assert assemble_trajectory([N, D], 30.0) == [N, X]
    assert assemble_trajectory([N, D, C], None) == [N, D, C]


def test_death_in_partial_window_reinstated():
    stay = _stay(38, [[13, "CAM", 0], [14, "RASS", 0], [25, "RASS", 0], [26, "CAM", 0]], death=38)
    states = label_stay(window_stay(stay))
    assert states == [N, N, X]


def test_death_before_first_window_warns():
    with pytest.warns(UserWarning):
        assert assemble_trajectory([N], 6.0) == []


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([N, D, C, U]), min_size=1, max_size=10), st.floats(12, 200))
def test_deceased_terminal(states, death):
    k = int(death // 12)
    if k - 1 > len(states):
        return
    out = assemble_trajectory(states, death)
    assert out.count(X) == 1 and out[-1] == X
