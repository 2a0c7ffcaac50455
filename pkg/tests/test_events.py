import json
import math

import numpy as np
import pytest

from abd.events import (CohortError, RecordError, build_vocabulary, clean_events, filter_inclusion, ingest_cohort,
                        interval_statistics, statistic_feature_names, stay_from_dict, window_stay)
from abd._io import dumps


def row(sid="s0", pid="p0", los=48.0, death=None, events=(), scores=((13.0, "CAM", 0),), statics=None):
    return {"stay_id": sid, "patient_id": pid, "los_hours": los, "death_hour": death,
            "statics": statics or {"age": 60.0}, "events": [list(e) for e in events],
            "scores": [list(s) for s in scores]}


def write(tmp_path, rows, name="c.jsonl"):
    p = tmp_path / name
    p.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return p


def test_ingest_sorts_events(tmp_path):
    rows = [row(f"s{i}", events=[(5.0, "vital:hr", 80), (1.0, "vital:hr", 70)]) for i in range(3)]
    stays = ingest_cohort(write(tmp_path, rows))
    assert len(stays) == 3
    assert list(stays[0].times) == [1.0, 5.0]


def test_ingest_rejects_bad_record_keeps_others(tmp_path):
    rows = [row("a"), row("b", events=[(-2.0, "vital:hr", 80)]), row("c")]
    errors = []
    stays = ingest_cohort(write(tmp_path, rows), errors=errors)
    assert [s.stay_id for s in stays] == ["a", "c"]
    assert len(errors) == 1 and errors[0].line == 2


def test_ingest_malformed_line(tmp_path):
    p = tmp_path / "c.jsonl"
    p.write_text(json.dumps(row("a")) + "\n{not json\n")
    errors = []
    assert len(ingest_cohort(p, errors=errors)) == 1
    assert errors[0].line == 2


def test_ingest_duplicate_is_fatal(tmp_path):
    with pytest.raises(CohortError):
        ingest_cohort(write(tmp_path, [row("a"), row("a")]))


def test_ingest_empty(tmp_path):
    assert ingest_cohort(write(tmp_path, [])) == []


@pytest.mark.parametrize("bad", [
    dict(scores=[(13.0, "RASS", 5)]), dict(scores=[(13.0, "GCS", 2)]), dict(scores=[(13.0, "CAM", 2)]),
    dict(death=60.0), dict(events=[(50.0, "vital:hr", 1)]),
])
def test_record_invariants(bad):
    with pytest.raises(RecordError):
        stay_from_dict(row(**bad))


def test_inclusion():
    stays = [stay_from_dict(r) for r in (row("short", los=20.0), row("noscore", los=30.0, scores=()),
                                         row("ok", los=36.0, scores=[(14.0, "GCS", 12)]))]
    assert [s.stay_id for s in filter_inclusion(stays)] == ["ok"]


def _cohort(n, extra=lambda i: []):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        ev = [(float(t), "vital:hr", float(rng.normal(80, 10))) for t in np.sort(rng.uniform(0, 47, 20))]
        ev += extra(i)
        ev.sort(key=lambda e: e[0])
        out.append(stay_from_dict(row(f"s{i}", f"p{i}", events=ev, statics={"age": float(50 + i)})))
    return out


def test_vocabulary_pruning_by_stay_fraction():
    stays = _cohort(200, lambda i: [(3.0, "lab:rare", 1.0)] if i == 0 else [])
    stays[1] = stay_from_dict(row("v", "pv", events=[(2.0, "vital:odd", 1.0)]))
    vocab = build_vocabulary(stays, 0.01)
    assert vocab["lab:rare"].stay_fraction == 0.005 and not vocab["lab:rare"].kept
    assert vocab["vital:odd"].kept


def test_vocabulary_percentiles_match_sort_and_index():
    vals = list(range(1, 101))
    stays = [stay_from_dict(row(f"s{v}", f"p{v}", events=[(1.0, "lab:x", float(v))])) for v in vals]
    e = build_vocabulary(stays)["lab:x"]
    srt = np.sort(vals)
    for q, got in ((0.01, e.p01), (0.99, e.p99)):
        pos = q * (len(srt) - 1)
        lo, frac = int(math.floor(pos)), pos - math.floor(pos)
        assert got == pytest.approx(srt[lo] + frac * (srt[lo + 1] - srt[lo]), abs=1e-12)
    assert e.p01 == pytest.approx(1.99) and e.p99 == pytest.approx(99.01)


def test_vocabulary_requires_stays():
    with pytest.raises(ValueError):
        build_vocabulary([])


def test_vocabulary_serialization_deterministic():
    a = dumps(build_vocabulary(_cohort(30)).to_dict())
    b = dumps(build_vocabulary(_cohort(30)).to_dict())
    assert a == b


def test_clean_outliers_scaling_and_idempotence():
    stays = _cohort(50)
    vocab = build_vocabulary(stays)
    e = vocab["vital:hr"]
    cleaned = clean_events(stays, vocab)
    for s in cleaned:
        hr = s.codes == "vital:hr"
        assert np.all((s.raw_values[hr] >= e.p01) & (s.raw_values[hr] <= e.p99))
        np.testing.assert_allclose(s.values[hr], (s.raw_values[hr] - e.mean) / e.std)
    again = clean_events(cleaned, vocab)
    assert all(a is b for a, b in zip(again, cleaned))
    # a value equal to the mean scales to zero
    probe = stay_from_dict(row("m", events=[(1.0, "vital:hr", e.mean)]))
    assert clean_events([probe], vocab)[0].values[0] == 0.0


def test_clean_static_imputation():
    stays = _cohort(10)
    vocab = build_vocabulary(stays)
    missing = stay_from_dict(row("m", statics={"age": None}))
    assert clean_events([missing], vocab)[0].static_vector[0] == 0.0


def test_clean_zero_std_warns():
    stays = [stay_from_dict(row(f"s{i}", f"p{i}", events=[(1.0, "lab:k", 4.0)])) for i in range(5)]
    vocab = build_vocabulary(stays)
    with pytest.warns(UserWarning, match="zero std"):
        out = clean_events(stays, vocab)
    assert out[0].values[0] == 4.0


def test_windowing():
    s = stay_from_dict(row(los=40.0))
    assert [(iv.start, iv.end) for iv in window_stay(s).intervals] == [(12, 24), (24, 36)]
    s = stay_from_dict(row(los=40.0, death=38.0))
    assert [(iv.start, iv.end) for iv in window_stay(s).intervals] == [(12, 24), (24, 36), (36, 48)]
    with pytest.raises(ValueError):
        window_stay(stay_from_dict(row(los=20.0)))


def test_windowing_truncation_and_causality():
    ev = [(i * 0.01, "vital:hr", 80.0) for i in range(1500)]
    s = stay_from_dict(row(los=48.0, events=ev))
    w = window_stay(s)
    iv = w.intervals[0]
    assert iv.n_obs == 1200 and iv.obs_end == 1200
    for iv in w.intervals:
        assert np.all(s.times[iv.obs_start:iv.obs_end] < iv.start)


def test_windows_tile():
    s = stay_from_dict(row(los=100.0))
    ivs = window_stay(s).intervals
    assert ivs[0].start == 12 and all(a.end == b.start for a, b in zip(ivs, ivs[1:]))


def test_interval_statistics():
    ev = [(1.0, "vital:hr", 60.0), (2.0, "vital:hr", 70.0), (3.0, "vital:hr", 80.0), (14.0, "med:x", 1.0),
          (30.0, "vital:sbp", 120.0)]
    stays = [stay_from_dict(row("a", events=ev))]
    vocab = build_vocabulary(stays, prune_threshold=0.0)
    s = stays[0]
    feats = interval_statistics(window_stay(s), vocab)
    names = statistic_feature_names(vocab)
    col = {n: i for i, n in enumerate(names)}
    r0 = feats[0]
    assert [r0[col[f"vital:hr.{k}"]] for k in ("mean", "median", "min", "max")] == [70, 70, 60, 80]
    assert r0[col["vital:hr.std"]] == pytest.approx(np.std([60, 70, 80]))
    r1 = feats[1]
    assert r1[col["med:x.present"]] == 1.0 and r0[col["med:x.present"]] == 0.0
    # absent in slice -> stay median of the code so far
    assert [r1[col[f"vital:hr.{k}"]] for k in ("mean", "median", "min", "max", "std")] == [70] * 5
    assert r1[col["vital:sbp.mean"]] == 0.0 and feats[2][col["vital:sbp.mean"]] == 120.0
    assert r1[col["window_start_hour"]] == 24.0
