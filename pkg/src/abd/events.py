"""Stay ingestion, inclusion criteria, feature vocabulary, cleaning and windowing.

Event streams are stored column-wise (``times``, ``codes``, ``values``) on each
:class:`StayRecord`; :class:`ClinicalEvent` is the row view.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ._io import dumps, read_jsonl

log = logging.getLogger(__name__)

COHORT_SCHEMA = "abd-cohort-v1"
INTERVAL_HOURS = 12.0
MAX_SEQ = 1200
KINDS = ("vital", "med", "lab", "score")
SCORE_KINDS = ("RASS", "GCS", "CAM")
SCORE_RANGES = {"RASS": (-5, 4), "GCS": (3, 15), "CAM": (0, 1)}


class CohortError(ValueError):
    """Fatal problem with a cohort file (e.g. duplicate stay ids)."""


class RecordError(ValueError):
    """A single stay record failed validation."""

    def __init__(self, message: str, line: int | None = None, stay_id: str | None = None):
        super().__init__(message)
        self.line = line
        self.stay_id = stay_id

    def __str__(self) -> str:
        where = f"line {self.line}" if self.line is not None else "record"
        sid = f" ({self.stay_id})" if self.stay_id else ""
        return f"{where}{sid}: {self.args[0]}"


@dataclass(frozen=True)
class ClinicalEvent:
    t: float
    code: str
    value: float


@dataclass
class StayRecord:
    stay_id: str
    patient_id: str
    los_hours: float
    death_hour: float | None
    times: np.ndarray
    codes: np.ndarray
    values: np.ndarray
    scores: list[tuple[float, str, int]]
    statics: dict[str, float | None]
    scaled: bool = False
    raw_values: np.ndarray | None = None
    static_vector: np.ndarray | None = None

    @property
    def events(self) -> list[ClinicalEvent]:
        return [ClinicalEvent(float(t), str(c), float(v))
                for t, c, v in zip(self.times, self.codes, self.values)]

    def __len__(self) -> int:
        return len(self.times)

    def validate(self) -> None:
        if not self.los_hours > 0:
            raise RecordError("los_hours must be positive", stay_id=self.stay_id)
        if self.death_hour is not None and not (0 <= self.death_hour <= self.los_hours):
            raise RecordError("death_hour must lie in [0, los_hours]", stay_id=self.stay_id)
        if len(self.times):
            if self.times.min() < 0:
                raise RecordError("event with negative time", stay_id=self.stay_id)
            if self.times.max() > self.los_hours:
                raise RecordError("event after end of stay", stay_id=self.stay_id)
            if np.any(np.diff(self.times) < 0):
                raise RecordError("events not sorted by time", stay_id=self.stay_id)
            if not np.all(np.isfinite(self.values)):
                raise RecordError("non-finite event value", stay_id=self.stay_id)
        for t, kind, v in self.scores:
            if kind not in SCORE_RANGES:
                raise RecordError(f"unknown score kind {kind!r}", stay_id=self.stay_id)
            lo, hi = SCORE_RANGES[kind]
            if not (0 <= t <= self.los_hours):
                raise RecordError(f"{kind} score outside the stay", stay_id=self.stay_id)
            if v != int(v) or not lo <= v <= hi:
                raise RecordError(f"{kind} value {v} outside [{lo}, {hi}]", stay_id=self.stay_id)


def code_kind(name: str) -> str:
    """Feature kind from the ``kind:name`` code convention; bare names count as labs."""
    prefix, sep, _ = name.partition(":")
    if sep and prefix in KINDS:
        return prefix
    return "lab"


def score_code(kind: str) -> str:
    return f"score:{kind}"


def stay_from_dict(obj: dict) -> StayRecord:
    try:
        events = sorted(((float(t), str(c), float(v)) for t, c, v in obj.get("events", [])),
                        key=lambda e: e[0])
        scores = sorted(((float(t), str(k), v) for t, k, v in obj.get("scores", [])),
                        key=lambda e: e[0])
        death = obj.get("death_hour")
        stay = StayRecord(
            stay_id=str(obj["stay_id"]),
            patient_id=str(obj["patient_id"]),
            los_hours=float(obj["los_hours"]),
            death_hour=None if death is None else float(death),
            times=np.array([e[0] for e in events], dtype=float),
            codes=np.array([e[1] for e in events], dtype=object),
            values=np.array([e[2] for e in events], dtype=float),
            scores=[(t, k, v) for t, k, v in scores],
            statics={str(k): (None if v is None else float(v))
                     for k, v in obj.get("statics", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"malformed record: {exc}", stay_id=obj.get("stay_id")) from exc
    stay.validate()
    stay.scores = [(t, k, int(v)) for t, k, v in stay.scores]
    return stay


def stay_to_dict(stay: StayRecord) -> dict:
    return {
        "stay_id": stay.stay_id,
        "patient_id": stay.patient_id,
        "los_hours": stay.los_hours,
        "death_hour": stay.death_hour,
        "statics": stay.statics,
        "events": [[float(t), str(c), float(v)]
                   for t, c, v in zip(stay.times, stay.codes, stay.values)],
        "scores": [[t, k, v] for t, k, v in stay.scores],
    }


def ingest_cohort(path: str | Path, schema: str = COHORT_SCHEMA,
                  errors: list[RecordError] | None = None) -> list[StayRecord]:
    """Read a cohort JSONL file.

    Records that fail validation are skipped, logged and appended to
    ``errors`` when a list is given. A repeated ``stay_id`` raises
    :class:`CohortError`.
    """
    if schema != COHORT_SCHEMA:
        raise CohortError(f"unsupported cohort schema {schema!r}")
    stays: list[StayRecord] = []
    seen: set[str] = set()
    for lineno, obj in read_jsonl(path):
        if isinstance(obj, Exception) or not isinstance(obj, dict):
            err = RecordError(f"unparsable line: {obj}", line=lineno)
        else:
            sid = obj.get("stay_id")
            if sid is not None and str(sid) in seen:
                raise CohortError(f"duplicate stay_id {sid!r} on line {lineno}")
            try:
                stay = stay_from_dict(obj)
            except RecordError as exc:
                exc.line = lineno
                err = exc
            else:
                seen.add(stay.stay_id)
                stays.append(stay)
                continue
            if sid is not None:
                seen.add(str(sid))
        log.warning("rejected %s", err)
        if errors is not None:
            errors.append(err)
    return stays


def filter_inclusion(cohort: Iterable[StayRecord], min_los: float = 24.0) -> list[StayRecord]:
    """Keep stays lasting at least ``min_los`` hours with at least one RASS/GCS/CAM score."""
    return [s for s in cohort if s.los_hours >= min_los and len(s.scores) > 0]


# ----------------------------------------------------------------------------
# vocabulary


@dataclass
class CodeEntry:
    name: str
    kind: str
    stay_fraction: float
    kept: bool
    p01: float
    p99: float
    mean: float
    std: float


@dataclass
class StaticEntry:
    name: str
    mean: float
    std: float


@dataclass
class FeatureVocabulary:
    entries: list[CodeEntry]
    statics: list[StaticEntry]
    prune_threshold: float = 0.01
    # patient ids the statistics were computed from; used for leakage checks
    provenance: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        self._by_name = {e.name: e for e in self.entries}
        kept = [e.name for e in self.entries if e.kept]
        self.index = {name: i for i, name in enumerate(kept)}

    @property
    def kept_codes(self) -> list[str]:
        return list(self.index)

    @property
    def size(self) -> int:
        return len(self.index)

    @property
    def static_names(self) -> list[str]:
        return [s.name for s in self.statics]

    def __getitem__(self, name: str) -> CodeEntry:
        return self._by_name[name]

    def __contains__(self, name: str) -> bool:
        return name in self._by_name

    def to_dict(self) -> dict:
        return {
            "prune_threshold": self.prune_threshold,
            "codes": [vars(e) for e in self.entries],
            "statics": [vars(s) for s in self.statics],
            "provenance": sorted(self.provenance),
        }

    def to_json(self) -> str:
        return dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureVocabulary":
        return cls(
            entries=[CodeEntry(**e) for e in obj["codes"]],
            statics=[StaticEntry(**s) for s in obj["statics"]],
            prune_threshold=obj.get("prune_threshold", 0.01),
            provenance=frozenset(obj.get("provenance", [])),
        )


def _stay_codes(stay: StayRecord) -> Iterable[tuple[str, np.ndarray]]:
    """Per-code raw values of a stay, in order of first appearance; scores included."""
    if stay.scaled:
        raise ValueError("vocabulary must be built from raw, uncleaned stays")
    order: dict[str, list[float]] = {}
    for c, v in zip(stay.codes, stay.values):
        order.setdefault(c, []).append(v)
    for _, kind, v in stay.scores:
        order.setdefault(score_code(kind), []).append(float(v))
    return [(c, np.asarray(v, dtype=float)) for c, v in order.items()]


def build_vocabulary(cohort: Sequence[StayRecord], prune_threshold: float = 0.01) -> FeatureVocabulary:
    """Feature vocabulary and scaling statistics from (training) stays.

    Codes are numbered in order of first appearance. Med and lab codes present
    in fewer than ``prune_threshold`` of stays are not kept. Percentile bounds
    use linear interpolation between order statistics; mean and population std
    are taken over the in-bounds values. Score codes use their valid range as
    bounds so no legitimate score is discarded as an outlier.
    """
    if len(cohort) == 0:
        raise ValueError("cannot build a vocabulary from an empty cohort")
    pooled: dict[str, list[np.ndarray]] = {}
    present: dict[str, int] = {}
    for stay in cohort:
        for code, vals in _stay_codes(stay):
            pooled.setdefault(code, []).append(vals)
            present[code] = present.get(code, 0) + 1

    n = len(cohort)
    entries = []
    for code, chunks in pooled.items():
        kind = code_kind(code)
        frac = present[code] / n
        kept = frac >= prune_threshold or kind in ("vital", "score")
        vals = np.concatenate(chunks)
        if kind == "score":
            lo, hi = (float(b) for b in SCORE_RANGES[code.split(":", 1)[1]])
        else:
            lo, hi = (float(b) for b in np.percentile(vals, [1.0, 99.0]))
        inb = vals[(vals >= lo) & (vals <= hi)]
        mean, std = (float(inb.mean()), float(inb.std())) if len(inb) else (0.0, 0.0)
        entries.append(CodeEntry(code, kind, frac, bool(kept), lo, hi, mean, std))

    static_vals: dict[str, list[float]] = {}
    for stay in cohort:
        for name, v in stay.statics.items():
            static_vals.setdefault(name, [])
            if v is not None and math.isfinite(v):
                static_vals[name].append(v)
    statics = []
    for name, vals in static_vals.items():
        arr = np.asarray(vals, dtype=float)
        statics.append(StaticEntry(name, float(arr.mean()) if len(arr) else 0.0,
                                   float(arr.std()) if len(arr) else 0.0))

    return FeatureVocabulary(entries, statics, prune_threshold,
                             provenance=frozenset(s.patient_id for s in cohort))


# ----------------------------------------------------------------------------
# cleaning


def _scale_statics(stay: StayRecord, vocab: FeatureVocabulary) -> np.ndarray:
    out = np.zeros(len(vocab.statics))
    for i, entry in enumerate(vocab.statics):
        v = stay.statics.get(entry.name)
        if v is None or not math.isfinite(v):
            v = entry.mean
        out[i] = (v - entry.mean) / entry.std if entry.std > 0 else v - entry.mean
    return out


def clean_stay(stay: StayRecord, vocab: FeatureVocabulary, _warned: set | None = None) -> StayRecord:
    if stay.scaled:
        return stay
    times = list(stay.times)
    codes = list(stay.codes)
    values = list(stay.values)
    for t, kind, v in stay.scores:
        times.append(t)
        codes.append(score_code(kind))
        values.append(float(v))
    times_a = np.asarray(times, dtype=float)
    order = np.argsort(times_a, kind="stable")
    times_a = times_a[order]
    codes_a = np.asarray(codes, dtype=object)[order]
    raw = np.asarray(values, dtype=float)[order]

    keep = np.zeros(len(raw), dtype=bool)
    scaled = raw.copy()
    for c in dict.fromkeys(codes_a):
        if c not in vocab.index:
            continue
        e = vocab[c]
        sel = codes_a == c
        sel &= (raw >= e.p01) & (raw <= e.p99)
        keep |= sel
        if e.std > 0:
            scaled[sel] = (raw[sel] - e.mean) / e.std
        elif _warned is None or c not in _warned:
            warnings.warn(f"code {c!r} has zero std; passing values through unscaled", stacklevel=3)
            if _warned is not None:
                _warned.add(c)

    return replace(stay, times=times_a[keep], codes=codes_a[keep], values=scaled[keep],
                   raw_values=raw[keep], scaled=True,
                   static_vector=_scale_statics(stay, vocab))


def clean_events(cohort: Iterable[StayRecord], vocab: FeatureVocabulary) -> list[StayRecord]:
    """Drop pruned codes and outliers, then z-score event values and statics.

    Score observations are merged into the event stream as ``score:<kind>``
    codes so the sequence models see them; the raw ``scores`` list is left
    untouched for phenotyping. Already-cleaned stays pass through unchanged.
    """
    warned: set[str] = set()
    return [clean_stay(s, vocab, warned) for s in cohort]


# ----------------------------------------------------------------------------
# windowing


@dataclass(frozen=True)
class Interval:
    k: int
    start: float
    end: float
    obs_start: int
    obs_end: int

    @property
    def n_obs(self) -> int:
        return self.obs_end - self.obs_start


@dataclass
class WindowedStay:
    stay: StayRecord
    intervals: list[Interval]
    interval_hours: float = INTERVAL_HOURS
    max_seq: int = MAX_SEQ

    @property
    def stay_id(self) -> str:
        return self.stay.stay_id

    @property
    def statics(self) -> np.ndarray | None:
        return self.stay.static_vector

    def observation(self, i: int) -> list[ClinicalEvent]:
        iv = self.intervals[i]
        s = self.stay
        return [ClinicalEvent(float(s.times[j]), str(s.codes[j]), float(s.values[j]))
                for j in range(iv.obs_start, iv.obs_end)]


def n_windows(los_hours: float, death_hour: float | None, interval_hours: float = INTERVAL_HOURS) -> int:
    """Index of the last prediction window (windows are numbered from 1)."""
    last = int(math.floor(los_hours / interval_hours)) - 1
    if death_hour is not None:
        death_k = int(math.floor(death_hour / interval_hours))
        last = death_k
    return last


def window_stay(stay: StayRecord, interval_hours: float = INTERVAL_HOURS,
                max_seq: int = MAX_SEQ, min_los: float = 24.0) -> WindowedStay:
    """Split a stay into prediction windows ``[12k, 12(k+1))`` for ``k >= 1``.

    The observation of window ``k`` is every event before ``12k``, truncated to
    the most recent ``max_seq`` events. The incomplete trailing window is kept
    only when the death falls inside it; no window after the death is produced.
    """
    if stay.los_hours < min_los:
        raise ValueError(f"stay {stay.stay_id} lasts {stay.los_hours}h < {min_los}h; filter it first")
    last = n_windows(stay.los_hours, stay.death_hour, interval_hours)
    intervals = []
    for k in range(1, last + 1):
        start = k * interval_hours
        end = start + interval_hours
        hi = int(np.searchsorted(stay.times, start, side="left"))
        lo = max(0, hi - max_seq)
        intervals.append(Interval(k, start, end, lo, hi))
    return WindowedStay(stay, intervals, interval_hours, max_seq)


# ----------------------------------------------------------------------------
# statistical features for the non-sequential baseline

STAT_NAMES = ("mean", "median", "min", "max", "std")


def statistic_feature_names(vocab: FeatureVocabulary) -> list[str]:
    names = []
    for code in vocab.kept_codes:
        if vocab[code].kind in ("vital", "score"):
            names.extend(f"{code}.{s}" for s in STAT_NAMES)
        else:
            names.append(f"{code}.present")
    names.extend(f"static.{n}" for n in vocab.static_names)
    names.append("window_start_hour")
    return names


def interval_statistics(windowed: WindowedStay, vocab: FeatureVocabulary,
                        causal_median: bool = True) -> np.ndarray:
    """One flat feature row per prediction window.

    For each kept vital/score code: mean, median, min, max and population std
    over the 12 hours preceding the window. A code missing from that slice
    takes its median over the stay (over events before the window start when
    ``causal_median`` is true), or 0 if never seen. Med/lab codes contribute a
    0/1 presence flag. Rows end with the scaled statics and the window start.
    """
    stay = windowed.stay
    codes = vocab.kept_codes
    numeric = [c for c in codes if vocab[c].kind in ("vital", "score")]
    col = {}
    width = 0
    for c in codes:
        col[c] = width
        width += 5 if c in numeric else 1
    statics = stay.static_vector if stay.static_vector is not None else np.zeros(len(vocab.statics))
    out = np.zeros((len(windowed.intervals), width + len(statics) + 1))

    by_code: dict[str, np.ndarray] = {}
    for c in set(stay.codes):
        by_code[c] = np.flatnonzero(stay.codes == c)

    for row, iv in enumerate(windowed.intervals):
        lo_t = iv.start - windowed.interval_hours
        for c in codes:
            idx = by_code.get(c)
            j = col[c]
            if idx is None:
                continue
            t = stay.times[idx]
            in_slice = idx[(t >= lo_t) & (t < iv.start)]
            if c not in numeric:
                out[row, j] = 1.0 if len(in_slice) else 0.0
                continue
            if len(in_slice):
                v = stay.values[in_slice]
                out[row, j:j + 5] = (v.mean(), np.median(v), v.min(), v.max(), v.std())
            else:
                hist = idx[t < iv.start] if causal_median else idx
                if len(hist):
                    out[row, j:j + 5] = np.median(stay.values[hist])
        out[row, width:width + len(statics)] = statics
        out[row, -1] = iv.start
    return out
