"""Rule-based acute brain dysfunction phenotyping of 12-hour intervals."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .events import SCORE_RANGES, INTERVAL_HOURS, StayRecord, WindowedStay


class AbdState(str, enum.Enum):
    NORMAL = "Normal"
    DELIRIUM = "Delirium"
    COMA = "Coma"
    DECEASED = "Deceased"
    UNKNOWN = "Unknown"

    def __str__(self) -> str:
        return self.value


# class index used by the outcome head; Unknown is loss-masked
OUTCOME_CLASSES = (AbdState.NORMAL, AbdState.DELIRIUM, AbdState.COMA, AbdState.DECEASED)
OUTCOME_INDEX = {s: i for i, s in enumerate(OUTCOME_CLASSES)}


def outcome_index(state: AbdState) -> int:
    return OUTCOME_INDEX.get(state, -1)


@dataclass
class ScoreSnapshot:
    k: int
    rass: int | None = None
    gcs: int | None = None
    cam: bool | None = None
    filled: dict[str, bool] = field(default_factory=lambda: {"rass": False, "gcs": False, "cam": False})

    def measured(self, name: str) -> bool:
        return getattr(self, name) is not None and not self.filled[name]


_FIELDS = {"RASS": "rass", "GCS": "gcs", "CAM": "cam"}


def collect_interval_scores(stay: StayRecord, windows: WindowedStay) -> list[ScoreSnapshot]:
    """Last recorded value of each score kind inside each prediction window.

    Windows are half-open, so a score at exactly the window start belongs to
    it. Equal timestamps resolve to the later entry in input order.
    """
    snaps = []
    for iv in windows.intervals:
        snap = ScoreSnapshot(iv.k)
        for t, kind, v in stay.scores:
            if iv.start <= t < iv.end:
                name = _FIELDS[kind]
                setattr(snap, name, bool(v) if kind == "CAM" else int(v))
        snaps.append(snap)
    return snaps


def forward_fill_scores(snapshots: Sequence[ScoreSnapshot]) -> list[ScoreSnapshot]:
    """Copy a missing score from the previous interval, at most one interval forward.

    A score is filled at ``k`` only if it was directly measured at ``k - 1``
    and at least one other score kind was directly measured at ``k``.
    Fills never chain. Snapshots are assumed consecutive in ``k``.
    """
    out = [replace(s, filled=dict(s.filled)) for s in snapshots]
    for prev, cur, src in zip(out, out[1:], snapshots[1:]):
        if cur.k != prev.k + 1:
            continue
        measured_now = [n for n in _FIELDS.values() if src.measured(n)]
        for name in _FIELDS.values():
            if getattr(src, name) is not None:
                continue
            if not prev.measured(name):
                continue
            if not any(n != name for n in measured_now):
                continue
            setattr(cur, name, getattr(prev, name))
            cur.filled[name] = True
    return out


def _check_range(name: str, value: int | None) -> None:
    if value is None:
        return
    lo, hi = SCORE_RANGES[name]
    if not lo <= value <= hi:
        raise ValueError(f"{name} value {value} outside [{lo}, {hi}]")


def phenotype_interval(snapshot: ScoreSnapshot) -> AbdState:
    """Label one interval from its (possibly filled) RASS/GCS/CAM values.

    RASS below -3 is coma. RASS of exactly -3 defers to GCS (<= 8 coma,
    otherwise delirium). With RASS missing, GCS <= 8 is coma. Every other case
    is decided by CAM-ICU: positive is delirium, negative is normal, and no
    CAM means no label (Unknown).
    """
    rass, gcs, cam = snapshot.rass, snapshot.gcs, snapshot.cam
    _check_range("RASS", rass)
    _check_range("GCS", gcs)
    if rass is not None and rass < -3:
        return AbdState.COMA
    if rass == -3:
        if gcs is None:
            return AbdState.UNKNOWN
        return AbdState.COMA if gcs <= 8 else AbdState.DELIRIUM
    if rass is None and gcs is not None and gcs <= 8:
        return AbdState.COMA
    if cam is None:
        return AbdState.UNKNOWN
    return AbdState.DELIRIUM if cam else AbdState.NORMAL


def assemble_trajectory(states: Sequence[AbdState], death_hour: float | None,
                        interval_hours: float = INTERVAL_HOURS) -> list[AbdState]:
    """Merge mortality into the per-window labels (window ``i`` is ``k = i + 1``).

    The window containing the death becomes Deceased and later windows are
    removed. If the death falls in the dropped trailing partial window, that
    window is appended as Deceased.
    """
    states = list(states)
    if death_hour is None:
        return states
    death_k = int(np.floor(death_hour / interval_hours))
    if death_k < 1:
        warnings.warn("death before the first prediction window; no labeled intervals", stacklevel=2)
        return []
    i = death_k - 1
    if i < len(states):
        return states[:i] + [AbdState.DECEASED]
    if i == len(states):
        return states + [AbdState.DECEASED]
    raise ValueError(f"death at hour {death_hour} is beyond the labeled windows")


def label_stay(windows: WindowedStay, fill: bool = True) -> list[AbdState]:
    """Phenotype every prediction window of a stay and merge the death."""
    snaps = collect_interval_scores(windows.stay, windows)
    if fill:
        snaps = forward_fill_scores(snaps)
    states = [phenotype_interval(s) for s in snaps]
    if windows.stay.death_hour is not None:
        # window_stay already stops at the death window; replace its label
        death_k = int(np.floor(windows.stay.death_hour / windows.interval_hours))
        if death_k < 1:
            return []
        states = assemble_trajectory(states[:death_k - 1], windows.stay.death_hour,
                                     windows.interval_hours)
    return states


def labels_to_json(stay_id: str, states: Sequence[AbdState], transitions=None) -> dict:
    row = {"stay_id": stay_id, "labels": [str(s) for s in states]}
    if transitions is not None:
        row["transitions"] = [str(t) for t in transitions]
    return row
