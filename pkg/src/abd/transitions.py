"""Transition classes between consecutive intervals, episodes, and Markov statistics."""

from __future__ import annotations

import enum
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .phenotype import AbdState


class TransitionClass(str, enum.Enum):
    NO_CHANGE = "NoChange"
    ABD_TO_NORMAL = "AbdToNormal"
    NORMAL_TO_DELIRIUM = "NormalToDelirium"
    NORMAL_TO_COMA = "NormalToComa"
    DELIRIUM_TO_COMA = "DeliriumToComa"
    ANY_TO_DEATH = "AnyToDeath"
    MASKED = "Masked"

    def __str__(self) -> str:
        return self.value


# class index used by the transition head; Masked maps to -1
TRANSITION_CLASSES = (
    TransitionClass.NO_CHANGE,
    TransitionClass.ABD_TO_NORMAL,
    TransitionClass.NORMAL_TO_DELIRIUM,
    TransitionClass.NORMAL_TO_COMA,
    TransitionClass.DELIRIUM_TO_COMA,
    TransitionClass.ANY_TO_DEATH,
)
TRANSITION_INDEX = {c: i for i, c in enumerate(TRANSITION_CLASSES)}
CHANGE_CLASSES = TRANSITION_CLASSES[1:]

N, D, C, X, U = (AbdState.NORMAL, AbdState.DELIRIUM, AbdState.COMA,
                 AbdState.DECEASED, AbdState.UNKNOWN)

_PAIRS = {
    (N, D): TransitionClass.NORMAL_TO_DELIRIUM,
    (N, C): TransitionClass.NORMAL_TO_COMA,
    (D, C): TransitionClass.DELIRIUM_TO_COMA,
    (D, N): TransitionClass.ABD_TO_NORMAL,
    (C, N): TransitionClass.ABD_TO_NORMAL,
}


def transition_index(cls: TransitionClass) -> int:
    return TRANSITION_INDEX.get(cls, -1)


def classify_pair(a: AbdState, b: AbdState) -> TransitionClass:
    if a == X:
        # nothing follows a death
        return TransitionClass.MASKED
    if b == X:
        return TransitionClass.ANY_TO_DEATH
    if a == U or b == U:
        return TransitionClass.MASKED
    if a == b:
        return TransitionClass.NO_CHANGE
    return _PAIRS.get((a, b), TransitionClass.MASKED)


def label_transitions(states: Sequence[AbdState]) -> list[TransitionClass]:
    """One class per consecutive pair; coma to delirium and Unknown pairs are Masked."""
    return [classify_pair(a, b) for a, b in zip(states, states[1:])]


def interval_transition_labels(states: Sequence[AbdState]) -> list[TransitionClass]:
    """Transition label aligned to each prediction window.

    Window ``i`` carries the change from window ``i - 1`` into it; the first
    window has no labeled predecessor and is Masked.
    """
    if not states:
        return []
    return [TransitionClass.MASKED] + label_transitions(states)


@dataclass(frozen=True)
class Episode:
    state: AbdState
    start: int
    end: int

    @property
    def length(self) -> int:
        return self.end - self.start + 1


def segment_episodes(states: Sequence[AbdState]) -> list[Episode]:
    episodes = []
    start = 0
    for i in range(1, len(states) + 1):
        if i == len(states) or states[i] != states[start]:
            episodes.append(Episode(states[start], start, i - 1))
            start = i
    return episodes


MARKOV_STATES = ("Normal", "Delirium", "Coma", "Deceased", "Exit")
_MARKOV_INDEX = {AbdState.NORMAL: 0, AbdState.DELIRIUM: 1, AbdState.COMA: 2, AbdState.DECEASED: 3}


@dataclass
class MarkovMatrix:
    probs: np.ndarray
    counts: np.ndarray
    flagged: tuple[int, ...]
    states: tuple[str, ...] = MARKOV_STATES

    def row(self, state: str) -> dict[str, float]:
        i = self.states.index(state)
        return {s: float(p) for s, p in zip(self.states, self.probs[i]) if p > 0}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("from," + ",".join(self.states) + "\n")
        for name, row in zip(self.states, self.probs):
            buf.write(name + "," + ",".join(f"{p:.17g}" for p in row) + "\n")
        return buf.getvalue()


def estimate_markov(trajectories: Iterable[Sequence[AbdState]], include_exit: bool = False) -> MarkovMatrix:
    """Row-normalized counts of consecutive labeled pairs.

    Pairs touching an Unknown interval are skipped. With ``include_exit`` the
    last interval of a trajectory that does not end in death also counts a
    move to Exit. Deceased and Exit rows are absorbing; any other row with no
    counts is left at zero and listed in ``flagged``.
    """
    counts = np.zeros((5, 5))
    n_pairs = 0
    for traj in trajectories:
        traj = list(traj)
        for a, b in zip(traj, traj[1:]):
            if a in _MARKOV_INDEX and b in _MARKOV_INDEX:
                counts[_MARKOV_INDEX[a], _MARKOV_INDEX[b]] += 1
                n_pairs += 1
        if include_exit and traj and traj[-1] in _MARKOV_INDEX and traj[-1] != AbdState.DECEASED:
            counts[_MARKOV_INDEX[traj[-1]], 4] += 1
            n_pairs += 1
    if n_pairs == 0:
        raise ValueError("no labeled transitions to estimate from")
    probs = np.zeros_like(counts)
    flagged = []
    for i in range(3):
        total = counts[i].sum()
        if total > 0:
            probs[i] = counts[i] / total
        else:
            flagged.append(i)
    probs[3, 3] = 1.0
    probs[4, 4] = 1.0
    return MarkovMatrix(probs, counts, tuple(flagged))
