"""Per-fold preparation of stays into arrays, and batch assembly for the models.

A stay is run through the sequence model once. Because the model is causal,
the hidden state at position ``n_k - 1`` of the full stay sequence depends only
on the first ``n_k`` tokens, which is exactly the observation of window ``k``
as long as no truncation applies. Windows whose observation is longer than the
model's length cap get a separate sequence holding their last ``max_len``
tokens; windows with no events read a single null token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..events import (FeatureVocabulary, StayRecord, WindowedStay, build_vocabulary, clean_events,
                      interval_statistics, window_stay)
from ..model.layers import time_features
from ..phenotype import AbdState, label_stay, outcome_index
from ..transitions import interval_transition_labels, transition_index


@dataclass
class StayArrays:
    stay_id: str
    patient_id: str
    codes: np.ndarray        # vocabulary index per token
    values: np.ndarray
    phi: np.ndarray          # (T, 3) time features
    statics: np.ndarray
    obs_end: np.ndarray      # n_k per window
    outcome: np.ndarray      # outcome class index, -1 for Unknown
    transition: np.ndarray   # transition class index, -1 for Masked
    states: list[AbdState]
    features: np.ndarray | None = None   # interval statistics for the linear model

    @property
    def n_intervals(self) -> int:
        return len(self.obs_end)


@dataclass
class FoldData:
    vocab: FeatureVocabulary
    stays: dict[str, StayArrays]


def stay_labels(windowed: WindowedStay) -> tuple[list[AbdState], np.ndarray, np.ndarray]:
    states = label_stay(windowed)
    outcome = np.array([outcome_index(s) for s in states], dtype=int)
    transition = np.array([transition_index(t) for t in interval_transition_labels(states)], dtype=int)
    return states, outcome, transition


def stay_arrays(windowed: WindowedStay, vocab: FeatureVocabulary, time_scale: float,
                with_features: bool = False) -> StayArrays:
    stay = windowed.stay
    states, outcome, transition = stay_labels(windowed)
    n = len(states)
    obs_end = np.array([iv.obs_end for iv in windowed.intervals[:n]], dtype=int)
    need = int(obs_end.max()) if n else 0
    codes = np.array([vocab.index[c] for c in stay.codes[:need]], dtype=int)
    feats = interval_statistics(windowed, vocab)[:n] if with_features else None
    return StayArrays(
        stay_id=stay.stay_id,
        patient_id=stay.patient_id,
        codes=codes,
        values=np.asarray(stay.values[:need], dtype=float),
        phi=time_features(stay.times[:need], time_scale).reshape(-1, 3),
        statics=np.asarray(stay.static_vector, dtype=float),
        obs_end=obs_end,
        outcome=outcome,
        transition=transition,
        states=states,
        features=feats,
    )


def prepare_stays(stays: Sequence[StayRecord], vocab: FeatureVocabulary, time_scale: float = 168.0,
                  max_seq: int = 1200, with_features: bool = False) -> dict[str, StayArrays]:
    """Clean with ``vocab``, window and label ``stays``; stays without windows are dropped."""
    out = {}
    for stay in clean_events(stays, vocab):
        arrays = stay_arrays(window_stay(stay, max_seq=max_seq), vocab, time_scale, with_features)
        if arrays.n_intervals:
            out[stay.stay_id] = arrays
    return out


def prepare_fold(train: Sequence[StayRecord], others: Sequence[StayRecord], time_scale: float = 168.0,
                 max_seq: int = 1200, with_features: bool = False,
                 prune_threshold: float = 0.01) -> FoldData:
    """Vocabulary and scaling from ``train`` only, then arrays for every stay."""
    vocab = build_vocabulary(list(train), prune_threshold)
    stays = prepare_stays(list(train) + list(others), vocab, time_scale, max_seq, with_features)
    return FoldData(vocab, stays)


# ----------------------------------------------------------------------------
# batches


@dataclass
class SequenceBatch:
    """Right-padded token arrays plus the gather plan for every window.

    Row ``r`` of the model output reads sequence ``seq[r]`` at position
    ``pos[r]``. ``statics`` holds one row per window.
    """
    codes: np.ndarray       # (S, L)
    values: np.ndarray      # (S, L)
    phi: np.ndarray         # (S, L, 3)
    seq: np.ndarray
    pos: np.ndarray
    statics: np.ndarray
    outcome: np.ndarray
    transition: np.ndarray
    prev_row: np.ndarray    # row of the previous window of the same stay, -1 for the first
    stay_ids: list[str]

    @property
    def n_rows(self) -> int:
        return len(self.seq)

    @property
    def flat_index(self) -> np.ndarray:
        return self.seq * self.codes.shape[1] + self.pos


def build_sequence_batch(stays: Sequence[StayArrays], null_code: int, max_len: int) -> SequenceBatch:
    seqs: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    seq_idx, pos, statics, out_l, tr_l, prev = [], [], [], [], [], []
    null_seq = -1
    for s in stays:
        main = -1
        base = len(seq_idx)
        for i, n in enumerate(s.obs_end):
            prev.append(base + i - 1 if i else -1)
            if n == 0:
                if null_seq < 0:
                    null_seq = len(seqs)
                    seqs.append((np.array([null_code]), np.zeros(1), np.zeros((1, 3))))
                seq_idx.append(null_seq)
                pos.append(0)
            elif n <= max_len:
                if main < 0:
                    main = len(seqs)
                    m = min(len(s.codes), max_len)
                    seqs.append((s.codes[:m], s.values[:m], s.phi[:m]))
                seq_idx.append(main)
                pos.append(n - 1)
            else:
                seq_idx.append(len(seqs))
                seqs.append((s.codes[n - max_len:n], s.values[n - max_len:n], s.phi[n - max_len:n]))
                pos.append(max_len - 1)
            statics.append(s.statics)
        out_l.append(s.outcome)
        tr_l.append(s.transition)
    L = max(len(c) for c, _, _ in seqs)
    S = len(seqs)
    codes = np.full((S, L), null_code, dtype=int)
    values = np.zeros((S, L))
    phi = np.zeros((S, L, 3))
    for j, (c, v, p) in enumerate(seqs):
        codes[j, :len(c)] = c
        values[j, :len(c)] = v
        phi[j, :len(c)] = p
    return SequenceBatch(codes, values, phi, np.array(seq_idx), np.array(pos), np.array(statics),
                         np.concatenate(out_l), np.concatenate(tr_l), np.array(prev),
                         [s.stay_id for s in stays])


@dataclass
class FeatureBatch:
    features: np.ndarray
    outcome: np.ndarray
    transition: np.ndarray
    prev_row: np.ndarray
    stay_ids: list[str]

    @property
    def n_rows(self) -> int:
        return len(self.features)


def build_feature_batch(stays: Sequence[StayArrays], mean: np.ndarray, std: np.ndarray) -> FeatureBatch:
    feats = np.concatenate([s.features for s in stays])
    prev, base = [], 0
    for s in stays:
        prev.extend([-1] + list(range(base, base + s.n_intervals - 1)))
        base += s.n_intervals
    return FeatureBatch((feats - mean) / std,
                        np.concatenate([s.outcome for s in stays]),
                        np.concatenate([s.transition for s in stays]),
                        np.array(prev), [s.stay_id for s in stays])


def pack_stays(stays: Sequence[StayArrays], batch_size: int) -> list[list[StayArrays]]:
    """Group whole stays, in the given order, until each group holds ``batch_size`` windows."""
    groups, cur, n = [], [], 0
    for s in stays:
        cur.append(s)
        n += s.n_intervals
        if n >= batch_size:
            groups.append(cur)
            cur, n = [], 0
    if cur:
        groups.append(cur)
    return groups


def bucketed_groups(stays: Sequence[StayArrays], batch_size: int, rng: np.random.Generator,
                    pool: int = 64) -> list[list[StayArrays]]:
    """Shuffle, sort by token count within pools of ``pool`` stays, pack, shuffle the batches.

    Sorting inside a pool keeps stays of similar length together, which cuts
    right-padding; the pools and final batch order stay random.
    """
    order = [stays[i] for i in rng.permutation(len(stays))]
    if pool <= 1:
        return pack_stays(order, batch_size)
    groups = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool], key=lambda s: len(s.codes))
        groups.extend(pack_stays(chunk, batch_size))
    return [groups[i] for i in rng.permutation(len(groups))]
