"""Batched forward passes for the three architectures and derived transitions."""

from __future__ import annotations

import numpy as np

from ..model import autodiff as ad
from ..model.autodiff import Tensor
from ..model.layers import (ModelConfig, cumulative_mean, embed_statics, embed_tokens, gru_sequence,
                            init_gru_params, init_linear_params, init_mamba_params, linear_baseline,
                            mamba_sequence, predict_heads)
from ..phenotype import OUTCOME_CLASSES
from ..transitions import TRANSITION_INDEX, classify_pair
from .data import FeatureBatch, SequenceBatch

ARCHS = ("mamba", "gru", "linear")


def init_params(arch: str, cfg: ModelConfig | None, n_features: int = 0, seed: int = 0) -> dict[str, Tensor]:
    if arch == "mamba":
        return init_mamba_params(cfg)
    if arch == "gru":
        return init_gru_params(cfg)
    if arch == "linear":
        return init_linear_params(n_features, seed)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")


def max_len(arch: str, cfg: ModelConfig) -> int:
    return cfg.gru_max_len if arch == "gru" else cfg.max_seq


def forward_batch(arch: str, params: dict[str, Tensor], cfg: ModelConfig | None, batch,
                  train: bool = False, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Outcome and transition probabilities, one row per window in the batch."""
    if arch == "linear":
        assert isinstance(batch, FeatureBatch)
        return linear_baseline(batch.features, params)
    assert isinstance(batch, SequenceBatch)
    x = embed_tokens(batch.codes, batch.values, batch.phi, params)
    if arch == "mamba":
        seq = mamba_sequence(x, params, cfg, train, rng)
        if cfg.pooling == "mean":
            seq = cumulative_mean(seq)
    else:
        seq = gru_sequence(x, params, cfg, train, rng)
    S, L, d = seq.shape
    hidden = ad.take_rows(ad.reshape(seq, (S * L, d)), batch.flat_index)
    return predict_heads(hidden, embed_statics(batch.statics, params), params)


def _pair_map() -> np.ndarray:
    """(4, 4, 6) indicator: outcome pair (a, b) -> transition class."""
    m = np.zeros((len(OUTCOME_CLASSES), len(OUTCOME_CLASSES), len(TRANSITION_INDEX)))
    for i, a in enumerate(OUTCOME_CLASSES):
        for j, b in enumerate(OUTCOME_CLASSES):
            c = TRANSITION_INDEX.get(classify_pair(a, b))
            if c is not None:
                m[i, j, c] = 1.0
    return m


PAIR_MAP = _pair_map()


def derive_transitions(outcome: np.ndarray, prev_row: np.ndarray) -> np.ndarray:
    """Transition probabilities inferred from consecutive outcome predictions.

    For window ``i`` with predecessor ``p``: ``P(c) ~ sum over (a, b) mapping to
    c of outcome[p, a] * outcome[i, b]``, renormalized over the six classes
    (pairs that map to Masked are dropped). The first window of a stay, whose
    label is always Masked, pairs its prediction with itself.
    """
    prev = np.where(prev_row >= 0, prev_row, np.arange(len(prev_row)))
    joint = outcome[prev][:, :, None] * outcome[:, None, :]
    p = np.einsum("nab,abc->nc", joint, PAIR_MAP)
    return p / p.sum(axis=1, keepdims=True)
