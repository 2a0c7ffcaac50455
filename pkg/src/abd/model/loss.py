"""Dual-head cross entropy with extra weight on the no-change transition class."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NO_CHANGE = 0


def transition_weights(alpha_fp: float = 2.0, base: np.ndarray | None = None, n: int = 6) -> np.ndarray:
    w = np.ones(n) if base is None else np.asarray(base, dtype=float).copy()
    w[NO_CHANGE] *= alpha_fp
    return w


def _head_ce(probs: Tensor, labels: np.ndarray, weights: np.ndarray | None) -> Tensor | None:
    labels = np.asarray(labels, dtype=int)
    valid = np.flatnonzero(labels >= 0)
    if len(valid) == 0:
        return None
    p = ad.pick(ad.take_rows(probs, valid), labels[valid])
    w = np.ones(len(valid)) if weights is None else weights[labels[valid]]
    return ad.mul(ad.sum_all(ad.mul(ad.log(p), Tensor(-w))), 1.0 / len(valid))


def dual_loss(outcome_probs, transition_probs, outcome_labels, transition_labels,
              weights: np.ndarray | None = None, alpha_fp: float = 2.0, lam: float = 1.0,
              tol: float = 1e-9) -> Tensor:
    """``CE(outcome) + lam * weighted CE(transition)``, each averaged over its valid rows.

    Labels of -1 (Unknown outcome, Masked transition) drop that head's term for
    the row. The transition weight of the no-change class is multiplied by
    ``alpha_fp`` so probability put on a change when nothing changes costs
    more. Accepts single rows or batches; raises if probabilities do not sum
    to one.
    """
    op = ad.as_tensor(outcome_probs)
    tp = ad.as_tensor(transition_probs)
    if op.ndim == 1:
        op = ad.reshape(op, (1, -1))
        tp = ad.reshape(tp, (1, -1))
    ol = np.atleast_1d(np.asarray(outcome_labels, dtype=int))
    tl = np.atleast_1d(np.asarray(transition_labels, dtype=int))
    for name, t in (("outcome", op), ("transition", tp)):
        if np.any(np.abs(t.data.sum(axis=-1) - 1.0) > tol) or np.any(t.data < 0):
            raise ValueError(f"{name} probabilities are not normalized")
    w = transition_weights(alpha_fp, weights, tp.shape[-1])
    total = Tensor(0.0)
    o = _head_ce(op, ol, None)
    if o is not None:
        total = ad.add(total, o)
    if lam:
        t = _head_ce(tp, tl, w)
        if t is not None:
            total = ad.add(total, ad.mul(t, lam))
    return total
