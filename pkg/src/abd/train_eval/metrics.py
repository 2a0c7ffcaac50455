"""AUROC with fold confidence intervals, confusion matrices, lead credit and FP offsets."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .._io import dumps
from ..phenotype import OUTCOME_CLASSES
from ..transitions import TRANSITION_CLASSES, TransitionClass

OUTCOME_NAMES = [str(s) for s in OUTCOME_CLASSES]
TRANSITION_NAMES = [str(c) for c in TRANSITION_CLASSES]
FP_CLASSES = (TransitionClass.ABD_TO_NORMAL, TransitionClass.NORMAL_TO_DELIRIUM,
              TransitionClass.NORMAL_TO_COMA)
NO_EVENT = "no-event"


def auroc(scores, labels) -> float | None:
    """Area under the ROC curve via the rank statistic; tied scores count one half.

    Returns None when ``labels`` lacks positives or negatives.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks resolve ties as one half
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class Interval95:
    mean: float | None
    low: float | None
    high: float | None
    folds: list[float | None] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "ci_low": self.low, "ci_high": self.high, "folds": self.folds}

    def cell(self, digits: int = 3) -> str:
        if self.mean is None:
            return "undefined"
        return f"{self.mean:.{digits}f} ({self.low:.{digits}f}-{self.high:.{digits}f})"


def fold_interval(values: Sequence[float | None]) -> Interval95:
    """Mean and normal-approximation 95% interval across folds.

    Uses the sample standard deviation; undefined fold values are skipped and a
    single defined value yields a point interval.
    """
    vals = np.array([v for v in values if v is not None], dtype=float)
    if len(vals) == 0:
        return Interval95(None, None, None, list(values))
    mean = float(vals.mean())
    if len(vals) == 1:
        return Interval95(mean, mean, mean, list(values))
    half = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals))
    return Interval95(mean, mean - half, mean + half, list(values))


def confusion_matrix(true: np.ndarray, pred: np.ndarray, n: int) -> np.ndarray:
    """Rows are true classes, columns predicted; rows with label < 0 are skipped."""
    true = np.asarray(true, dtype=int)
    pred = np.asarray(pred, dtype=int)
    keep = true >= 0
    m = np.zeros((n, n), dtype=int)
    np.add.at(m, (true[keep], pred[keep]), 1)
    return m


# ----------------------------------------------------------------------------
# lead credit


def lead_credit_relabel(labels: Sequence[int], horizon: int = 4, n_classes: int = 6,
                        credited: Iterable[int] | None = None) -> np.ndarray:
    """Per-class indicators with window-expanded positives.

    ``labels`` are class indices for one stay (-1 for Masked). For each
    credited class ``c`` (all but index 0, NoChange, by default) row ``i`` is
    positive iff ``labels[j] == c`` for some ``j`` in ``[i, i + horizon]``.
    Other classes keep their raw one-hot indicator. Masked rows stay -1.
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    labels = np.asarray(labels, dtype=int)
    K = len(labels)
    out = np.zeros((K, n_classes), dtype=int)
    valid = labels >= 0
    out[valid, labels[valid]] = 1
    cls = range(1, n_classes) if credited is None else credited
    for c in cls:
        hits = (labels == c).astype(int)
        # positive at i if any hit in [i, i + horizon]
        csum = np.concatenate([[0], np.cumsum(hits)])
        hi = np.minimum(np.arange(K) + horizon + 1, K)
        out[:, c] = (csum[hi] - csum[np.arange(K)] > 0).astype(int)
    out[~valid] = -1
    return out


def indicators(labels: Sequence[int], n_classes: int) -> np.ndarray:
    return lead_credit_relabel(labels, 0, n_classes, credited=())


# ----------------------------------------------------------------------------
# false-positive offsets


def fp_offset_histogram(pred: Sequence[np.ndarray], true: Sequence[np.ndarray],
                        classes: Sequence[int] | None = None) -> dict[int, Counter]:
    """Signed distance from each false positive to the nearest true event of its class.

    ``pred`` and ``true`` hold one array of class indices per stay (argmax
    predictions and true labels, -1 for Masked). A false positive of class
    ``c`` at window ``i`` is ``pred[i] == c`` while ``true[i] != c`` (Masked
    windows skipped). Its offset is ``i - j`` for the nearest ``j`` with
    ``true[j] == c`` (ties go to the later event, i.e. the negative offset).
    Stays without any true ``c`` count in the ``"no-event"`` bucket.
    """
    if classes is None:
        classes = [TRANSITION_CLASSES.index(c) for c in FP_CLASSES]
    hist = {c: Counter() for c in classes}
    for p, t in zip(pred, true):
        p = np.asarray(p, dtype=int)
        t = np.asarray(t, dtype=int)
        for c in classes:
            events = np.flatnonzero(t == c)
            for i in np.flatnonzero((p == c) & (t != c) & (t >= 0)):
                if len(events) == 0:
                    hist[c][NO_EVENT] += 1
                    continue
                d = i - events
                best = d[np.lexsort((d, np.abs(d)))[0]]
                hist[c][int(best)] += 1
    return hist


def histogram_rows(hist: dict[int, Counter]) -> list[dict]:
    rows = []
    for c, counts in hist.items():
        name = TRANSITION_NAMES[c]
        numeric = sorted(k for k in counts if k != NO_EVENT)
        for k in numeric:
            rows.append({"class": name, "offset_intervals": k, "count": counts[k]})
        rows.append({"class": name, "offset_intervals": NO_EVENT, "count": counts.get(NO_EVENT, 0)})
    return rows


# ----------------------------------------------------------------------------
# report


@dataclass
class FoldScores:
    """Aligned per-window predictions and labels for one fold's evaluation set."""
    stay_ids: list[str]
    outcome_probs: list[np.ndarray]
    transition_probs: list[np.ndarray]
    outcome_labels: list[np.ndarray]
    transition_labels: list[np.ndarray]
    groups: list[str] | None = None


def _class_aurocs(probs: Sequence[np.ndarray], ind: Sequence[np.ndarray], names: Sequence[str]) -> dict:
    P = np.concatenate(probs) if probs else np.zeros((0, len(names)))
    Y = np.concatenate(ind) if ind else np.zeros((0, len(names)), dtype=int)
    keep = Y[:, 0] >= 0 if len(Y) else np.zeros(0, dtype=bool)
    return {name: auroc(P[keep, c], Y[keep, c]) for c, name in enumerate(names)}


def fold_aurocs(fs: FoldScores, horizon: int = 0, mask: Sequence[bool] | None = None) -> dict:
    """Per-class AUROCs of one fold; ``horizon`` applies lead credit to the transition head only."""
    idx = range(len(fs.stay_ids)) if mask is None else [i for i, m in enumerate(mask) if m]
    o_ind = [indicators(fs.outcome_labels[i], len(OUTCOME_NAMES)) for i in idx]
    t_ind = [lead_credit_relabel(fs.transition_labels[i], horizon) for i in idx]
    return {
        "outcome": _class_aurocs([fs.outcome_probs[i] for i in idx], o_ind, OUTCOME_NAMES),
        "transition": _class_aurocs([fs.transition_probs[i] for i in idx], t_ind, TRANSITION_NAMES),
    }


@dataclass
class MetricsReport:
    outcome: dict[str, Interval95]
    transition: dict[str, Interval95]
    confusion_outcome: np.ndarray
    confusion_transition: np.ndarray
    fp_offsets: dict[int, Counter]
    lead: dict[int, dict[str, dict[str, Interval95]]] = field(default_factory=dict)
    groups: dict[str, dict[str, dict[str, Interval95]]] = field(default_factory=dict)
    n_folds: int = 0
    meta: dict = field(default_factory=dict)

    def mean_transition_auroc(self, classes: Sequence[str] | None = None) -> float | None:
        vals = [self.transition[c].mean for c in (classes or TRANSITION_NAMES)
                if self.transition[c].mean is not None]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        head = lambda d: {k: v.to_dict() for k, v in d.items()}
        return {
            "n_folds": self.n_folds,
            "meta": self.meta,
            "outcome": head(self.outcome),
            "transition": head(self.transition),
            "lead": {str(h): {"outcome": head(v["outcome"]), "transition": head(v["transition"])}
                     for h, v in self.lead.items()},
            "confusion": {
                "outcome": {"classes": OUTCOME_NAMES, "matrix": self.confusion_outcome.tolist()},
                "transition": {"classes": TRANSITION_NAMES, "matrix": self.confusion_transition.tolist()},
            },
            "fp_offsets": histogram_rows(self.fp_offsets),
            "groups": {g: {"outcome": head(v["outcome"]), "transition": head(v["transition"])}
                       for g, v in self.groups.items()},
        }

    def to_json(self) -> str:
        return dumps(self.to_dict(), indent=2)

    def table_csv(self, horizon: int | None = None) -> str:
        """Rows = classes, columns = the raw variant and, if given, the lead-credited one."""
        cols = [("raw", {"outcome": self.outcome, "transition": self.transition})]
        if horizon is not None and horizon in self.lead:
            cols.append((f"lead_{horizon}", self.lead[horizon]))
        return metrics_table_csv(cols)

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,offset_intervals,count\n")
        for r in histogram_rows(self.fp_offsets):
            buf.write(f"{r['class']},{r['offset_intervals']},{r['count']}\n")
        return buf.getvalue()


def metrics_table_csv(columns: Sequence[tuple[str, dict]]) -> str:
    """CSV with one row per (head, class) and one column per variant."""
    buf = io.StringIO()
    buf.write("head,class," + ",".join(name for name, _ in columns) + "\n")
    for head, names in (("outcome", OUTCOME_NAMES), ("transition", TRANSITION_NAMES)):
        for c in names:
            cells = []
            for _, col in columns:
                iv = col[head].get(c)
                cells.append(iv.cell() if iv is not None else "")
            buf.write(f"{head},{c}," + ",".join(cells) + "\n")
    return buf.getvalue()


def _summarize(per_fold: list[dict]) -> dict[str, dict[str, Interval95]]:
    out = {}
    for head, names in (("outcome", OUTCOME_NAMES), ("transition", TRANSITION_NAMES)):
        out[head] = {c: fold_interval([f[head][c] for f in per_fold]) for c in names}
    return out


def evaluate(folds: Sequence[FoldScores], lead_horizons: Sequence[int] = (),
             fp_classes: Sequence[int] | None = None) -> MetricsReport:
    """Per-class one-vs-rest AUROC per fold, summarized as mean and 95% interval.

    Unknown outcome and Masked transition windows are excluded. Confusion
    matrices (argmax) and false-positive offsets are pooled over folds.
    """
    base = _summarize([fold_aurocs(f) for f in folds])
    lead = {h: _summarize([fold_aurocs(f, h) for f in folds]) for h in lead_horizons}
    co = np.zeros((len(OUTCOME_NAMES),) * 2, dtype=int)
    ct = np.zeros((len(TRANSITION_NAMES),) * 2, dtype=int)
    preds, trues = [], []
    for f in folds:
        for op, tp, ol, tl in zip(f.outcome_probs, f.transition_probs, f.outcome_labels, f.transition_labels):
            co += confusion_matrix(ol, np.argmax(op, axis=1), len(OUTCOME_NAMES))
            ct += confusion_matrix(tl, np.argmax(tp, axis=1), len(TRANSITION_NAMES))
            preds.append(np.argmax(tp, axis=1))
            trues.append(tl)
    groups = {}
    names = sorted({g for f in folds if f.groups for g in f.groups})
    for g in names:
        per = [fold_aurocs(f, 0, [x == g for x in f.groups]) for f in folds if f.groups]
        groups[g] = _summarize(per)
    return MetricsReport(base["outcome"], base["transition"], co, ct,
                         fp_offset_histogram(preds, trues, fp_classes), lead, groups, len(folds))
