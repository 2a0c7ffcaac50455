"""How lead credit relabels one stay, and how it moves AUROC on a scored cohort.

A change predicted up to four windows (48 hours) early is counted as correct:
every window at or before a true event, within the horizon, becomes a positive
for that event's class.
"""

import numpy as np

from abd.train_eval import FoldScores, evaluate, lead_credit_relabel
from abd.transitions import TransitionClass, transition_index


def show_relabel():
    labels = [-1, 0, 0, 0, 0, 0, 0, 2, 0, 0]   # NormalToDelirium at window 7
    for h in (0, 2, 4):
        col = lead_credit_relabel(labels, h)[:, transition_index(TransitionClass.NORMAL_TO_DELIRIUM)]
        print(f"horizon {h}: {col.tolist()}")


def early_firing_model(rng, n_stays=300):
    """Toy scores that rise up to four windows before each NormalToDelirium event."""
    probs, labels = [], []
    for _ in range(n_stays):
        K = int(rng.integers(6, 14))
        tl = np.zeros(K, dtype=int)
        tl[0] = -1
        if rng.random() < 0.5:
            tl[int(rng.integers(2, K))] = 2
        p = rng.dirichlet(np.ones(6), size=K)
        for j in np.flatnonzero(tl == 2):
            p[max(1, j - 4):j + 1, 2] += 0.5
        probs.append(p / p.sum(axis=1, keepdims=True))
        labels.append(tl)
    zeros = [np.zeros((len(t), 4)) + 0.25 for t in labels]
    return FoldScores([f"s{i}" for i in range(n_stays)], zeros, probs,
                      [np.zeros(len(t), dtype=int) for t in labels], labels)


if __name__ == "__main__":
    show_relabel()
    report = evaluate([early_firing_model(np.random.default_rng(0))], lead_horizons=(4,))
    raw = report.transition["NormalToDelirium"].mean
    lead = report.lead[4]["transition"]["NormalToDelirium"].mean
    print(f"NormalToDelirium AUROC raw {raw:.3f}, 48-hour lead {lead:.3f}")
