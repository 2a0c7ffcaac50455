"""Patient-level development/test split and cross-validation folds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .._io import rng_for


class SplitError(ValueError):
    pass


@dataclass
class SplitPlan:
    seed: int
    dev: list[str]
    test: list[str]
    folds: list[list[str]]

    def fold_of(self) -> dict[str, int]:
        return {p: f for f, ids in enumerate(self.folds) for p in ids}

    def train_patients(self, fold: int) -> list[str]:
        return [p for f, ids in enumerate(self.folds) if f != fold for p in ids]

    def val_patients(self, fold: int) -> list[str]:
        return list(self.folds[fold])

    def validate(self) -> None:
        dev, test = set(self.dev), set(self.test)
        if dev & test:
            raise SplitError("a patient is in both the development and test sets")
        seen = [p for f in self.folds for p in f]
        if len(seen) != len(set(seen)) or set(seen) != dev:
            raise SplitError("folds do not partition the development patients")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "dev": self.dev, "test": self.test, "folds": self.folds}

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitPlan":
        return cls(int(obj["seed"]), list(obj["dev"]), list(obj["test"]), [list(f) for f in obj["folds"]])


def make_splits(patient_ids: Iterable[str], seed: int, n_folds: int = 5,
                test_fraction: float = 0.2) -> SplitPlan:
    """80/20 development/test split by patient, then ``n_folds`` folds over development.

    ``patient_ids`` may repeat (one entry per stay); all stays of a patient
    share one assignment. The result depends only on the set of ids and seed.
    """
    ids = sorted(set(str(p) for p in patient_ids))
    if len(ids) < 10:
        raise SplitError(f"need at least 10 patients to split, got {len(ids)}")
    order = rng_for(seed, "split").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = int(round(test_fraction * len(ids)))
    test = sorted(shuffled[:n_test])
    dev_shuffled = shuffled[n_test:]
    folds = [sorted(part.tolist()) for part in np.array_split(np.array(dev_shuffled, dtype=object), n_folds)]
    plan = SplitPlan(seed, sorted(dev_shuffled), test, folds)
    plan.validate()
    return plan


def stays_of(stays: Sequence, patients: Iterable[str]) -> list:
    keep = set(patients)
    return [s for s in stays if s.patient_id in keep]
