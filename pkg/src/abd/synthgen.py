"""Synthetic ICU cohorts driven by a latent brain-state Markov chain.

Each stay follows a per-interval latent path over Normal/Delirium/Coma/
Deceased. Vitals are Gaussian around state-specific means and shift toward the
next state's means during a prodrome before every change. Prodrome lengths are
drawn per change, so a shift announces that a change is coming without fixing
exactly when. RASS/GCS/CAM values are drawn from
per-state supports that can only ever phenotype to the latent state or to
Unknown, which makes the latent path an exact oracle for the labels.
"""

from __future__ import annotations

import copy
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import derive_seed, write_jsonl
from .events import StayRecord, stay_from_dict
from .phenotype import AbdState, ScoreSnapshot, phenotype_interval

STATES = ("Normal", "Delirium", "Coma", "Deceased")
CHAIN_STATES = STATES + ("Exit",)


def _base_transition() -> list[list[float]]:
    # rows: Normal, Delirium, Coma, Deceased, Exit
    return [
        [0.90, 0.05, 0.04, 0.01, 0.0],
        [0.05, 0.87, 0.06, 0.02, 0.0],
        [0.02, 0.08, 0.85, 0.05, 0.0],
        [0.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ]


def _base_vitals() -> dict[str, dict[str, list[float]]]:
    # (mean, std) per state
    return {
        "vital:hr": {"Normal": [82, 12], "Delirium": [98, 12], "Coma": [74, 12], "Deceased": [122, 12]},
        "vital:sbp": {"Normal": [124, 15], "Delirium": [136, 15], "Coma": [106, 15], "Deceased": [82, 15]},
        "vital:rr": {"Normal": [17, 3.5], "Delirium": [22, 3.5], "Coma": [13, 3.5], "Deceased": [28, 3.5]},
        "vital:spo2": {"Normal": [97, 1.8], "Delirium": [95.5, 1.8], "Coma": [95, 1.8], "Deceased": [88, 1.8]},
        "vital:temp": {"Normal": [36.9, 0.45], "Delirium": [37.5, 0.45], "Coma": [36.6, 0.45], "Deceased": [38.2, 0.45]},
        "vital:vent": {"Normal": [0.15, 0.3], "Delirium": [0.35, 0.3], "Coma": [0.9, 0.3], "Deceased": [0.95, 0.3]},
    }


def _base_scores() -> dict[str, dict]:
    return {
        "probs": {
            "Normal": {"RASS": 0.85, "GCS": 0.55, "CAM": 0.8},
            "Delirium": {"RASS": 0.85, "GCS": 0.55, "CAM": 0.8},
            "Coma": {"RASS": 0.85, "GCS": 0.75, "CAM": 0.0},
        },
        "supports": {
            "Normal": {"RASS": [-2, -1, 0, 0, 0, 1], "GCS": [13, 14, 15, 15], "CAM": [0]},
            "Delirium": {"RASS": [-3, -2, -1, 0, 1, 2, 3], "GCS": [9, 10, 11, 12, 13, 14], "CAM": [1]},
            "Coma": {"RASS": [-5, -5, -4, -4, -3], "GCS": [3, 4, 5, 6, 7, 8], "CAM": []},
        },
    }


def _base_meds() -> dict[str, dict[str, float]]:
    # probability of administration per interval, per state
    return {
        "med:propofol": {"Normal": 0.10, "Delirium": 0.20, "Coma": 0.70, "Deceased": 0.6},
        "med:dexmedetomidine": {"Normal": 0.08, "Delirium": 0.45, "Coma": 0.20, "Deceased": 0.2},
        "med:haloperidol": {"Normal": 0.03, "Delirium": 0.40, "Coma": 0.05, "Deceased": 0.1},
        "med:fentanyl": {"Normal": 0.25, "Delirium": 0.35, "Coma": 0.55, "Deceased": 0.5},
        "med:norepinephrine": {"Normal": 0.05, "Delirium": 0.10, "Coma": 0.30, "Deceased": 0.8},
        "med:rare_antidote": {"Normal": 0.0005, "Delirium": 0.0005, "Coma": 0.0005, "Deceased": 0.0},
    }


def _base_labs() -> dict[str, dict]:
    return {
        "lab:sodium": {"prob": 0.5, "mean": {"Normal": 139, "Delirium": 142, "Coma": 141, "Deceased": 146}, "std": 3.5},
        "lab:lactate": {"prob": 0.4, "mean": {"Normal": 1.4, "Delirium": 1.9, "Coma": 2.4, "Deceased": 4.5}, "std": 0.7},
        "lab:creatinine": {"prob": 0.5, "mean": {"Normal": 1.0, "Delirium": 1.3, "Coma": 1.5, "Deceased": 2.4}, "std": 0.4},
        "lab:ammonia_rare": {"prob": 0.0008, "mean": {"Normal": 40, "Delirium": 60, "Coma": 80, "Deceased": 90}, "std": 15},
    }


def _base_statics() -> dict[str, dict]:
    return {
        "age": {"dist": "normal", "mean": 62.0, "std": 16.0, "lo": 18.0, "hi": 95.0, "missing": 0.03},
        "sex_male": {"dist": "bernoulli", "p": 0.56, "missing": 0.0},
        "bmi": {"dist": "normal", "mean": 28.5, "std": 7.7, "lo": 14.0, "hi": 60.0, "missing": 0.08},
        "chf": {"dist": "bernoulli", "p": 0.2, "missing": 0.0},
        "renal": {"dist": "bernoulli", "p": 0.16, "missing": 0.0},
        "dementia": {"dist": "bernoulli", "p": 0.04, "missing": 0.0},
    }


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_patients: int = 200
    extra_stay_rate: float = 0.25
    max_stays: int = 3
    los_median_hours: float = 108.0
    los_sigma: float = 0.55
    los_min_hours: float = 18.0
    los_max_hours: float = 16 * 24.0
    initial: list[float] = field(default_factory=lambda: [0.70, 0.18, 0.12, 0.0])
    transition: list[list[float]] = field(default_factory=_base_transition)
    vitals: dict = field(default_factory=_base_vitals)
    event_rate: float = 3.0
    prodrome_min_hours: float = 96.0
    prodrome_hours: float = 120.0
    prodrome_strength: float = 0.35
    scores: dict = field(default_factory=_base_scores)
    score_window_hours: float = 3.0
    meds: dict = field(default_factory=_base_meds)
    labs: dict = field(default_factory=_base_labs)
    statics: dict = field(default_factory=_base_statics)
    variant: str = "base"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "GeneratorConfig":
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "GeneratorConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self) -> None:
        T = np.asarray(self.transition, dtype=float)
        if T.shape != (5, 5):
            raise ValueError("transition matrix must be 5x5")
        if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if T[3, 3] != 1.0:
            raise ValueError("Deceased must be absorbing")
        init = np.asarray(self.initial, dtype=float)
        if init.shape != (4,) or not math.isclose(init.sum(), 1.0) or init[3] != 0:
            raise ValueError("initial distribution must cover 4 states, sum to 1, exclude Deceased")
        if not 0 <= self.prodrome_min_hours <= self.prodrome_hours:
            raise ValueError("prodrome_min_hours must lie in [0, prodrome_hours]")
        if self.n_patients < 1 or self.event_rate <= 0:
            raise ValueError("n_patients and event_rate must be positive")
        for state in ("Normal", "Delirium", "Coma"):
            bad = score_support_violations(state, self.scores["supports"][state])
            if bad:
                raise ValueError(f"{state} score support is not phenotype-consistent: {bad[0]}")


def score_support_violations(state: str, support: dict[str, list[int]]) -> list[tuple]:
    """Score combinations from ``support`` that phenotype to neither ``state`` nor Unknown."""
    target = AbdState(state)
    rass = [None] + sorted(set(support.get("RASS", [])))
    gcs = [None] + sorted(set(support.get("GCS", [])))
    cam = [None] + sorted(set(support.get("CAM", [])))
    bad = []
    for r, g, c in itertools.product(rass, gcs, cam):
        label = phenotype_interval(ScoreSnapshot(0, r, g, None if c is None else bool(c)))
        if label not in (target, AbdState.UNKNOWN):
            bad.append((r, g, c, label))
    return bad


def _renormalize_row(row: list[float], i: int, new_self: float) -> list[float]:
    row = list(row)
    others = sum(p for j, p in enumerate(row) if j != i)
    scale = (1.0 - new_self) / others
    out = [p * scale for p in row]
    out[i] = new_self
    return out


def default_generator_config(variant: str = "base", seed: int = 0, n_patients: int = 200) -> GeneratorConfig:
    """``base`` or ``hospital_b``.

    ``hospital_b`` shifts every vital and lab mean by half a within-state std,
    moves the Normal/Delirium/Coma self-transition probabilities by 0.05 and
    cuts the vital event rate to 70%.
    """
    cfg = GeneratorConfig(seed=seed, n_patients=n_patients, variant=variant)
    if variant == "base":
        return cfg
    if variant != "hospital_b":
        raise ValueError(f"unknown generator variant {variant!r}")
    vitals = copy.deepcopy(cfg.vitals)
    for spec in vitals.values():
        for state, (m, s) in spec.items():
            spec[state] = [m + 0.5 * s, s]
    labs = copy.deepcopy(cfg.labs)
    for spec in labs.values():
        spec["mean"] = {k: v + 0.5 * spec["std"] for k, v in spec["mean"].items()}
    T = [list(r) for r in cfg.transition]
    for i, delta in zip(range(3), (-0.05, 0.05, -0.05)):
        T[i] = _renormalize_row(T[i], i, T[i][i] + delta)
    cfg.vitals = vitals
    cfg.labs = labs
    cfg.transition = T
    cfg.event_rate = cfg.event_rate * 0.7
    return cfg


def _sample_static(rng: np.random.Generator, spec: dict) -> float | None:
    if spec.get("missing", 0) and rng.random() < spec["missing"]:
        return None
    if spec["dist"] == "bernoulli":
        return float(rng.random() < spec["p"])
    v = rng.normal(spec["mean"], spec["std"])
    return float(np.clip(v, spec.get("lo", -np.inf), spec.get("hi", np.inf)))


def _sample_path(rng: np.random.Generator, cfg: GeneratorConfig, n_int: int) -> list[int]:
    T = np.asarray(cfg.transition)
    path = [int(rng.choice(4, p=cfg.initial))]
    while len(path) < n_int and path[-1] != 3:
        path.append(int(rng.choice(5, p=T[path[-1]])))
        if path[-1] == 4:
            path.pop()
            break
    return path


def _sample_stay(rng: np.random.Generator, cfg: GeneratorConfig, stay_id: str, patient_id: str,
                 statics: dict) -> tuple[dict, list[str]]:
    los = float(np.clip(rng.lognormal(math.log(cfg.los_median_hours), cfg.los_sigma),
                        cfg.los_min_hours, cfg.los_max_hours))
    n_int = int(math.ceil(los / 12.0))
    path = _sample_path(rng, cfg, n_int)
    death = None
    if path[-1] == 3:
        k = len(path) - 1
        death = 12.0 * k + float(rng.uniform(0.5, 11.5))
        los = death
    else:
        los = min(los, 12.0 * len(path))

    # alive state governing emissions in each interval, plus the next change
    alive = []
    for k, s in enumerate(path):
        alive.append(s if s != 3 else (alive[-1] if alive else 0))
    change_at = [None] * len(path)
    nxt = None
    for k in range(len(path) - 1, -1, -1):
        if k + 1 < len(path) and path[k + 1] != path[k]:
            nxt = k + 1
        change_at[k] = nxt
    onset = rng.uniform(cfg.prodrome_min_hours, cfg.prodrome_hours, size=len(path))

    events: list[tuple[float, str, float]] = []
    vital_codes = list(cfg.vitals)
    for k, s in enumerate(path):
        t0 = 12.0 * k
        t1 = min(t0 + 12.0, los)
        if t1 <= t0:
            continue
        base = STATES[alive[k]]
        n_ev = rng.poisson(cfg.event_rate * (t1 - t0))
        ts = np.sort(rng.uniform(t0, t1, size=n_ev))
        picks = rng.integers(0, len(vital_codes), size=n_ev)
        noise = rng.standard_normal(n_ev)
        for t, ci, z in zip(ts, picks, noise):
            spec = cfg.vitals[vital_codes[ci]]
            mean, std = spec[base]
            if s == 3:
                w, target = 1.0, "Deceased"
            elif change_at[k] is not None:
                tc = 12.0 * change_at[k]
                w = 1.0 if tc - t <= onset[change_at[k]] else 0.0
                target = STATES[path[change_at[k]]]
            else:
                w, target = 0.0, base
            mean = mean + cfg.prodrome_strength * w * (spec[target][0] - mean)
            events.append((float(t), vital_codes[ci], float(mean + std * z)))

        state_name = STATES[s]
        for code, probs in cfg.meds.items():
            if rng.random() < probs[state_name]:
                for _ in range(int(rng.integers(1, 3))):
                    events.append((float(rng.uniform(t0, t1)), code, float(rng.lognormal(0.0, 0.3))))
        for code, spec in cfg.labs.items():
            if rng.random() < spec["prob"]:
                events.append((float(rng.uniform(t0, t1)), code,
                               float(rng.normal(spec["mean"][state_name], spec["std"]))))

    scores: list[tuple[float, str, int]] = []
    for k, s in enumerate(path):
        if s == 3:
            continue
        name = STATES[s]
        probs = cfg.scores["probs"][name]
        support = cfg.scores["supports"][name]
        t0 = 12.0 * k
        span = min(cfg.score_window_hours, max(los - t0, 0.0))
        # RASS -3 pairs with a GCS draw; without it the interval can only be Unknown
        for kind in ("RASS", "GCS", "CAM"):
            if support[kind] and rng.random() < probs[kind]:
                v = int(rng.choice(support[kind]))
                scores.append((float(t0 + rng.uniform(0, span)), kind, v))

    events.sort(key=lambda e: e[0])
    scores.sort(key=lambda e: e[0])
    stay = {
        "stay_id": stay_id,
        "patient_id": patient_id,
        "los_hours": los,
        "death_hour": death,
        "statics": statics,
        "events": [[t, c, v] for t, c, v in events if t <= los],
        "scores": [[t, k, v] for t, k, v in scores if t <= los],
    }
    return stay, [STATES[s] for s in path]


def sample_cohort(config: GeneratorConfig) -> tuple[list[dict], list[dict]]:
    """Cohort rows (cohort JSONL schema) and latent-path truth rows.

    ``truth[i]["latent"][k]`` is the state during hours ``[12k, 12k + 12)``.
    Every patient draws from its own generator seeded by hashing the master
    seed with the patient index, so output is independent of evaluation order.
    """
    config.validate()
    stays, truth = [], []
    for p in range(config.n_patients):
        rng = np.random.default_rng(derive_seed(config.seed, f"patient:{p}"))
        pid = f"p{p:05d}"
        n_stays = 1 + min(int(rng.poisson(config.extra_stay_rate)), config.max_stays - 1)
        statics = {name: _sample_static(rng, spec) for name, spec in config.statics.items()}
        for j in range(n_stays):
            stay, latent = _sample_stay(rng, config, f"{pid}_s{j}", pid, statics)
            stays.append(stay)
            truth.append({"stay_id": stay["stay_id"], "latent": latent})
    return stays, truth


def to_records(rows: list[dict]) -> list[StayRecord]:
    return [stay_from_dict(r) for r in rows]


def write_cohort(config: GeneratorConfig, out: str | Path, truth_out: str | Path | None = None) -> tuple[Path, Path]:
    out = Path(out)
    truth_path = Path(truth_out) if truth_out else out.with_name(out.stem + ".truth.jsonl")
    stays, truth = sample_cohort(config)
    write_jsonl(out, stays)
    write_jsonl(truth_path, truth)
    return out, truth_path
