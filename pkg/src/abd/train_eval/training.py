"""Cross-validated training, checkpoint selection, and prediction."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .._io import derive_seed, rng_for
from ..events import StayRecord, WindowedStay, clean_stay, window_stay
from ..model.autodiff import Tensor
from ..model.checkpoint import Checkpoint
from ..model.layers import ModelConfig
from ..model.loss import dual_loss
from ..model.optim import Adam
from .data import (FoldData, StayArrays, bucketed_groups, build_feature_batch, build_sequence_batch, pack_stays,
                   prepare_fold, stay_arrays)
from .metrics import FoldScores
from .engine import ARCHS, derive_transitions, forward_batch, init_params, max_len
from .splits import SplitError, SplitPlan, stays_of

log = logging.getLogger(__name__)

CLASS_WEIGHTING = ("balanced", "uniform")


class TrainingDiverged(FloatingPointError):
    pass


class PredictionError(ValueError):
    pass


@dataclass
class TrainConfig:
    arch: str = "mamba"
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    alpha_fp: float = 2.0
    lam: float = 1.0
    clip_norm: float | None = 5.0
    transition_head: bool = True
    class_weights: str = "uniform"
    prune_threshold: float = 0.01
    length_pool: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.class_weights not in CLASS_WEIGHTING:
            raise ValueError(f"unknown class weighting {self.class_weights!r}; expected one of {CLASS_WEIGHTING}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    log: list[dict] = field(default_factory=list)
    data: FoldData | None = None


def _batches(arch: str, stays: Sequence[StayArrays], cfg: ModelConfig | None, batch_size: int,
             feat_stats: tuple[np.ndarray, np.ndarray] | None, groups=None):
    for group in groups if groups is not None else pack_stays(stays, batch_size):
        if arch == "linear":
            yield build_feature_batch(group, *feat_stats)
        else:
            yield build_sequence_batch(group, cfg.vocab_size, max_len(arch, cfg))


def transition_class_weights(stays: Sequence[StayArrays], mode: str = "balanced",
                             n_classes: int = 6) -> np.ndarray:
    """Per-class transition weights before the no-change factor.

    ``balanced`` gives class ``c`` the weight ``n / (k * n_c)`` over the ``k``
    classes present in ``stays``, so every present class carries the same total
    weight; absent classes get 1. ``uniform`` gives every class 1.
    """
    w = np.ones(n_classes)
    if mode == "uniform":
        return w
    labels = np.concatenate([s.transition for s in stays]) if stays else np.zeros(0, dtype=int)
    counts = np.bincount(labels[labels >= 0], minlength=n_classes)[:n_classes]
    present = counts > 0
    if present.any():
        w[present] = counts.sum() / (present.sum() * counts[present])
    return w


def _loss(arch, params, cfg, batch, tcfg: TrainConfig, train, rng, weights=None):
    outcome, transition = forward_batch(arch, params, cfg, batch, train, rng)
    lam = tcfg.lam if tcfg.transition_head else 0.0
    return dual_loss(outcome, transition, batch.outcome, batch.transition, weights,
                     alpha_fp=tcfg.alpha_fp, lam=lam)


def feature_stats(stays: Sequence[StayArrays]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.concatenate([s.features for s in stays])
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


def evaluate_loss(arch, params, cfg, stays, tcfg: TrainConfig, feat_stats=None, weights=None) -> float:
    """Window-weighted mean loss over ``stays`` in inference mode."""
    total, rows = 0.0, 0
    for batch in _batches(arch, stays, cfg, tcfg.batch_size, feat_stats):
        total += float(_loss(arch, params, cfg, batch, tcfg, False, None, weights).data) * batch.n_rows
        rows += batch.n_rows
    return total / max(rows, 1)


def train_fold(data: FoldData, train_ids: Sequence[str], val_ids: Sequence[str], tcfg: TrainConfig,
               model_cfg: ModelConfig | None = None, fold: int = 0) -> FoldResult:
    """Train one fold with Adam; keep the parameters with the lowest validation loss."""
    arch = tcfg.arch
    train = [data.stays[s] for s in train_ids if s in data.stays]
    val = [data.stays[s] for s in val_ids if s in data.stays]
    if not train:
        raise ValueError(f"fold {fold} has no training windows")
    cfg = None
    feat_stats = None
    n_features = 0
    if arch == "linear":
        feat_stats = feature_stats(train)
        n_features = len(feat_stats[0])
    else:
        base = model_cfg or ModelConfig()
        cfg = replace(base, vocab_size=max(data.vocab.size, 1), static_dim=len(data.vocab.statics),
                      seed=derive_seed(tcfg.seed, f"init:fold{fold}") % (2 ** 32),
                      transition_head=tcfg.transition_head)
    params = init_params(arch, cfg, n_features, derive_seed(tcfg.seed, f"init:fold{fold}") % (2 ** 32))
    opt = Adam(params, tcfg.lr, tcfg.beta1, tcfg.beta2, clip_norm=tcfg.clip_norm)
    weights = transition_class_weights(train, tcfg.class_weights)

    best = (np.inf, -1, {k: p.data.copy() for k, p in params.items()})
    history = []
    for epoch in range(1, tcfg.epochs + 1):
        rng = rng_for(tcfg.seed, f"fold{fold}:epoch{epoch}")
        groups = bucketed_groups(train, tcfg.batch_size, rng, tcfg.length_pool if arch != "linear" else 0)
        total, rows = 0.0, 0
        for b, batch in enumerate(_batches(arch, train, cfg, tcfg.batch_size, feat_stats, groups)):
            opt.zero_grad()
            loss = _loss(arch, params, cfg, batch, tcfg, True, rng, weights)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"fold {fold}, epoch {epoch}, batch {b}: non-finite loss {value} "
                    f"(stays {', '.join(batch.stay_ids[:5])}{'...' if len(batch.stay_ids) > 5 else ''})")
            loss.backward()
            gnorm = opt.step()
            if not np.isfinite(gnorm):
                raise TrainingDiverged(f"fold {fold}, epoch {epoch}, batch {b}: non-finite gradient norm")
            total += value * batch.n_rows
            rows += batch.n_rows
        train_loss = total / rows
        val_loss = evaluate_loss(arch, params, cfg, val, tcfg, feat_stats, weights) if val else train_loss
        history.append({"fold": fold, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("fold %d epoch %d train %.5f val %.5f", fold, epoch, train_loss, val_loss)
        if val_loss < best[0]:
            best = (val_loss, epoch, {k: p.data.copy() for k, p in params.items()})

    final = {k: Tensor(v, requires_grad=True, name=k) for k, v in best[2].items()}
    meta = {"fold": fold, "best_epoch": best[1], "best_val_loss": best[0],
            "transition_head": tcfg.transition_head, "transition_weights": weights.tolist(),
            "train": tcfg.to_dict()}
    if feat_stats is not None:
        meta["feature_mean"] = feat_stats[0].tolist()
        meta["feature_std"] = feat_stats[1].tolist()
    ckpt = Checkpoint(arch, cfg, final, data.vocab, tcfg.seed, meta)
    return FoldResult(fold, ckpt, history, data)


def check_provenance(data: FoldData, train_patients) -> None:
    """Vocabulary and scaling statistics must come from the fold's training patients only."""
    extra = data.vocab.provenance - set(train_patients)
    if extra:
        raise SplitError(f"fold statistics include {len(extra)} non-training patients, e.g. {sorted(extra)[:3]}")


def train_model(stays: Sequence[StayRecord], plan: SplitPlan, tcfg: TrainConfig,
                model_cfg: ModelConfig | None = None, folds: Sequence[int] | None = None,
                keep_data: bool = True) -> list[FoldResult]:
    """One checkpoint per fold; vocabulary and scaling come from that fold's training patients."""
    results = []
    test = stays_of(stays, plan.test)
    for f in range(len(plan.folds)) if folds is None else folds:
        train = stays_of(stays, plan.train_patients(f))
        val = stays_of(stays, plan.val_patients(f))
        data = prepare_fold(train, val + test, with_features=tcfg.arch == "linear",
                            prune_threshold=tcfg.prune_threshold,
                            max_seq=(model_cfg or ModelConfig()).max_seq)
        check_provenance(data, plan.train_patients(f))
        res = train_fold(data, [s.stay_id for s in train], [s.stay_id for s in val], tcfg, model_cfg, f)
        if not keep_data:
            res.data = None
        results.append(res)
    return results


# ----------------------------------------------------------------------------
# prediction


def predict_arrays(ckpt: Checkpoint, stays: Sequence[StayArrays],
                   batch_size: int = 32) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-stay ``(outcome (K, 4), transition (K, 6))`` probabilities."""
    arch, cfg = ckpt.arch, ckpt.config
    feat_stats = None
    if arch == "linear":
        feat_stats = (np.asarray(ckpt.meta["feature_mean"]), np.asarray(ckpt.meta["feature_std"]))
        expected = ckpt.params["linear.outcome.w"].shape[0]
        for s in stays:
            if s.features is None or s.features.shape[1] != expected:
                raise PredictionError(f"stay {s.stay_id}: features do not match the checkpoint")
    derived = not ckpt.meta.get("transition_head", True)
    sizes = {s.stay_id: s.n_intervals for s in stays}
    out = {}
    for batch in _batches(arch, stays, cfg, batch_size, feat_stats):
        o, t = forward_batch(arch, ckpt.params, cfg, batch)
        o, t = o.data, t.data
        if derived:
            t = derive_transitions(o, batch.prev_row)
        start = 0
        for sid in batch.stay_ids:
            n = sizes[sid]
            out[sid] = (o[start:start + n], t[start:start + n])
            start += n
    return out


def prepare_for_checkpoint(ckpt: Checkpoint, stay: StayRecord | WindowedStay) -> StayArrays:
    """Clean and window a stay with the checkpoint's own vocabulary and scaling."""
    windowed = stay if isinstance(stay, WindowedStay) else None
    raw = stay.stay if windowed is not None else stay
    if raw.scaled:
        unknown = {c for c in raw.codes if c not in ckpt.vocab.index}
        if unknown:
            raise PredictionError(f"stay {raw.stay_id} has codes outside the checkpoint vocabulary: "
                                  f"{sorted(unknown)[:5]}")
        n_static = 0 if raw.static_vector is None else len(raw.static_vector)
        if n_static != len(ckpt.vocab.statics):
            raise PredictionError(f"stay {raw.stay_id} has {n_static} statics, checkpoint expects "
                                  f"{len(ckpt.vocab.statics)}")
        cleaned = raw
    else:
        cleaned = clean_stay(raw, ckpt.vocab)
    max_seq = ckpt.config.max_seq if ckpt.config is not None else 1200
    windowed = window_stay(cleaned, max_seq=max_seq)
    scale = ckpt.config.time_scale if ckpt.config is not None else 168.0
    return stay_arrays(windowed, ckpt.vocab, scale, with_features=ckpt.arch == "linear")


def predict(ckpt: Checkpoint, stay: StayRecord | WindowedStay) -> tuple[np.ndarray, np.ndarray]:
    """Outcome and transition probabilities for every prediction window of one stay."""
    arrays = prepare_for_checkpoint(ckpt, stay)
    if arrays.n_intervals == 0:
        return np.zeros((0, 4)), np.zeros((0, 6))
    return predict_arrays(ckpt, [arrays])[arrays.stay_id]


def score_stays(ckpt: Checkpoint, stays: Sequence[StayArrays], groups: dict[str, str] | None = None,
                batch_size: int = 32) -> FoldScores:
    """Predictions aligned with labels for an evaluation set."""
    preds = predict_arrays(ckpt, stays, batch_size)
    ids = [s.stay_id for s in stays]
    return FoldScores(
        stay_ids=ids,
        outcome_probs=[preds[i][0] for i in ids],
        transition_probs=[preds[i][1] for i in ids],
        outcome_labels=[s.outcome for s in stays],
        transition_labels=[s.transition for s in stays],
        groups=None if groups is None else [groups.get(i, "missing") for i in ids],
    )


def evaluate_checkpoints(checkpoints: Sequence[Checkpoint], stays: Sequence[StayRecord],
                         group_by: str | None = None, lead_horizons: Sequence[int] = (4,),
                         batch_size: int = 32):
    """Score every fold checkpoint on ``stays`` and summarize across folds.

    Each checkpoint cleans the stays with its own vocabulary and scaling. Codes
    of the evaluation cohort that a checkpoint has never seen are dropped with
    a warning, so only shared codes reach the model.
    """
    from .metrics import evaluate

    stays = list(stays)
    groups = None
    if group_by is not None:
        groups = {s.stay_id: _group_value(s.statics.get(group_by)) for s in stays}
    folds = []
    for ckpt in checkpoints:
        seen = set()
        for s in stays:
            seen.update(s.codes)
            seen.update(f"score:{k}" for _, k, _ in s.scores)
        unseen = sorted(c for c in seen if c not in ckpt.vocab)
        if unseen:
            warnings.warn(f"{len(unseen)} codes absent from the training vocabulary are dropped "
                          f"(e.g. {unseen[:3]})", stacklevel=2)
        arrays = [a for a in (prepare_for_checkpoint(ckpt, s) for s in stays) if a.n_intervals]
        folds.append(score_stays(ckpt, arrays, groups, batch_size))
    return evaluate(folds, lead_horizons)


def _group_value(v) -> str:
    if v is None:
        return "missing"
    return str(int(v)) if float(v).is_integer() else str(v)
