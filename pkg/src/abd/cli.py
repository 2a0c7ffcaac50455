"""Command-line entry point: ``abd <gen|prep|label|train|eval|report> [flags]``.

Exit codes: 0 on success, 1 on a usage error, 2 on a data or validation error.
Every artifact is a deterministic function of the arguments and input files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from ._io import read_jsonl, write_json, write_jsonl
from .events import CohortError, RecordError, build_vocabulary, clean_events, filter_inclusion, ingest_cohort, \
    stay_to_dict, window_stay
from .model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model.layers import ModelConfig
from .phenotype import AbdState, label_stay, labels_to_json, outcome_index
from .synthgen import GeneratorConfig, default_generator_config, write_cohort
from .train_eval.metrics import (OUTCOME_NAMES, TRANSITION_NAMES, FoldScores, evaluate, metrics_table_csv,
                                 Interval95)
from .train_eval.splits import SplitError, SplitPlan, make_splits, stays_of
from .train_eval.training import (CLASS_WEIGHTING, PredictionError, TrainConfig, TrainingDiverged, evaluate_checkpoints,
                                  score_stays, train_model)
from .transitions import TransitionClass, estimate_markov, interval_transition_labels, transition_index

log = logging.getLogger("abd")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file whose keys override flags")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/OpenMP threads (default: $ABD_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="abd", description="Dynamic acute brain dysfunction prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic cohort and its latent truth")
    g.add_argument("--variant", default="base", choices=["base", "hospital_b"])
    g.add_argument("--patients", type=int, default=200)
    g.add_argument("--seed", type=int)
    g.add_argument("--generator-config", type=Path, help="full generator configuration JSON")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--truth", type=Path, help="default: <out stem>.truth.jsonl")

    pr = sub.add_parser("prep", parents=[common], help="vocabulary, cleaned stays and windows")
    pr.add_argument("--cohort", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True, help="output directory")
    pr.add_argument("--prune-threshold", type=float, default=0.01)
    pr.add_argument("--max-seq", type=int, default=1200)

    lb = sub.add_parser("label", parents=[common], help="per-window states, transitions and Markov matrix")
    lb.add_argument("--cohort", type=Path, required=True)
    lb.add_argument("--out", type=Path, required=True, help="output directory")
    lb.add_argument("--no-fill", action="store_true", help="disable score forward-fill")

    t = sub.add_parser("train", parents=[common], help="cross-validated training, one checkpoint per fold")
    t.add_argument("--cohort", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--arch", default="mamba", choices=["mamba", "gru", "linear"])
    t.add_argument("--ablate-transition-head", action="store_true",
                   help="train the outcome head only; transitions are derived from outcomes")
    t.add_argument("--folds", type=int, default=5)
    t.add_argument("--only-folds", type=int, nargs="*", help="train a subset of the folds")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--alpha-fp", type=float, default=2.0)
    t.add_argument("--lam", type=float, default=1.0)
    t.add_argument("--class-weights", choices=CLASS_WEIGHTING, default="uniform",
                   help="transition class weighting before the no-change factor")
    t.add_argument("--d-model", type=int, default=32)
    t.add_argument("--d-state", type=int, default=8)
    t.add_argument("--n-layers", type=int, default=2)

    e = sub.add_parser("eval", parents=[common], help="metrics from predictions or checkpoints")
    e.add_argument("--pred", type=Path, help="predictions JSONL written by train")
    e.add_argument("--labels", type=Path, help="labels JSONL written by label")
    e.add_argument("--checkpoints", type=Path, help="train output directory")
    e.add_argument("--cohort", type=Path, help="cohort to score with --checkpoints, or statics for --group-by")
    e.add_argument("--lead", type=int, nargs="*", default=[4], help="lead-credit horizons in windows")
    e.add_argument("--group-by", help="static variable to stratify by")
    e.add_argument("--name", default="", help="free-form label stored in the metrics")
    e.add_argument("--out", type=Path, required=True, help="output directory")

    r = sub.add_parser("report", parents=[common], help="combine metrics into summary tables")
    r.add_argument("--metrics", nargs="+", required=True, metavar="NAME=PATH")
    r.add_argument("--lead", type=int, default=4)
    r.add_argument("--out", type=Path, required=True, help="output directory")
    return p


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> None:
    if args.config is None:
        return
    try:
        overrides = json.loads(args.config.read_text())
    except FileNotFoundError:
        raise DataError(f"config file {args.config} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {args.config} is not valid JSON: {exc}") from None
    if not isinstance(overrides, dict):
        raise DataError("config file must hold a JSON object")
    known = vars(args)
    for key, value in overrides.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("command", "config"):
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        if isinstance(known[dest], Path) or dest in ("out", "cohort", "pred", "labels", "checkpoints",
                                                     "truth", "generator_config"):
            value = None if value is None else Path(value)
        setattr(args, dest, value)


def _threads(args: argparse.Namespace) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("ABD_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"ABD_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _require_file(path: Path | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.exists():
        raise DataError(f"{flag}: {path} does not exist")
    return path


def _load_cohort(path: Path) -> list:
    errors: list[RecordError] = []
    stays = ingest_cohort(_require_file(path, "--cohort"), errors=errors)
    if errors:
        log.warning("%d records rejected", len(errors))
    kept = filter_inclusion(stays)
    if not kept:
        raise DataError(f"{path}: no stay passes the inclusion criteria")
    return kept


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> None:
    if args.seed is None:
        raise UsageError("--seed is required for gen")
    if args.generator_config is not None:
        cfg = GeneratorConfig.from_json(_require_file(args.generator_config, "--generator-config"))
        cfg.seed, cfg.n_patients = args.seed, args.patients
    else:
        cfg = default_generator_config(args.variant, args.seed, args.patients)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    out, truth = write_cohort(cfg, args.out, args.truth)
    write_json(out.with_name(out.stem + ".generator.json"), cfg.to_dict())
    log.info("wrote %s and %s", out, truth)


def cmd_prep(args) -> None:
    stays = _load_cohort(args.cohort)
    vocab = build_vocabulary(stays, args.prune_threshold)
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "vocab.json", vocab.to_dict())
    cleaned = clean_events(stays, vocab)
    write_jsonl(args.out / "cleaned.jsonl", (stay_to_dict(s) for s in cleaned))
    rows = []
    for s in cleaned:
        w = window_stay(s, max_seq=args.max_seq)
        rows.append({"stay_id": s.stay_id,
                     "windows": [{"start": iv.start, "obs_start": iv.obs_start, "obs_end": iv.obs_end}
                                 for iv in w.intervals]})
    write_jsonl(args.out / "windows.jsonl", rows)


def cmd_label(args) -> None:
    stays = _load_cohort(args.cohort)
    args.out.mkdir(parents=True, exist_ok=True)
    rows, trajectories = [], []
    for s in stays:
        states = label_stay(window_stay(s), fill=not args.no_fill)
        if not states:
            continue
        trajectories.append(states)
        rows.append(labels_to_json(s.stay_id, states, interval_transition_labels(states)))
    write_jsonl(args.out / "labels.jsonl", rows)
    markov = estimate_markov(trajectories, include_exit=True)
    (args.out / "markov.csv").write_text(markov.to_csv())
    write_json(args.out / "markov_counts.json", {"states": list(markov.states), "counts": markov.counts,
                                                 "flagged": list(markov.flagged)})


def cmd_train(args) -> None:
    if args.seed is None:
        raise UsageError("--seed is required for train")
    stays = _load_cohort(args.cohort)
    try:
        tcfg = TrainConfig(arch=args.arch, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                           alpha_fp=args.alpha_fp, lam=args.lam, class_weights=args.class_weights,
                           transition_head=not args.ablate_transition_head, seed=args.seed)
        mcfg = None if args.arch == "linear" else ModelConfig(d_model=args.d_model, d_state=args.d_state,
                                                               n_layers=args.n_layers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    plan = make_splits([s.patient_id for s in stays], args.seed, n_folds=args.folds)
    args.out.mkdir(parents=True, exist_ok=True)
    write_json(args.out / "splits.json", plan.to_dict())
    write_json(args.out / "train_config.json", {"train": tcfg.to_dict(),
                                                "model": None if mcfg is None else mcfg.to_dict()})
    test = stays_of(stays, plan.test)
    preds = []
    folds = range(args.folds) if args.only_folds is None else args.only_folds
    for f in folds:
        if not 0 <= f < args.folds:
            raise UsageError(f"fold {f} outside 0..{args.folds - 1}")
        res = train_model(stays, plan, tcfg, mcfg, folds=[f])[0]
        save_checkpoint(res.checkpoint, args.out / f"fold{f}")
        _write_log(args.out / f"fold{f}" / "loss_log.csv", res.log)
        arrays = [res.data.stays[s.stay_id] for s in test if s.stay_id in res.data.stays]
        fs = score_stays(res.checkpoint, arrays)
        for sid, o, t in zip(fs.stay_ids, fs.outcome_probs, fs.transition_probs):
            preds.append({"fold": f, "stay_id": sid, "outcome": o, "transition": t})
    write_jsonl(args.out / "predictions.jsonl", preds)


def _write_log(path: Path, history: list[dict]) -> None:
    if not history:
        path.write_text("")
        return
    keys = list(history[0])
    lines = [",".join(keys)]
    for row in history:
        lines.append(",".join(f"{row[k]:.17g}" if isinstance(row[k], float) else str(row[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _read_rows(path: Path, flag: str) -> list[dict]:
    rows = []
    for lineno, obj in read_jsonl(_require_file(path, flag)):
        if isinstance(obj, Exception) or not isinstance(obj, dict):
            raise DataError(f"{path}:{lineno}: malformed record")
        rows.append(obj)
    return rows


def _fold_scores_from_files(pred_path: Path, labels_path: Path, groups: dict | None) -> list[FoldScores]:
    labels = {}
    for row in _read_rows(labels_path, "--labels"):
        try:
            outcome = np.array([outcome_index(AbdState(s)) for s in row["labels"]], dtype=int)
            trans = np.array([transition_index(TransitionClass(c)) for c in row["transitions"]], dtype=int)
        except (KeyError, ValueError) as exc:
            raise DataError(f"{labels_path}: bad label record for {row.get('stay_id')!r}: {exc}") from None
        labels[row["stay_id"]] = (outcome, trans)
    by_fold: dict[int, FoldScores] = {}
    for row in _read_rows(pred_path, "--pred"):
        sid = row.get("stay_id")
        if sid not in labels:
            raise DataError(f"{pred_path}: no labels for stay {sid!r}")
        o = np.asarray(row["outcome"], dtype=float).reshape(-1, len(OUTCOME_NAMES))
        t = np.asarray(row["transition"], dtype=float).reshape(-1, len(TRANSITION_NAMES))
        ol, tl = labels[sid]
        if len(o) != len(ol) or len(t) != len(tl):
            raise DataError(f"stay {sid!r}: {len(o)} predicted windows but {len(ol)} labeled")
        fs = by_fold.setdefault(int(row.get("fold", 0)), FoldScores([], [], [], [], [], None))
        fs.stay_ids.append(sid)
        fs.outcome_probs.append(o)
        fs.transition_probs.append(t)
        fs.outcome_labels.append(ol)
        fs.transition_labels.append(tl)
        if groups is not None:
            fs.groups = (fs.groups or []) + [groups.get(sid, "missing")]
    if not by_fold:
        raise DataError(f"{pred_path}: no predictions")
    return [by_fold[k] for k in sorted(by_fold)]


def cmd_eval(args) -> None:
    from .train_eval.training import _group_value

    if any(h < 0 for h in args.lead):
        raise UsageError("--lead horizons must be >= 0")
    if args.checkpoints is not None:
        if args.pred is not None or args.labels is not None:
            raise UsageError("use either --checkpoints with --cohort or --pred with --labels")
        ckdir = _require_file(args.checkpoints, "--checkpoints")
        stays = _load_cohort(args.cohort) if args.cohort else None
        if stays is None:
            raise UsageError("--checkpoints needs --cohort")
        dirs = sorted(d for d in ckdir.iterdir() if (d / "manifest.json").exists())
        if not dirs:
            raise DataError(f"{ckdir}: no checkpoints found")
        ckpts = [load_checkpoint(d) for d in dirs]
        report = evaluate_checkpoints(ckpts, stays, args.group_by, args.lead)
        report.meta = {"name": args.name, "source": "checkpoints", "n_checkpoints": len(ckpts)}
    else:
        if args.pred is None or args.labels is None:
            raise UsageError("eval needs --pred and --labels, or --checkpoints and --cohort")
        groups = None
        if args.group_by:
            if args.cohort is None:
                raise UsageError("--group-by with --pred needs --cohort for the statics")
            groups = {s.stay_id: _group_value(s.statics.get(args.group_by)) for s in _load_cohort(args.cohort)}
        report = evaluate(_fold_scores_from_files(args.pred, args.labels, groups), args.lead)
        report.meta = {"name": args.name, "source": "predictions"}
    report.meta["lead_horizons"] = list(args.lead)
    report.meta["group_by"] = args.group_by
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "metrics.json").write_text(report.to_json() + "\n")
    (args.out / "metrics.csv").write_text(report.table_csv(args.lead[0] if args.lead else None))
    (args.out / "fp_offsets.csv").write_text(report.histogram_csv())
    for head, m, names in (("outcome", report.confusion_outcome, OUTCOME_NAMES),
                           ("transition", report.confusion_transition, TRANSITION_NAMES)):
        lines = ["true\\pred," + ",".join(names)]
        lines += [f"{n}," + ",".join(str(int(x)) for x in row) for n, row in zip(names, m)]
        (args.out / f"confusion_{head}.csv").write_text("\n".join(lines) + "\n")


def _intervals(block: dict) -> dict:
    return {head: {c: Interval95(v["mean"], v["ci_low"], v["ci_high"], v.get("folds", []))
                   for c, v in block[head].items()} for head in ("outcome", "transition")}


def cmd_report(args) -> None:
    entries = []
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep or not name:
            raise UsageError(f"--metrics expects NAME=PATH, got {item!r}")
        try:
            entries.append((name, json.loads(_require_file(Path(path), "--metrics").read_text())))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON: {exc}") from None
    args.out.mkdir(parents=True, exist_ok=True)
    raw = [(name, _intervals(m)) for name, m in entries]
    # outcome and transition AUROC side by side, one column per model or cohort pair
    (args.out / "table_auroc.csv").write_text(metrics_table_csv(raw))
    cross = [(name, block) for (name, m), (_, block) in zip(entries, raw)
             if m.get("meta", {}).get("source") == "checkpoints"]
    (args.out / "table_external.csv").write_text(metrics_table_csv(cross) if cross else "")
    lead = []
    key = str(args.lead)
    for name, m in entries:
        if key in m.get("lead", {}):
            lead.append((f"{name}:raw", _intervals(m)))
            lead.append((f"{name}:lead_{args.lead}", _intervals(m["lead"][key])))
    (args.out / "table_lead.csv").write_text(metrics_table_csv(lead) if lead else "")


COMMANDS = {"gen": cmd_gen, "prep": cmd_prep, "label": cmd_label, "train": cmd_train,
            "eval": cmd_eval, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config(args, parser)
        threads = _threads(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=threads):
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, CohortError, RecordError, CheckpointError, SplitError, PredictionError,
            TrainingDiverged, FileNotFoundError, ValueError) as exc:
        print(f"abd: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
