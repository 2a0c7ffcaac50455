"""Generate a small cohort, train a few folds of the MAMBA model and print the AUROC table.

Run with ``python demos/quickstart.py``; it takes a few minutes on one core.
"""

import warnings

from abd.events import filter_inclusion
from abd.model import ModelConfig
from abd.phenotype import AbdState
from abd.synthgen import default_generator_config, sample_cohort, to_records
from abd.train_eval import TrainConfig, evaluate_checkpoints, make_splits, train_model
from abd.train_eval.splits import stays_of
from abd.transitions import estimate_markov


def main():
    cfg = default_generator_config("base", seed=7, n_patients=200)
    records, truth = sample_cohort(cfg)
    stays = filter_inclusion(to_records(records))
    print(f"{len(stays)} stays after inclusion filtering")

    # latent paths recover the generator's chain
    markov = estimate_markov([[AbdState(s) for s in t["latent"]] for t in truth])
    print("estimated Normal row:", markov.probs[0].round(3), "generator:", cfg.transition[0])

    plan = make_splits([s.patient_id for s in stays], seed=0)
    results = train_model(stays, plan, TrainConfig(epochs=4, seed=0), ModelConfig(d_model=32, d_state=8),
                          folds=[0, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = evaluate_checkpoints([r.checkpoint for r in results], stays_of(stays, plan.test))
    print(report.table_csv(4))
    print(f"mean transition AUROC {report.mean_transition_auroc():.3f}")


if __name__ == "__main__":
    main()
