"""The loss-combination comparison experiment.

Trains the same model on the same data under three loss configurations --
homogeneous MSE, CE(1)+MSE(1), CE(1)+MSE(1000) -- with identical seeds, and
records per-epoch frame-level diagnostics (both loss values, detection error
rate, DOA angular error) on the train and test splits. Emits one wide CSV,
per-seed four-panel figures, and a final-epoch summary CSV.
"""

import csv
from dataclasses import replace
from pathlib import Path

from .losses import CE_PLUS_MSE, MSE_ONLY, LossConfig
from .training import TrainConfig, train

DEFAULT_CONFIGS = (
    ("mse", LossConfig(kind=MSE_ONLY)),
    ("ce1_mse1", LossConfig(kind=CE_PLUS_MSE, w_ce=1.0, w_mse=1.0)),
    ("ce1_mse1000", LossConfig(kind=CE_PLUS_MSE, w_ce=1.0, w_mse=1000.0)),
)

DIAG_KEYS = ("mse_loss", "ce_loss", "doa_err", "sed_err")


def comparison_columns():
    cols = ["config", "seed", "epoch"]
    for split in ("train", "test"):
        for key in DIAG_KEYS:
            cols.append(f"{split}_{key}")
    return cols


def compare_losses(train_clips, test_clips, model_cfg, base_cfg: TrainConfig,
                   out_dir, seeds=(1, 2, 3), configs=DEFAULT_CONFIGS, log=None,
                   figures=True):
    """Run the three-way comparison; returns {(config, seed): diag row list}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = {}
    for seed in seeds:
        for name, loss_cfg in configs:
            cfg = replace(base_cfg, seed=seed, loss=loss_cfg)
            if log:
                log(f"--- config={name} seed={seed} "
                    f"({cfg.epochs} epochs, {len(train_clips)} train clips)")
            run_dir = out_dir / f"run_{name}_seed{seed}"
            result = train(train_clips, [], model_cfg, cfg, run_dir,
                           diagnostics={"train": train_clips, "test": test_clips},
                           log=log, figures=False)
            results[(name, seed)] = result.diag_rows

    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(comparison_columns())
        for (name, seed), rows in results.items():
            for row in rows:
                record = [name, seed, row["epoch"]]
                for split in ("train", "test"):
                    for key in DIAG_KEYS:
                        record.append(f"{row[f'{split}_{key}']:.10g}")
                writer.writerow(record)

    summary_rows = []
    for (name, seed), rows in results.items():
        final = rows[-1]
        summary_rows.append({"config": name, "seed": seed, **{
            f"{split}_{key}": final[f"{split}_{key}"]
            for split in ("train", "test") for key in DIAG_KEYS}})
    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=comparison_columns()[:2]
                                + comparison_columns()[3:])
        writer.writeheader()
        for row in summary_rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                             for k, v in row.items()})

    if figures:
        from .plots import plot_loss_comparison
        for seed in seeds:
            by_config = {name: results[(name, seed)] for name, _ in configs}
            plot_loss_comparison(by_config, out_dir / f"comparison_seed{seed}.svg",
                                 title=f"loss comparison, seed {seed}")
    return results


def mse_beats_weighted_ce(results, seeds=(1, 2, 3)):
    """Seed-majority outcome of the central comparison.

    Returns (wins, total, doa_ratios): wins counts seeds where the MSE-only
    run ends with lower train SED error than CE(1)+MSE(1000); doa_ratios are
    the per-seed final DOA-error ratios between the two configurations.
    """
    wins = 0
    ratios = []
    for seed in seeds:
        mse_final = results[("mse", seed)][-1]
        ce_final = results[("ce1_mse1000", seed)][-1]
        if mse_final["train_sed_err"] < ce_final["train_sed_err"]:
            wins += 1
        lo = min(mse_final["train_doa_err"], ce_final["train_doa_err"])
        hi = max(mse_final["train_doa_err"], ce_final["train_doa_err"])
        ratios.append(hi / max(lo, 1e-9))
    return wins, len(list(seeds)), ratios
