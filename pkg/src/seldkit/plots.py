"""Figure rendering for training runs and the loss-comparison experiment.

Everything draws through the Agg backend and writes files (SVG by default);
nothing ever opens a window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_CONFIG_STYLE = {
    "mse": {"color": "tab:blue", "label": "MSE (both branches)"},
    "ce1_mse1": {"color": "tab:orange", "label": "CE (1) + MSE (1)"},
    "ce1_mse1000": {"color": "tab:red", "label": "CE (1) + MSE (1000)"},
}


def plot_training_curves(loss_rows, val_rows, path):
    """Loss terms per epoch, plus validation SELD when available."""
    ncols = 2 if val_rows else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5.5 * ncols, 3.6))
    ax = axes[0] if val_rows else axes
    epochs = [r["epoch"] for r in loss_rows]
    ax.plot(epochs, [r["total"] for r in loss_rows], label="total", lw=1.2)
    ax.plot(epochs, [r["sed_term"] for r in loss_rows], label="detection term", lw=1.0)
    ax.plot(epochs, [r["doa_term"] for r in loss_rows], label="localization term", lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    if val_rows:
        ax2 = axes[1]
        ax2.plot([r["epoch"] for r in val_rows], [r["seld"] for r in val_rows],
                 color="tab:green", lw=1.2)
        ax2.set_xlabel("epoch")
        ax2.set_ylabel("validation SELD score")
        ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_comparison(diag_by_config, path, title=None):
    """Four panels (MSE loss, CE loss, DOA error, SED error), train and test
    curves for every loss configuration."""
    panels = [("mse_loss", "MSE loss"), ("ce_loss", "CE loss"),
              ("doa_err", "DOA error (deg)"), ("sed_err", "SED error rate")]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    for ax, (key, label) in zip(axes.ravel(), panels):
        for config, rows in diag_by_config.items():
            style = _CONFIG_STYLE.get(config, {"color": None, "label": config})
            epochs = [r["epoch"] for r in rows]
            ax.plot(epochs, [r[f"train_{key}"] for r in rows], color=style["color"],
                    lw=1.1, label=f"{style['label']} (train)")
            ax.plot(epochs, [r[f"test_{key}"] for r in rows], color=style["color"],
                    lw=1.1, ls="--", label=f"{style['label']} (test)")
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        if key.endswith("loss"):
            ax.set_yscale("log")
        ax.grid(alpha=0.3)
    axes[0, 0].legend(fontsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metric_report(report, path, title=None):
    """Bar summary of one evaluation: the four components plus the combined score."""
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    names = ["ER$_{20}$", "1-F$_{20}$", "LE/180", "1-LR", "SELD"]
    values = [report.er20, 1.0 - report.f20, report.le_cd / 180.0,
              1.0 - report.lr_cd, report.seld]
    bars = ax.bar(names, values, color=["#4878d0"] * 4 + ["#d65f5f"])
    for bar, v in zip(bars, values):
        ax.text(bar.get_x() + bar.get_width() / 2, v + 0.01, f"{v:.3f}",
                ha="center", fontsize=8)
    ax.set_ylabel("error component")
    ax.set_ylim(0, max(1.05, max(values) * 1.15))
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
