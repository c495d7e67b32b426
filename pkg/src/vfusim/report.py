"""Figure rendering for run and sweep outputs (PNG files next to the CSVs)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def render_run(record, state, path: str) -> None:
    """Loss and gradient-residual traces for a single run."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(state.loss_trace, lw=1.2)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("training loss")
    axes[0].set_title(f"{record.run_id} ({record.mode})")
    if state.residual_trace:
        axes[1].semilogy(range(1, len(state.residual_trace) + 1),
                         state.residual_trace, lw=1.2, color="tab:red")
        axes[1].set_ylabel("gradient residual")
    else:
        axes[1].text(0.5, 0.5, "no residual trace", ha="center", va="center",
                     transform=axes[1].transAxes)
    axes[1].set_xlabel("round")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_sweep(records, axis: str, path: str) -> None:
    """Accuracy / AUC / epochs / communication against the sweep axis."""
    xs = [r.axis_value for r in records]
    panels = [
        ("accuracy", [r.accuracy for r in records]),
        ("auc", [r.auc for r in records]),
        ("epochs", [r.epochs_used for r in records]),
        ("scalars / epoch", [r.scalars_per_epoch for r in records]),
    ]
    fig, axes = plt.subplots(2, 2, figsize=(8, 6))
    for ax, (label, ys) in zip(axes.ravel(), panels):
        ax.plot(xs, ys, marker="o", lw=1.2)
        ax.set_xlabel(axis)
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
