"""Report figures. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes reproducible
_PNG_META = {"Software": None}


def plot_energy(report, path) -> None:
    """Per-block SNN vs CNN energy bars on a log axis."""
    rows = [r for r in report.rows if r.kind == "block"]
    names = [r.block for r in rows]
    xs = range(len(rows))
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.bar([x - 0.2 for x in xs], [r.e_cnn_uj for r in rows], 0.4, label="CNN (MAC)")
    ax.bar([x + 0.2 for x in xs], [r.e_snn_uj for r in rows], 0.4, label="SNN (AC)")
    ax.set_xticks(list(xs), names, rotation=45, ha="right")
    ax.set_yscale("log")
    ax.set_ylabel("energy per frame [µJ]")
    ax.set_title(f"Synaptic energy, total ratio {report.total.ratio:.2f}x")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_firing_rate(epoch_log, path, initial_rate=None) -> None:
    epochs = [r["epoch"] + 1 for r in epoch_log]
    rates = [r["mean_firing_rate"] for r in epoch_log]
    if initial_rate is not None:
        epochs, rates = [0] + epochs, [initial_rate] + rates
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, rates, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean firing rate (MAC-weighted)")
    ax.set_ylim(bottom=0)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
