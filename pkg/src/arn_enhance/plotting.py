"""Figures for evaluation reports and training logs, rendered straight to files."""

from __future__ import annotations

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .metrics import MetricsReport


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def plot_stoi_by_snr(report: MetricsReport, path) -> None:
    """Mean STOI per SNR bin: processed, and mixture when the report has it."""
    bins = report.bins()
    labels = [f"{b:g}" if isinstance(b, (int, float)) else str(b) for b in bins]
    xs = list(range(len(bins)))
    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot()
    proc = report.aggregate("stoi")
    ax.plot(xs, [proc[b] for b in bins], "o-", label="enhanced")
    if report.has_mixture:
        mix = report.aggregate("stoi_mixture")
        ax.plot(xs, [mix[b] for b in bins], "s--", label="mixture")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels)
    ax.set_xlabel("SNR bin (dB)")
    ax.set_ylabel("STOI")
    ax.grid(alpha=0.3)
    ax.legend()
    _save(fig, path)


def plot_training_curves(records, path) -> None:
    """Training loss and validation PCM on the left axis, validation STOI on the right."""
    epochs = [r.epoch for r in records]
    fig = Figure(figsize=(7, 4))
    ax = fig.add_subplot()
    ax.plot(epochs, [r.train_loss for r in records], "-", label="train PCM")
    ax.plot(epochs, [r.val_pcm for r in records], "o-", label="valid PCM")
    ax.set_xlabel("epoch")
    ax.set_ylabel("PCM loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r.val_stoi for r in records], "s-", color="tab:green", label="valid STOI")
    ax2.set_ylabel("STOI")
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right")
    ax.grid(alpha=0.3)
    _save(fig, path)
