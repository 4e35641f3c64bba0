"""Figure rendering for the pipeline's delimited outputs.

Every report the CLI writes as CSV gets a companion PNG: the activity
mask next to the waveform, learning rate and loss curves next to the
epoch log, and per-class metric panels next to the metrics table.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .audio_io import MonoSignal
from .evaluation import MetricsReport
from .network import EpochStats
from .vad import ActivityMask, VadConfig, detect_active_frames


def write_text_atomic(path, text: str) -> None:
    """Write via a temp name and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_figure_atomic(fig, path) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.stem, suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fig.savefig(fh, format=path.suffix.lstrip("."), dpi=120)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    finally:
        plt.close(fig)


def vad_mask_csv(mask: ActivityMask) -> str:
    """Per-frame activity as ``frame_index,active`` rows."""
    lines = ["frame_index,active"]
    for i, flag in enumerate(mask.active):
        lines.append(f"{i},{int(flag)}")
    return "\n".join(lines) + "\n"


def save_vad_figure(
    signal: MonoSignal, mask: ActivityMask, path, cfg: VadConfig | None = None
) -> None:
    """Waveform with silent spans shaded, plus the threshold trace."""
    times = np.arange(len(signal)) / signal.sample_rate
    fig, (ax_wave, ax_thr) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)

    ax_wave.plot(times, signal.samples, linewidth=0.4, color="tab:blue")
    for i, active in enumerate(mask.active):
        if not active:
            start = i * mask.hop_len / signal.sample_rate
            end = (i * mask.hop_len + mask.window_len) / signal.sample_rate
            ax_wave.axvspan(start, end, color="lightgray", alpha=0.5, linewidth=0)
    ax_wave.set_ylabel("amplitude")
    ax_wave.set_title("waveform (silent frames shaded)")

    if cfg is None:
        cfg = VadConfig()
    # recompute the traces the mask was derived from
    from .audio_io import frame_signal

    series = frame_signal(signal, cfg.frame_config)
    squared = series.frames * series.frames
    mean_sq = squared.mean(axis=1)
    lo = squared.min(axis=1)
    primary = lo + (squared.max(axis=1) - lo) * cfg.global_threshold
    adaptive = np.cumsum(primary) / np.arange(1, primary.size + 1)
    frame_times = np.arange(series.n_frames) * series.hop_len / signal.sample_rate
    ax_thr.plot(frame_times, mean_sq, label="frame mean (squared)", color="tab:blue")
    ax_thr.plot(frame_times, adaptive, label="adaptive threshold", color="tab:red")
    ax_thr.set_xlabel("time [s]")
    ax_thr.set_ylabel("energy")
    ax_thr.legend(loc="upper right", fontsize=8)

    fig.tight_layout()
    _save_figure_atomic(fig, path)


def save_training_figure(log: Sequence[EpochStats], path) -> None:
    """Learning-rate schedule, loss, and training accuracy over epochs."""
    epochs = [s.epoch for s in log]
    fig, (ax_lr, ax_loss) = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    ax_lr.plot(epochs, [s.lr for s in log], color="tab:green")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_yscale("log")

    ax_loss.plot(epochs, [s.loss for s in log], color="tab:blue", label="loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss", color="tab:blue")
    ax_acc = ax_loss.twinx()
    ax_acc.plot(epochs, [s.accuracy for s in log], color="tab:orange", label="accuracy")
    ax_acc.set_ylabel("train accuracy", color="tab:orange")
    ax_acc.set_ylim(0.0, 1.05)

    fig.tight_layout()
    _save_figure_atomic(fig, path)


_PANEL_FIELDS = (
    ("accuracy", "Accuracy"),
    ("fnr", "FNR"),
    ("f1", "F1"),
    ("precision", "Precision"),
    ("specificity", "Specificity"),
    ("auc", "AUC"),
)


def save_metrics_figure(report: MetricsReport, path) -> None:
    """Six per-class bar panels: accuracy, FNR, F1, precision, specificity, AUC."""
    labels = [row.label for row in report.per_class]
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    for ax, (attr, title) in zip(axes.ravel(), _PANEL_FIELDS):
        values = [getattr(row, attr) for row in report.per_class]
        ax.bar(range(len(labels)), values, color="tab:blue")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
        ax.set_ylim(0.0, 1.05)
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    _save_figure_atomic(fig, path)


def preview_vad(signal: MonoSignal, cfg: VadConfig, csv_path, figure_path) -> ActivityMask:
    """Compute the mask once, then write both the CSV and the figure."""
    mask = detect_active_frames(signal, cfg)
    write_text_atomic(csv_path, vad_mask_csv(mask))
    save_vad_figure(signal, mask, figure_path, cfg)
    return mask
