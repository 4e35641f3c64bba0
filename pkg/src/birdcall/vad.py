"""Foreground activity detection with a running-mean adaptive threshold.

Each frame of the squared signal yields a primary threshold from its
minimum and peak-to-peak value; the adaptive threshold for frame *i* is
the running mean of the first *i* primary thresholds. A frame is silent
when its mean squared amplitude falls strictly below the adaptive
threshold, or when its raw peak amplitude sits under an absolute floor
(digital silence would otherwise count as active, because a mean of zero
is not strictly below a threshold of zero).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import FrameConfig, MonoSignal, frame_signal


@dataclass(frozen=True)
class VadConfig:
    global_threshold: float = 0.6
    window_ms: float = 50.0
    hop_ms: float = 25.0
    silence_floor: float = 1e-4
    initial_adaptive_threshold: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.global_threshold <= 1.0:
            raise ValueError(f"global_threshold must be in [0, 1], got {self.global_threshold}")
        if self.silence_floor < 0.0:
            raise ValueError("silence_floor must be non-negative")

    @property
    def frame_config(self) -> FrameConfig:
        return FrameConfig(window_ms=self.window_ms, hop_ms=self.hop_ms)


@dataclass(frozen=True)
class ActivityMask:
    """Per-frame activity flags plus the frame geometry they refer to."""

    active: np.ndarray
    window_len: int
    hop_len: int

    @property
    def n_frames(self) -> int:
        return self.active.size


def square_frame(frame: np.ndarray) -> np.ndarray:
    """Square a frame element-wise, folding it onto one side of the axis."""
    frame = np.asarray(frame, dtype=np.float64)
    return frame * frame


def primary_threshold(squared_frame: np.ndarray, global_threshold: float) -> float:
    """Threshold of one already-squared frame: min + peak-to-peak * T."""
    squared_frame = np.asarray(squared_frame, dtype=np.float64)
    if squared_frame.size == 0:
        raise ValueError("cannot threshold an empty frame")
    lo = float(squared_frame.min())
    peak_to_peak = float(squared_frame.max()) - lo
    return lo + peak_to_peak * global_threshold


def adaptive_threshold_step(i: int, prev: float, primary: float) -> float:
    """Fold frame *i*'s primary threshold into the running mean (i >= 1)."""
    if i < 1:
        raise ValueError(f"frame index must be >= 1, got {i}")
    return ((i - 1) * prev + primary) / i


def detect_active_frames(signal: MonoSignal, cfg: VadConfig = VadConfig()) -> ActivityMask:
    """Classify every frame of a signal as active or silent.

    A frame is silent iff its mean squared amplitude is strictly below
    the adaptive threshold for that frame, or its raw peak amplitude is
    below ``cfg.silence_floor``. Deterministic in (signal, cfg).
    """
    series = frame_signal(signal, cfg.frame_config)
    squared = series.frames * series.frames
    mean_sq = squared.mean(axis=1)
    lo = squared.min(axis=1)
    primary = lo + (squared.max(axis=1) - lo) * cfg.global_threshold

    # The recursion ((i-1)*prev + primary_i)/i from any starting value is
    # the running mean of the primaries; the initial value has weight 0.
    counts = np.arange(1, primary.size + 1, dtype=np.float64)
    adaptive = np.cumsum(primary) / counts

    below_floor = np.abs(series.frames).max(axis=1) < cfg.silence_floor
    silent = (mean_sq < adaptive) | below_floor
    return ActivityMask(
        active=~silent, window_len=series.window_len, hop_len=series.hop_len
    )


def extract_active_signal(signal: MonoSignal, mask: ActivityMask) -> MonoSignal:
    """Concatenate the samples covered by active frames, in time order.

    Overlapping active frames are merged by sample-range union, so every
    sample is emitted at most once. With no active frames the result is
    an explicit empty signal, not an error.
    """
    n = len(signal)
    expected = (n - mask.window_len) // mask.hop_len + 1 if n >= mask.window_len else 0
    if expected != mask.n_frames:
        raise ValueError(
            f"mask covers {mask.n_frames} frames but the signal yields {expected}"
        )

    pieces = []
    run_start = None
    run_end = None
    for i in np.flatnonzero(mask.active):
        start = int(i) * mask.hop_len
        end = start + mask.window_len
        if run_start is None:
            run_start, run_end = start, end
        elif start <= run_end:
            run_end = max(run_end, end)
        else:
            pieces.append(signal.samples[run_start:run_end])
            run_start, run_end = start, end
    if run_start is not None:
        pieces.append(signal.samples[run_start:run_end])

    if not pieces:
        return MonoSignal(np.empty(0, dtype=np.float64), signal.sample_rate)
    return MonoSignal(np.concatenate(pieces), signal.sample_rate)
