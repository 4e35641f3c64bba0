"""Shared helpers: a minimal WAV writer and toy-signal builders."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import pytest

from birdcall.audio_io import MonoSignal


def wav_bytes(channels, sample_rate: int, bit_depth: int) -> bytes:
    """Encode 1-2 equal-length channels as a minimal RIFF/WAVE file.

    Integer depths take signed values (8-bit in [-128, 127]; the file
    stores them offset by +128, matching what the decoder hands back).
    32-bit writes IEEE float.
    """
    n_channels = len(channels)
    assert n_channels in (1, 2)
    interleaved = np.stack([np.asarray(c) for c in channels], axis=1)

    if bit_depth == 8:
        payload = (interleaved.astype(np.int16) + 128).astype(np.uint8).tobytes()
        format_tag = 1
    elif bit_depth == 16:
        payload = interleaved.astype("<i2").tobytes()
        format_tag = 1
    elif bit_depth == 24:
        v = interleaved.astype(np.int64) & 0xFFFFFF
        raw = np.empty((*v.shape, 3), dtype=np.uint8)
        raw[..., 0] = v & 0xFF
        raw[..., 1] = (v >> 8) & 0xFF
        raw[..., 2] = (v >> 16) & 0xFF
        payload = raw.tobytes()
        format_tag = 1
    elif bit_depth == 32:
        payload = interleaved.astype("<f4").tobytes()
        format_tag = 3
    else:
        raise ValueError(f"unsupported test bit depth {bit_depth}")

    block_align = n_channels * bit_depth // 8
    fmt_body = struct.pack(
        "<HHIIHH",
        format_tag,
        n_channels,
        sample_rate,
        sample_rate * block_align,
        block_align,
        bit_depth,
    )
    riff_size = 4 + (8 + len(fmt_body)) + (8 + len(payload))
    return (
        b"RIFF"
        + struct.pack("<I", riff_size)
        + b"WAVE"
        + b"fmt "
        + struct.pack("<I", len(fmt_body))
        + fmt_body
        + b"data"
        + struct.pack("<I", len(payload))
        + payload
    )


def write_wav(path, channels, sample_rate: int, bit_depth: int) -> Path:
    path = Path(path)
    path.write_bytes(wav_bytes(channels, sample_rate, bit_depth))
    return path


def tone_signal(
    rng: np.random.Generator,
    tone_hz: float,
    sample_rate: int = 16000,
    quiet_seconds: float = 0.25,
    tone_seconds: float = 1.5,
    amplitude: float = 0.4,
    noise: float = 0.02,
) -> MonoSignal:
    """Quiet lead-in, noisy tone, quiet tail; zero-mean and clipped."""
    n_quiet = int(quiet_seconds * sample_rate)
    n_tone = int(tone_seconds * sample_rate)
    quiet = rng.normal(0.0, 0.004, n_quiet)
    t = np.arange(n_tone) / sample_rate
    body = amplitude * np.sin(2 * np.pi * tone_hz * t) + rng.normal(0.0, noise, n_tone)
    x = np.concatenate([quiet, body, rng.normal(0.0, 0.004, n_quiet)])
    x -= x.mean()
    return MonoSignal(np.clip(x, -1.0, 1.0), sample_rate)


def tone_wav_int16(
    rng: np.random.Generator,
    tone_hz: float,
    sample_rate: int = 8000,
    seconds: float = 0.6,
    amplitude: float = 0.4,
    noise: float = 0.02,
) -> np.ndarray:
    """Signed 16-bit samples of a short noisy tone with a quiet lead-in."""
    n_quiet = int(0.15 * sample_rate)
    n = int(seconds * sample_rate)
    t = np.arange(n) / sample_rate
    body = amplitude * np.sin(2 * np.pi * tone_hz * t) + rng.normal(0.0, noise, n)
    x = np.concatenate([rng.normal(0.0, 0.004, n_quiet), body])
    return np.clip(x * 32767, -32768, 32767).astype(np.int64)


@pytest.fixture
def tiny_dataset(tmp_path):
    """Two-class wav dataset on disk: 3 files per class, 8 kHz, 16-bit."""
    rng = np.random.default_rng(911)
    root = tmp_path / "dataset"
    for name, hz in (("low_owl", 500.0), ("high_wren", 2500.0)):
        class_dir = root / name
        class_dir.mkdir(parents=True)
        for i in range(3):
            write_wav(
                class_dir / f"rec{i}.wav",
                [tone_wav_int16(rng, hz)],
                sample_rate=8000,
                bit_depth=16,
            )
    return root
