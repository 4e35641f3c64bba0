"""WAV decoding, mono conversion, and first-stage framing.

Recordings enter the pipeline as RIFF/WAVE files (PCM 8/16/24-bit or
32-bit float, mono or stereo). Everything downstream consumes a
:class:`MonoSignal`: a zero-mean, unit-bounded float sequence at the
file's native rate. No resampling is performed; window sizes are
specified in milliseconds so mixed-rate datasets behave consistently.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

_FORMAT_PCM = 0x0001
_FORMAT_IEEE_FLOAT = 0x0003


class WavFormatError(ValueError):
    """The bytes are not a well-formed RIFF/WAVE container."""


class UnsupportedCodecError(WavFormatError):
    """The WAVE encoding is not plain PCM or IEEE float."""


class EmptySignalError(ValueError):
    """An operation received a zero-length signal."""


class ShortSignalError(ValueError):
    """The signal is too short to produce a single frame."""

    def __init__(self, length: int, required: int):
        super().__init__(
            f"signal has {length} samples but at least {required} are required"
        )
        self.length = length
        self.required = required


@dataclass(frozen=True)
class MonoSignal:
    """Single-channel amplitude sequence in [-1, 1] at a fixed rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if samples.size and np.abs(samples).max() > 1.0:
            raise ValueError("samples exceed the [-1, 1] amplitude bound")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameConfig:
    """Short-term analysis geometry in milliseconds."""

    window_ms: float = 50.0
    hop_ms: float = 25.0

    def __post_init__(self):
        if not 0 < self.hop_ms <= self.window_ms:
            raise ValueError(
                f"need 0 < hop_ms <= window_ms, got hop={self.hop_ms} window={self.window_ms}"
            )


@dataclass(frozen=True)
class FrameSeries:
    """Fixed-length windows at a fixed stride over a source signal.

    ``frames[i]`` starts at sample ``i * hop_len`` of the source; frames
    are read-only views, never copies.
    """

    frames: np.ndarray
    window_len: int
    hop_len: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def ms_to_samples(ms: float, sample_rate: int) -> int:
    """Convert a duration to samples, rounding half up (25 ms @ 44100 -> 1103)."""
    return int(math.floor(ms * sample_rate / 1000.0 + 0.5))


def decode_wav(data: bytes) -> tuple[list[np.ndarray], int, int]:
    """Decode a RIFF/WAVE byte string into raw per-channel samples.

    Returns ``(channels, sample_rate, bit_depth)``. Integer PCM comes back
    as integer arrays at full length (8-bit is re-centred to signed),
    float data as float32; no scaling or resampling happens here.

    Raises:
        WavFormatError: malformed or truncated container.
        UnsupportedCodecError: compressed or otherwise unsupported encoding;
            the message names the format tag.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE container")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"chunk {chunk_id!r} is truncated")
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk smaller than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        # chunks are word-aligned; odd sizes carry a pad byte
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")

    format_tag, n_channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if sample_rate <= 0:
        raise WavFormatError(f"invalid sample rate {sample_rate}")
    if n_channels not in (1, 2):
        raise WavFormatError(f"{n_channels} channels; only mono and stereo supported")

    if format_tag == _FORMAT_PCM and bits in (8, 16, 24):
        pass
    elif format_tag == _FORMAT_IEEE_FLOAT and bits == 32:
        pass
    else:
        raise UnsupportedCodecError(
            f"unsupported codec tag 0x{format_tag:04X} ({bits}-bit); "
            "expected PCM 8/16/24-bit or IEEE float 32-bit"
        )

    frame_bytes = n_channels * bits // 8
    if len(payload) % frame_bytes:
        raise WavFormatError("data chunk does not hold a whole number of sample frames")
    n_frames = len(payload) // frame_bytes

    if bits == 8:
        # WAV stores 8-bit as unsigned with a 128 offset
        flat = np.frombuffer(payload, dtype=np.uint8).astype(np.int16) - 128
    elif bits == 16:
        flat = np.frombuffer(payload, dtype="<i2").astype(np.int32)
    elif bits == 24:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        flat = raw[:, 0] | (raw[:, 1] << 8) | (raw[:, 2] << 16)
        flat = (flat ^ 0x800000) - 0x800000  # sign extend
    else:
        flat = np.frombuffer(payload, dtype="<f4")

    interleaved = flat.reshape(n_frames, n_channels)
    channels = [np.ascontiguousarray(interleaved[:, c]) for c in range(n_channels)]
    return channels, int(sample_rate), int(bits)


def to_mono_normalized(
    channels: list[np.ndarray], bit_depth: int, sample_rate: int
) -> MonoSignal:
    """Downmix, scale to [-1, 1], and remove the DC offset.

    Stereo is averaged sample-wise; integer PCM is scaled by
    ``1 / 2**(bit_depth - 1)``; the per-record mean is subtracted so a
    constant offset cannot leak into the energy-based silence detector.
    """
    if not channels or len(channels[0]) == 0:
        raise EmptySignalError("no samples to convert")
    lengths = {len(c) for c in channels}
    if len(lengths) != 1:
        raise ValueError(f"channels have unequal lengths {sorted(lengths)}")

    mixed = np.mean(np.stack(channels, axis=0), axis=0, dtype=np.float64)
    if np.issubdtype(channels[0].dtype, np.integer):
        mixed /= 2.0 ** (bit_depth - 1)
    mixed -= mixed.mean()
    np.clip(mixed, -1.0, 1.0, out=mixed)
    return MonoSignal(mixed, sample_rate)


def read_mono(path) -> MonoSignal:
    """Decode a WAV file from disk into a normalized mono signal."""
    with open(path, "rb") as fh:
        data = fh.read()
    channels, sample_rate, bits = decode_wav(data)
    return to_mono_normalized(channels, bits, sample_rate)


def frame_signal(signal: MonoSignal, cfg: FrameConfig = FrameConfig()) -> FrameSeries:
    """Slice a signal into overlapping fixed-length frames.

    Produces ``floor((L - window_len) / hop_len) + 1`` frames; trailing
    samples that cannot fill a whole window are dropped.
    """
    window_len = ms_to_samples(cfg.window_ms, signal.sample_rate)
    hop_len = ms_to_samples(cfg.hop_ms, signal.sample_rate)
    if window_len < 1 or hop_len < 1:
        raise ValueError("window and hop must map to at least one sample")
    n = len(signal)
    if n < window_len:
        raise ShortSignalError(n, window_len)
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, window_len)
    frames = frames[::hop_len]
    return FrameSeries(
        frames=frames,
        window_len=window_len,
        hop_len=hop_len,
        sample_rate=signal.sample_rate,
    )
