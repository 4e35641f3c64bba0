"""The 34 short-term acoustic features and the DSP kernels they need.

Time-domain features (zero-crossing rate, energy, entropy of energy) are
computed on the raw frame; everything spectral uses the magnitude
spectrum of the Hamming-windowed frame, zero-padded to the next power of
two. The canonical column order is fixed and shared by every cache file,
dataset, and model in the project:

    zcr, energy, energy_entropy,
    spectral_centroid, spectral_spread, spectral_entropy,
    spectral_flux, spectral_rolloff,
    mfcc_1 .. mfcc_13,
    chroma_A .. chroma_G#,
    chroma_deviation
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np
import scipy.fft

from .audio_io import FrameConfig, MonoSignal, frame_signal

logger = logging.getLogger(__name__)

CHROMA_CLASSES = ("A", "A#", "B", "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#")
MFCC_NAMES = tuple(f"mfcc_{i}" for i in range(1, 14))
CHROMA_NAMES = tuple(f"chroma_{c}" for c in CHROMA_CLASSES)
SPECTRAL_NAMES = (
    "spectral_centroid",
    "spectral_spread",
    "spectral_entropy",
    "spectral_flux",
    "spectral_rolloff",
)

ALL_FEATURE_NAMES: tuple[str, ...] = (
    ("zcr", "energy", "energy_entropy")
    + SPECTRAL_NAMES[:3]
    + SPECTRAL_NAMES[3:]
    + MFCC_NAMES
    + CHROMA_NAMES
    + ("chroma_deviation",)
)

# Filter centers: a linear ladder into a multiplicative one. With 13
# linear steps and 27 log filters this yields 42 centers and 40 filters.
_MEL_START_HZ = 133.33
_MEL_LINEAR_STEP_HZ = 66.67
_MEL_LOG_FACTOR = 1.0711703
_MEL_LINEAR_FILTERS = 13
_MEL_LOG_FILTERS = 27

_CHROMA_MIN_HZ = 27.5
_CHROMA_REF_HZ = 440.0  # pitch class 0 = 'A'

_LOG_ENERGY_FLOOR = 1e-10


@dataclass(frozen=True)
class Spectrum:
    """One-sided magnitude spectrum of a single frame.

    ``frame_len`` is the sample count of the frame before zero-padding;
    the periodogram in :func:`mfcc` normalizes by it.
    """

    magnitudes: np.ndarray
    freqs: np.ndarray
    frame_len: int

    @property
    def n_bins(self) -> int:
        return self.magnitudes.size


@dataclass(frozen=True)
class FeatureConfig:
    rolloff_threshold: float = 0.90
    flux_norm: float = 2.0
    energy_entropy_subframes: int = 10
    mel_filter_count: int = 40
    mfcc_kept: int = 13

    def __post_init__(self):
        if not 0.0 < self.rolloff_threshold < 1.0:
            raise ValueError("rolloff_threshold must be in (0, 1)")
        if self.flux_norm < 1.0:
            raise ValueError("flux_norm must be >= 1")
        if self.energy_entropy_subframes < 2:
            raise ValueError("energy_entropy_subframes must be >= 2")
        if self.mel_filter_count != _MEL_LINEAR_FILTERS + _MEL_LOG_FILTERS:
            raise ValueError(
                f"the filter ladder defines {_MEL_LINEAR_FILTERS} linear + "
                f"{_MEL_LOG_FILTERS} log filters; got {self.mel_filter_count}"
            )


@dataclass(frozen=True)
class FeatureSet:
    """A named selection of feature columns, in canonical order."""

    name: str
    members: tuple[str, ...]


_SET_MEMBERS = {
    "Set1": MFCC_NAMES,
    "Set2": CHROMA_NAMES,
    "Set3": MFCC_NAMES + CHROMA_NAMES,
    "Set4": SPECTRAL_NAMES,
    "Set5": ALL_FEATURE_NAMES,
}

FEATURE_SET_NAMES = tuple(_SET_MEMBERS)


def feature_set(name: str) -> FeatureSet:
    """Look up one of the five predefined feature sets (Set1..Set5)."""
    try:
        members = _SET_MEMBERS[name]
    except KeyError:
        raise ValueError(
            f"unknown feature set {name!r}; expected one of {FEATURE_SET_NAMES}"
        ) from None
    ordered = tuple(sorted(members, key=ALL_FEATURE_NAMES.index))
    return FeatureSet(name=name, members=ordered)


@dataclass(frozen=True)
class FeatureMatrix:
    """Frames x features values plus the geometry they were computed at.

    Geometry fields are 0 for matrices re-read from a cache file, which
    stores only the header and values.
    """

    values: np.ndarray
    feature_names: tuple[str, ...]
    window_len: int = 0
    hop_len: int = 0
    sample_rate: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length() if n > 1 else 1


def fft_magnitude(
    frame: np.ndarray, sample_rate: int, apply_hamming: bool = True
) -> Spectrum:
    """Magnitude spectrum of a frame, zero-padded to the next power of two.

    Returns the first ``n_fft / 2`` bins with their frequencies in Hz.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("cannot transform an empty frame")
    if apply_hamming:
        frame = frame * np.hamming(frame.size)
    n_fft = _next_pow2(frame.size)
    spectrum = np.fft.rfft(frame, n_fft)
    half = max(n_fft // 2, 1)
    magnitudes = np.abs(spectrum[:half])
    freqs = np.arange(half, dtype=np.float64) * (sample_rate / n_fft)
    return Spectrum(magnitudes=magnitudes, freqs=freqs, frame_len=frame.size)


def zcr(frame: np.ndarray) -> float:
    """Fraction of adjacent sample pairs whose product is negative."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size < 2:
        raise ValueError("zero-crossing rate needs at least 2 samples")
    crossings = np.count_nonzero(frame[1:] * frame[:-1] < 0)
    return crossings / (frame.size - 1)


def energy(frame: np.ndarray) -> float:
    """Mean of squared sample values."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("cannot compute energy of an empty frame")
    return float(np.mean(frame * frame))


def entropy_of_energy(frame: np.ndarray, n_subframes: int = 10) -> float:
    """Normalized entropy of the energy distribution over equal sub-frames.

    The frame is split into ``n_subframes`` pieces (remainder truncated);
    sub-frame energies are normalized to sum 1 and fed through a base-2
    entropy, scaled so a uniform distribution maps to 1. A frame with no
    energy (or too short to split) returns 0.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if n_subframes < 2:
        raise ValueError("need at least 2 sub-frames")
    sub_len = frame.size // n_subframes
    if sub_len == 0:
        return 0.0
    chunks = frame[: sub_len * n_subframes].reshape(n_subframes, sub_len)
    energies = np.sum(chunks * chunks, axis=1)
    total = energies.sum()
    if total <= 0.0:
        return 0.0
    p = energies / total
    nonzero = p > 0
    ent = -np.sum(p[nonzero] * np.log2(p[nonzero]))
    return float(ent / np.log2(n_subframes))


def spectral_centroid(spec: Spectrum) -> float:
    """Magnitude-weighted mean frequency in Hz; 0 for an all-zero spectrum."""
    total = spec.magnitudes.sum()
    if total <= 0.0:
        logger.debug("all-zero spectrum: centroid defaults to 0")
        return 0.0
    return float(np.dot(spec.freqs, spec.magnitudes) / total)


def spectral_spread(spec: Spectrum, centroid: float) -> float:
    """Magnitude-weighted standard deviation around the centroid, in Hz."""
    total = spec.magnitudes.sum()
    if total <= 0.0:
        logger.debug("all-zero spectrum: spread defaults to 0")
        return 0.0
    dev = spec.freqs - centroid
    return float(np.sqrt(np.dot(dev * dev, spec.magnitudes) / total))


def spectral_entropy(spec: Spectrum) -> float:
    """Normalized base-2 entropy of the spectral power distribution."""
    power = spec.magnitudes * spec.magnitudes
    total = power.sum()
    if total <= 0.0:
        return 0.0
    p = power / total
    nonzero = p > 0
    ent = -np.sum(p[nonzero] * np.log2(p[nonzero]))
    if spec.n_bins < 2:
        return 0.0
    return float(ent / np.log2(spec.n_bins))


def spectral_flux(spec: Spectrum, prev: Spectrum | None, norm: float = 2.0) -> float:
    """P-norm distance between sum-normalized consecutive spectra.

    The first frame of a record has no predecessor and yields 0.
    """
    if prev is None:
        return 0.0
    if spec.n_bins != prev.n_bins:
        raise ValueError(
            f"bin count mismatch: {spec.n_bins} vs {prev.n_bins}"
        )

    def normalized(s: np.ndarray) -> np.ndarray:
        total = s.sum()
        return s / total if total > 0.0 else np.zeros_like(s)

    diff = np.abs(normalized(spec.magnitudes) - normalized(prev.magnitudes))
    return float(np.sum(diff**norm) ** (1.0 / norm))


def spectral_rolloff(spec: Spectrum, threshold: float = 0.90) -> float:
    """Band fraction below which ``threshold`` of the magnitude sum lies."""
    cumulative = np.cumsum(spec.magnitudes)
    total = cumulative[-1] if cumulative.size else 0.0
    if total <= 0.0:
        return 0.0
    index = int(np.argmax(cumulative >= threshold * total))
    return (index + 1) / spec.n_bins


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular filters over FFT bins plus the center ladder behind them."""

    weights: np.ndarray
    center_freqs: np.ndarray

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


def build_mel_filterbank(sample_rate: int, n_fft: int) -> MelFilterbank:
    """Construct the 40-filter bank (13 linear + 27 log) for a bin grid.

    Centers start at 133.33 Hz, climb 13 linear steps of 66.67 Hz, then
    multiply by 1.0711703 per step; filter *i* is a triangle over centers
    (i, i+1, i+2) with height 2 / (f_{i+2} - f_i). Parts of a triangle
    above Nyquist simply have no bins and are clipped.
    """
    if n_fft & (n_fft - 1) or n_fft < 2:
        raise ValueError(f"n_fft must be a power of two, got {n_fft}")
    n_filters = _MEL_LINEAR_FILTERS + _MEL_LOG_FILTERS
    centers = np.empty(n_filters + 2, dtype=np.float64)
    linear_count = _MEL_LINEAR_FILTERS + 1
    centers[:linear_count] = _MEL_START_HZ + _MEL_LINEAR_STEP_HZ * np.arange(linear_count)
    centers[linear_count:] = centers[linear_count - 1] * _MEL_LOG_FACTOR ** np.arange(
        1, n_filters + 3 - linear_count
    )

    nyquist = sample_rate / 2.0
    if nyquist < centers[0]:
        raise ValueError(
            f"Nyquist {nyquist} Hz is below the first filter center {centers[0]} Hz"
        )

    half = n_fft // 2
    bin_freqs = np.arange(half, dtype=np.float64) * (sample_rate / n_fft)
    weights = np.zeros((n_filters, half), dtype=np.float64)
    for i in range(n_filters):
        lo, mid, hi = centers[i], centers[i + 1], centers[i + 2]
        height = 2.0 / (hi - lo)
        weights[i] = np.interp(bin_freqs, [lo, mid, hi], [0.0, height, 0.0], left=0.0, right=0.0)
    return MelFilterbank(weights=weights, center_freqs=centers)


def mfcc(spec: Spectrum, bank: MelFilterbank, kept: int = 13) -> np.ndarray:
    """Cepstral coefficients: periodogram -> filter energies -> log -> DCT.

    The periodogram divides the squared magnitudes by the pre-padding
    frame length; filter energies are floored before the log so silent
    bands stay finite; the DCT is the orthonormal DCT-II and only the
    first ``kept`` coefficients survive.
    """
    if bank.weights.shape[1] != spec.n_bins:
        raise ValueError(
            f"filterbank covers {bank.weights.shape[1]} bins, spectrum has {spec.n_bins}"
        )
    periodogram = spec.magnitudes * spec.magnitudes / spec.frame_len
    energies = bank.weights @ periodogram
    log_energies = np.log(np.maximum(energies, _LOG_ENERGY_FLOOR))
    coeffs = scipy.fft.dct(log_energies, type=2, norm="ortho")
    return coeffs[:kept]


def chroma_vector(spec: Spectrum) -> np.ndarray:
    """Fold spectral power onto the 12 pitch classes, A through G#.

    Each bin at or above 27.5 Hz lands in class
    ``round(12 * log2(f / 440)) mod 12``; per-class power is averaged
    over the bins mapping there, then the 12-vector is normalized to sum
    1 (all zeros for an all-zero spectrum).
    """
    valid = spec.freqs >= _CHROMA_MIN_HZ
    if not valid.any():
        return np.zeros(12, dtype=np.float64)
    classes = (
        np.round(12.0 * np.log2(spec.freqs[valid] / _CHROMA_REF_HZ)).astype(int) % 12
    )
    power = spec.magnitudes[valid] ** 2
    sums = np.bincount(classes, weights=power, minlength=12)
    counts = np.bincount(classes, minlength=12)
    means = sums / np.maximum(counts, 1)
    total = means.sum()
    if total <= 0.0:
        return np.zeros(12, dtype=np.float64)
    return means / total


def chroma_deviation(chroma: np.ndarray) -> float:
    """Population standard deviation of the 12 chroma values."""
    chroma = np.asarray(chroma, dtype=np.float64)
    if chroma.size != 12:
        raise ValueError(f"expected 12 chroma values, got {chroma.size}")
    return float(np.std(chroma))


def extract_features(
    signal: MonoSignal,
    frame_cfg: FrameConfig = FrameConfig(),
    feat_cfg: FeatureConfig = FeatureConfig(),
    fset: FeatureSet | None = None,
) -> FeatureMatrix:
    """Compute one row of features per frame for the selected set.

    Column order is the canonical order restricted to the set's members.
    Spectral features share one Hamming-windowed spectrum per frame;
    time-domain features see the raw frame. Spectral flux treats the
    first frame of the record as having zero flux.
    """
    if fset is None:
        fset = feature_set("Set5")
    series = frame_signal(signal, frame_cfg)
    members = fset.members

    need_mfcc = any(m in members for m in MFCC_NAMES)
    need_chroma = any(m in members for m in CHROMA_NAMES) or "chroma_deviation" in members
    need_spectrum = need_mfcc or need_chroma or any(m in SPECTRAL_NAMES for m in members)

    bank = None
    if need_mfcc:
        bank = build_mel_filterbank(signal.sample_rate, _next_pow2(series.window_len))

    rows = np.empty((series.n_frames, len(members)), dtype=np.float64)
    prev_spec: Spectrum | None = None
    for t in range(series.n_frames):
        frame = series.frames[t]
        values: dict[str, float] = {}

        if "zcr" in members:
            values["zcr"] = zcr(frame)
        if "energy" in members:
            values["energy"] = energy(frame)
        if "energy_entropy" in members:
            values["energy_entropy"] = entropy_of_energy(
                frame, feat_cfg.energy_entropy_subframes
            )

        if need_spectrum:
            spec = fft_magnitude(frame, signal.sample_rate, apply_hamming=True)
            if "spectral_centroid" in members or "spectral_spread" in members:
                centroid = spectral_centroid(spec)
                values["spectral_centroid"] = centroid
                values["spectral_spread"] = spectral_spread(spec, centroid)
            if "spectral_entropy" in members:
                values["spectral_entropy"] = spectral_entropy(spec)
            if "spectral_flux" in members:
                values["spectral_flux"] = spectral_flux(spec, prev_spec, feat_cfg.flux_norm)
            if "spectral_rolloff" in members:
                values["spectral_rolloff"] = spectral_rolloff(
                    spec, feat_cfg.rolloff_threshold
                )
            if need_mfcc:
                coeffs = mfcc(spec, bank, feat_cfg.mfcc_kept)
                for i, name in enumerate(MFCC_NAMES[: feat_cfg.mfcc_kept]):
                    values[name] = float(coeffs[i])
            if need_chroma:
                chroma = chroma_vector(spec)
                for i, name in enumerate(CHROMA_NAMES):
                    values[name] = float(chroma[i])
                if "chroma_deviation" in members:
                    values["chroma_deviation"] = chroma_deviation(chroma)
            prev_spec = spec

        rows[t] = [values[m] for m in members]

    if not np.isfinite(rows).all():
        raise ValueError("feature extraction produced non-finite values")
    return FeatureMatrix(
        values=rows,
        feature_names=members,
        window_len=series.window_len,
        hop_len=series.hop_len,
        sample_rate=signal.sample_rate,
    )


def feature_matrix_to_csv(names: tuple[str, ...], values: np.ndarray) -> str:
    """Render a feature matrix as CSV: header of names, 9 significant digits."""
    buf = io.StringIO()
    buf.write(",".join(names))
    buf.write("\n")
    for row in values:
        buf.write(",".join(f"{v:.9g}" for v in row))
        buf.write("\n")
    return buf.getvalue()


def parse_feature_csv(text: str) -> tuple[tuple[str, ...], np.ndarray]:
    """Inverse of :func:`feature_matrix_to_csv` (values at parsed precision)."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty feature cache")
    names = tuple(lines[0].split(","))
    values = np.array(
        [[float(v) for v in line.split(",")] for line in lines[1:]], dtype=np.float64
    )
    if values.size == 0:
        values = values.reshape(0, len(names))
    if values.shape[1] != len(names):
        raise ValueError("feature cache rows do not match the header width")
    return names, values
