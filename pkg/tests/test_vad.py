import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdcall.audio_io import MonoSignal, frame_signal
from birdcall.vad import (
    ActivityMask,
    VadConfig,
    adaptive_threshold_step,
    detect_active_frames,
    extract_active_signal,
    primary_threshold,
    square_frame,
)


def straight_line_mask(signal: MonoSignal, cfg: VadConfig) -> np.ndarray:
    """Frame-by-frame re-simulation of the thresholding recursion."""
    series = frame_signal(signal, cfg.frame_config)
    active = np.empty(series.n_frames, dtype=bool)
    prev = cfg.initial_adaptive_threshold
    for i in range(series.n_frames):
        squared = square_frame(series.frames[i])
        primary = primary_threshold(squared, cfg.global_threshold)
        adaptive = adaptive_threshold_step(i + 1, prev, primary)
        silent = squared.mean() < adaptive
        if np.abs(series.frames[i]).max() < cfg.silence_floor:
            silent = True
        active[i] = not silent
        prev = adaptive
    return active


def make_signal(values, rate=1000):
    x = np.asarray(values, dtype=np.float64)
    return MonoSignal(np.clip(x, -1, 1), rate)


class TestPrimitives:
    def test_square_frame(self):
        np.testing.assert_array_equal(square_frame([1, -1, 0.5]), [1, 1, 0.25])
        np.testing.assert_array_equal(square_frame(np.zeros(5)), np.zeros(5))

    def test_square_frame_matches_loop(self):
        rng = np.random.default_rng(3)
        frame = rng.uniform(-1, 1, 50)
        expected = np.array([v * v for v in frame])
        np.testing.assert_array_equal(square_frame(frame), expected)

    def test_primary_threshold_hand_computed(self):
        assert primary_threshold(np.array([0.0, 0.4]), 0.6) == pytest.approx(0.24)

    def test_primary_threshold_constant_frame(self):
        assert primary_threshold(np.full(10, 0.3), 0.6) == pytest.approx(0.3)

    def test_primary_threshold_degenerate_t(self):
        frame = np.array([0.1, 0.2, 0.9])
        assert primary_threshold(frame, 0.0) == pytest.approx(0.1)

    def test_primary_threshold_empty_frame(self):
        with pytest.raises(ValueError):
            primary_threshold(np.array([]), 0.6)

    def test_adaptive_step_first_frame_is_primary(self):
        assert adaptive_threshold_step(1, 0.0, 0.24) == pytest.approx(0.24)

    def test_adaptive_step_hand_computed(self):
        assert adaptive_threshold_step(2, 0.24, 0.12) == pytest.approx(0.18)

    def test_adaptive_step_rejects_index_zero(self):
        with pytest.raises(ValueError):
            adaptive_threshold_step(0, 0.0, 0.1)

    def test_adaptive_constant_primary_stays_constant(self):
        prev = 0.0
        for i in range(1, 20):
            prev = adaptive_threshold_step(i, prev, 0.37)
            assert prev == pytest.approx(0.37)


class TestDetect:
    CFG = VadConfig(window_ms=100, hop_ms=50)

    def test_constant_amplitude_all_active(self):
        # zero peak-to-peak: threshold equals the mean, and equality is not "lower"
        sig = make_signal(np.full(500, 0.2))
        mask = detect_active_frames(sig, self.CFG)
        assert mask.active.all()

    def test_all_zero_signal_all_silent(self):
        sig = make_signal(np.zeros(500))
        mask = detect_active_frames(sig, self.CFG)
        assert not mask.active.any()

    def test_quiet_then_tone_keeps_tone_frames(self):
        rng = np.random.default_rng(5)
        rate = 8000
        quiet = rng.normal(0, 0.01, rate)
        t = np.arange(rate) / rate
        tone = 0.5 * np.sin(2 * np.pi * 440 * t)
        sig = make_signal(np.concatenate([quiet, tone]), rate)
        cfg = VadConfig()
        mask = detect_active_frames(sig, cfg)
        np.testing.assert_array_equal(mask.active, straight_line_mask(sig, cfg))
        # the tone occupies the second half of the frames and stays active
        first_tone_frame = rate // mask.hop_len
        assert mask.active[first_tone_frame + 1 :].all()
        assert not mask.active[: first_tone_frame - 1].any()

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_oracle_equivalence_on_random_signals(self, seed):
        rng = np.random.default_rng(seed)
        # ten frames of mixed amplitude regimes
        pieces = [
            rng.normal(0, rng.choice([0.001, 0.05, 0.3]), 50) for _ in range(11)
        ]
        sig = make_signal(np.concatenate(pieces))
        cfg = VadConfig(window_ms=100, hop_ms=50)
        mask = detect_active_frames(sig, cfg)
        np.testing.assert_array_equal(mask.active, straight_line_mask(sig, cfg))

    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.25, 0.5, 2.0, 8.0]))
    @settings(max_examples=30, deadline=None)
    def test_amplitude_scaling_leaves_mask_unchanged(self, seed, k):
        rng = np.random.default_rng(seed)
        # bounded draw keeps every scaled sample inside [-1, 1] unclipped
        x = rng.uniform(-0.08, 0.08, 600)
        cfg = VadConfig(window_ms=100, hop_ms=50, silence_floor=0.0)
        base = detect_active_frames(make_signal(x), cfg)
        scaled = detect_active_frames(make_signal(x * k), cfg)
        np.testing.assert_array_equal(scaled.active, base.active)

    def test_mask_covers_every_frame(self):
        sig = make_signal(np.sin(np.arange(730) / 10.0) * 0.5)
        mask = detect_active_frames(sig, self.CFG)
        series = frame_signal(sig, self.CFG.frame_config)
        assert mask.n_frames == series.n_frames


class TestExtract:
    def test_all_active_returns_covered_prefix(self):
        sig = make_signal(np.linspace(-0.5, 0.5, 430))
        mask = ActivityMask(active=np.ones(7, dtype=bool), window_len=100, hop_len=50)
        out = extract_active_signal(sig, mask)
        np.testing.assert_array_equal(out.samples, sig.samples[:400])

    def test_no_active_frames_returns_empty(self):
        sig = make_signal(np.zeros(430))
        mask = ActivityMask(active=np.zeros(7, dtype=bool), window_len=100, hop_len=50)
        out = extract_active_signal(sig, mask)
        assert len(out) == 0
        assert out.sample_rate == sig.sample_rate

    def test_overlapping_frames_emit_each_sample_once(self):
        sig = make_signal(np.arange(250) / 1000.0)
        active = np.array([True, True, False, False])
        mask = ActivityMask(active=active, window_len=100, hop_len=50)
        out = extract_active_signal(sig, mask)
        np.testing.assert_array_equal(out.samples, sig.samples[0:150])

    def test_disjoint_regions_concatenate_in_order(self):
        sig = make_signal(np.arange(400) / 1000.0)
        active = np.array([True, False, False, True, False, False, True])
        mask = ActivityMask(active=active, window_len=100, hop_len=50)
        out = extract_active_signal(sig, mask)
        expected = np.concatenate(
            [sig.samples[0:100], sig.samples[150:250], sig.samples[300:400]]
        )
        np.testing.assert_array_equal(out.samples, expected)

    def test_geometry_mismatch_raises(self):
        sig = make_signal(np.zeros(430))
        mask = ActivityMask(active=np.ones(3, dtype=bool), window_len=100, hop_len=50)
        with pytest.raises(ValueError, match="frames"):
            extract_active_signal(sig, mask)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_output_is_a_subsequence_of_the_input(self, seed):
        rng = np.random.default_rng(seed)
        sig = make_signal(rng.normal(0, 0.1, 500))
        cfg = VadConfig(window_ms=100, hop_ms=50)
        out = extract_active_signal(sig, detect_active_frames(sig, cfg))
        assert len(out) <= len(sig)
        # greedy subsequence match
        it = iter(sig.samples.tolist())
        assert all(any(v == w for w in it) for v in out.samples.tolist())
