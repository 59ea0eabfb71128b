"""
Tests for clip/frame cutting, MFCC extraction, normalization and feature files.
The spectral tests compare against a direct evaluation of the textbook formulas.
"""
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.audio_io import AudioSignal, SegmentSet
from core.dsp_features import (FeatureMatrix, FrameSpec, NormStats, apply_norm, clip_starts, deltas,
                               extract_features, features_from_bytes, features_to_bytes, fit_norm_stats,
                               frame_segments, hamming_window, load_features, load_norm_stats,
                               mel_filterbank, mfcc_frame, norm_stats_from_bytes, norm_stats_to_bytes,
                               power_spectrum, save_features, save_norm_stats)
from core.errors import ArgumentError, EmptyFeaturesError, FormatError, ShapeError

RATE = 16000
SPEC = FrameSpec()


def _tone(seconds, f0=220.0, rate=RATE, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(round(seconds * rate))) / rate
    x = 0.4 * np.sin(2 * np.pi * f0 * t) + 0.2 * np.sin(2 * np.pi * 3 * f0 * t) + 0.01 * rng.normal(size=t.size)
    return AudioSignal(np.clip(x, -1, 1), rate)


def _segments(*seconds):
    return SegmentSet([_tone(s, seed=i) for i, s in enumerate(seconds)], "P")


# -----------------
# Framing arithmetic
# -----------------
def test_frame_spec_defaults():
    assert SPEC.frame_samples(RATE) == 960
    assert SPEC.frame_hop_samples(RATE) == 480
    assert SPEC.clip_samples(RATE) == 40000
    assert SPEC.frames_per_clip(RATE) == 82
    assert SPEC.fft_size_for(960) == 1024
    assert SPEC.n_features == 60


@pytest.mark.parametrize("kwargs", [
    {"frame_len_s": 3.0},
    {"frame_hop_s": 0.1},
    {"frame_hop_s": 0.0},
    {"n_static_ceps": 30},
    {"fft_size": 1000},
    {"clip_hop_s": 0.0},
])
def test_frame_spec_rejects_bad_values(kwargs):
    with pytest.raises(ArgumentError):
        FrameSpec(**kwargs)


def test_explicit_fft_size_must_fit_frame():
    with pytest.raises(ArgumentError):
        FrameSpec(fft_size=512).fft_size_for(960)
    assert FrameSpec(fft_size=2048).fft_size_for(960) == 2048


@pytest.mark.parametrize("seconds, n_clips", [
    (2.5, 1),
    (3.0, 2),
    (2.7, 2),
    (1.25, 1),
    (1.2, 0),
    (5.0, 6),
])
def test_clip_counts(seconds, n_clips):
    assert len(clip_starts(int(round(seconds * RATE)), SPEC, RATE)) == n_clips


def test_one_clip_gives_82_frames_of_960_samples():
    frames, origins = frame_segments(_segments(2.5), SPEC)
    assert frames.shape == (82, 960)
    assert origins[0].tolist() == [0, 0, 0]
    assert origins[-1].tolist() == [0, 0, 81]


def test_partial_clip_is_zero_padded():
    seg = SegmentSet([AudioSignal(np.full(int(2.7 * RATE), 0.5), RATE)], "P")
    frames, origins = frame_segments(seg, SPEC)
    assert frames.shape[0] == 2 * 82
    second = frames[origins[:, 1] == 1]
    # second clip starts at 0.5 s, real samples end at 2.2 s into the clip
    assert np.all(second[0] == 0.5)
    assert np.all(second[-1] == 0.0)


def test_frames_are_ordered_by_segment_clip_frame():
    _, origins = frame_segments(_segments(3.0, 0.5, 2.5), SPEC)
    keys = [tuple(o) for o in origins.tolist()]
    assert keys == sorted(keys)
    assert {k[0] for k in keys} == {0, 2}  # 0.5 s segment yields nothing


# -----------------
# Spectral oracle
# -----------------
def _naive_mfcc(frame, rate, n_fft, n_mel, n_ceps):
    n = frame.size
    k = np.arange(n)
    w = 0.54 - 0.46 * np.cos(2 * np.pi * k / (n - 1))
    padded = np.zeros(n_fft)
    padded[:n] = frame * w
    bins = np.arange(n_fft // 2 + 1)
    dft = np.array([np.sum(padded * np.exp(-2j * np.pi * b * np.arange(n_fft) / n_fft)) for b in bins])
    mag = np.abs(dft)

    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)
    edges = inv(np.linspace(mel(0.0), mel(rate / 2.0), n_mel + 2))
    freqs = bins * rate / n_fft
    energies = np.zeros(n_mel)
    for m in range(n_mel):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        tri = np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)))
        energies[m] = np.sum(tri * mag)
    log_e = np.log(np.maximum(energies, 1e-10))

    out = np.zeros(n_ceps)
    for c in range(n_ceps):
        scale = np.sqrt(1.0 / n_mel) if c == 0 else np.sqrt(2.0 / n_mel)
        out[c] = scale * np.sum(log_e * np.cos(np.pi * c * (2 * np.arange(n_mel) + 1) / (2 * n_mel)))
    return out


def test_hamming_window_formula():
    w = hamming_window(8)
    k = np.arange(8)
    np.testing.assert_allclose(w, 0.54 - 0.46 * np.cos(2 * np.pi * k / 7))
    with pytest.raises(ArgumentError):
        hamming_window(1)


def test_power_spectrum_peak_at_tone_bin():
    rate, n_fft = 8000, 512
    spec = FrameSpec(frame_len_s=0.064, frame_hop_s=0.032)
    frame = np.sin(2 * np.pi * 1000.0 * np.arange(512) / rate)
    mag = power_spectrum(frame, spec, n_fft)
    assert mag.shape == (257,)
    assert int(np.argmax(mag)) == 64  # 1000 Hz * 512 / 8000


def test_mel_filterbank_shape_and_triangles():
    fb = mel_filterbank(SPEC, RATE)
    assert fb.shape == (24, 513)
    assert np.all(fb >= 0)
    assert np.all(fb.max(axis=1) <= 1.0 + 1e-9)
    peaks = fb.argmax(axis=1)
    assert np.all(np.diff(peaks) > 0)


def test_power_spectrum_keeps_windowed_energy():
    frame = np.random.default_rng(11).uniform(-1.0, 1.0, 960)
    mag = power_spectrum(frame, SPEC)
    assert mag.shape == (513,)
    windowed = frame * hamming_window(960)
    spectral = (mag[0] ** 2 + mag[-1] ** 2 + 2.0 * np.sum(mag[1:-1] ** 2)) / 1024
    assert spectral == pytest.approx(np.sum(windowed ** 2), rel=1e-10)


def test_mfcc_matches_direct_formulas_on_white_noise():
    rng = np.random.default_rng(2024)
    fb = mel_filterbank(SPEC, RATE)
    for _ in range(100):
        frame = rng.uniform(-1.0, 1.0, SPEC.frame_samples(RATE))
        got = mfcc_frame(frame, fb, SPEC)
        assert got.shape == (20,)
        np.testing.assert_allclose(got, _naive_mfcc(frame, RATE, 1024, 24, 20), rtol=0, atol=1e-6)


def test_mfcc_matches_direct_formulas_at_8khz():
    rate = 8000
    spec = FrameSpec(frame_len_s=0.032, frame_hop_s=0.016, n_mel=12, n_static_ceps=8)
    frame = _tone(0.032, f0=310.0, rate=rate, seed=5).samples
    fb = mel_filterbank(spec, rate)
    got = mfcc_frame(frame, fb, spec)
    expected = _naive_mfcc(frame, rate, 256, 12, 8)
    np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-6)


def test_silent_frame_hits_log_floor():
    fb = mel_filterbank(SPEC, RATE)
    c = mfcc_frame(np.zeros(960), fb, SPEC)
    assert c[0] == pytest.approx(np.sqrt(24) * np.log(1e-10))
    np.testing.assert_allclose(c[1:], 0.0, atol=1e-9)


def test_deltas_of_ramp_and_constant():
    t = np.arange(10, dtype=float)[:, None] * np.array([[1.0, -2.0]])
    d = deltas(t)
    np.testing.assert_allclose(d[2:-2], [[1.0, -2.0]] * 6)
    np.testing.assert_allclose(deltas(np.ones((6, 3))), 0.0)


# -----------------
# extract_features
# -----------------
def test_extract_features_shape_and_layout():
    fm = extract_features(_segments(2.5, 3.0), SPEC)
    assert fm.values.shape == (3 * 82, 60)
    assert fm.n_clips == 3
    assert fm.clip_sequences().shape == (3, 82, 60)
    assert fm.clip_origins().tolist() == [[0, 0], [1, 0], [1, 1]]
    # first 20 columns are the static coefficients of each frame
    fb = mel_filterbank(SPEC, RATE)
    frames, _ = frame_segments(_segments(2.5, 3.0), SPEC)
    np.testing.assert_allclose(fm.values[5, :20], mfcc_frame(frames[5], fb, SPEC), rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(fm.values[:82, 20:40], deltas(fm.values[:82, :20]), atol=1e-9)


def test_extract_features_too_short():
    with pytest.raises(EmptyFeaturesError):
        extract_features(_segments(1.0, 0.4), SPEC)


def test_extract_features_is_deterministic():
    a = extract_features(_segments(2.8), SPEC)
    b = extract_features(_segments(2.8), SPEC)
    np.testing.assert_array_equal(a.values, b.values)


def test_feature_matrix_rejects_partial_clips():
    with pytest.raises(ShapeError):
        FeatureMatrix(np.zeros((83, 60)), np.zeros((83, 3)), "P", SPEC, 82)
    with pytest.raises(ShapeError):
        FeatureMatrix(np.zeros((82, 59)), np.zeros((82, 3)), "P", SPEC, 82)


# -----------------
# Normalization
# -----------------
def test_fit_norm_stats_is_population_mean_std():
    rng = np.random.default_rng(1)
    x = rng.normal(3.0, 2.0, size=(500, 60))
    stats = fit_norm_stats(x)
    np.testing.assert_allclose(stats.mean, x.mean(axis=0))
    np.testing.assert_allclose(stats.std, x.std(axis=0))
    z = apply_norm(x, stats)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)


def test_fit_norm_stats_streams_many_blocks():
    rng = np.random.default_rng(2)
    blocks = [rng.normal(size=(n, 60)) for n in (82, 164, 246)]
    one = fit_norm_stats(np.concatenate(blocks))
    many = fit_norm_stats(blocks)
    np.testing.assert_allclose(many.mean, one.mean)
    np.testing.assert_allclose(many.std, one.std)


def test_constant_column_gets_std_floor():
    x = np.random.default_rng(0).normal(size=(10, 60))
    x[:, 7] = 4.0
    stats = fit_norm_stats(x)
    assert stats.std[7] == pytest.approx(1e-8)
    assert np.all(np.isfinite(apply_norm(x, stats)))


def test_norm_errors():
    with pytest.raises(ArgumentError):
        fit_norm_stats(np.zeros((1, 60)))
    with pytest.raises(ShapeError):
        apply_norm(np.zeros((4, 59)), NormStats.identity(60))


def test_apply_norm_keeps_provenance():
    fm = extract_features(_segments(2.5), SPEC)
    stats = fit_norm_stats(fm)
    z = apply_norm(fm, stats)
    assert isinstance(z, FeatureMatrix) and z.normalized and not fm.normalized
    np.testing.assert_array_equal(z.origins, fm.origins)


# -----------------
# Files
# -----------------
def test_feature_file_round_trip(tmp_path):
    fm = extract_features(_segments(3.0), SPEC)
    path = str(tmp_path / "P.fmx")
    save_features(path, fm)
    back = load_features(path)
    np.testing.assert_array_equal(back.values, fm.values.astype(np.float32))
    np.testing.assert_array_equal(back.origins, fm.origins)
    assert back.frame_spec == fm.frame_spec
    assert back.frames_per_clip == 82 and back.source_id == "P"
    assert features_to_bytes(back) == features_to_bytes(fm)


def test_corrupt_feature_files():
    data = features_to_bytes(extract_features(_segments(2.5), SPEC))
    with pytest.raises(FormatError):
        features_from_bytes(data[:-4])
    with pytest.raises(FormatError):
        features_from_bytes(b"no header here")
    with pytest.raises(FormatError):
        features_from_bytes(data.replace(b'"fmx"', b'"xyz"', 1))


def test_norm_stats_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    stats = fit_norm_stats(rng.normal(size=(100, 60)))
    path = str(tmp_path / "train.nrm")
    save_norm_stats(path, stats)
    assert load_norm_stats(path).same_as(stats)
    with pytest.raises(FormatError):
        norm_stats_from_bytes(norm_stats_to_bytes(stats)[:-8])
