# file: core/augment.py
"""Audio augmentation of participant segments and feature corruption.

Four waveform augmenters (noise, pitch, shift, speed) expand the training
set; ``corrupt_gaussian`` perturbs normalized features for the noise
robustness experiment. All randomness comes from numpy Generators so that a
seed fully determines the output.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.signal import get_window

from .audio_io import AudioSignal, SegmentSet, TECHNIQUE_ORIGINAL
from .dsp_features import FeatureMatrix
from .errors import ArgumentError

logger = logging.getLogger(__name__)

# --- Constants for augmentation ---
NOISE_FACTOR = 0.05
PITCH_FACTOR = 1.5
SHIFT_MAX_S = 0.2
SPEED_FACTOR = 1.5
GRAIN_S = 0.05
ENVELOPE_FLOOR = 1e-8

TECHNIQUES = ("noise", "pitch", "shift", "speed")


@dataclass(frozen=True)
class AugmentConfig:
    noise_factor: float = NOISE_FACTOR
    pitch_factor: float = PITCH_FACTOR
    shift_max_s: float = SHIFT_MAX_S
    speed_factor: float = SPEED_FACTOR
    rng_seed: int = 0
    grain_s: float = GRAIN_S

    def __post_init__(self):
        for name in ("noise_factor", "pitch_factor", "speed_factor", "grain_s"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be > 0")
        if self.shift_max_s < 0:
            raise ArgumentError("shift_max_s must be >= 0")
        if self.rng_seed < 0:
            raise ArgumentError("rng_seed must be non-negative")


def _clipped(samples, rate):
    return AudioSignal(np.clip(samples, -1.0, 1.0), rate)


def inject_noise(signal, factor, rng):
    """Add ``factor`` * N(0, 1) per sample, clamped to [-1, 1]."""
    if factor < 0:
        raise ArgumentError("noise factor must be >= 0")
    if factor == 0:
        return signal
    noise = rng.standard_normal(len(signal))
    return _clipped(signal.samples + factor * noise, signal.sample_rate_hz)


def shift_by_samples(signal, k):
    """Shift right by k samples (left if k < 0); vacated samples become silence."""
    n = len(signal)
    if abs(k) >= n and n:
        raise ArgumentError(f"shift of {k} samples does not fit a {n} sample signal")
    out = np.zeros(n)
    if k > 0:
        out[k:] = signal.samples[:n - k]
    elif k < 0:
        out[:n + k] = signal.samples[-k:]
    else:
        out[:] = signal.samples
    return AudioSignal(out, signal.sample_rate_hz)


def shift_time(signal, shift_max_s, rng):
    """Shift by a uniform random amount in [-shift_max_s, +shift_max_s]."""
    rate = signal.sample_rate_hz
    if shift_max_s < 0 or shift_max_s * rate >= len(signal):
        raise ArgumentError(f"shift_max_s {shift_max_s} too long for a {signal.duration_seconds:.3f}s signal")
    if shift_max_s == 0:
        return signal
    s = rng.uniform(-shift_max_s, shift_max_s)
    k = int(round(abs(s) * rate))
    return shift_by_samples(signal, k if s >= 0 else -k)


def _stretch(samples, factor):
    n = samples.shape[0]
    n_out = int(np.floor((n - 1) / factor)) + 1
    positions = np.minimum(np.arange(n_out) * factor, n - 1)
    return np.interp(positions, np.arange(n), samples)


def stretch_speed(signal, speed_factor):
    """Linear interpolation at positions i * speed_factor (faster and shorter for factor > 1)."""
    if speed_factor <= 0:
        raise ArgumentError("speed factor must be > 0")
    if speed_factor == 1.0 or len(signal) == 0:
        return signal
    return AudioSignal(_stretch(signal.samples, speed_factor), signal.sample_rate_hz)


def shift_pitch(signal, pitch_factor, grain_s=GRAIN_S):
    """Scale frequencies by ``pitch_factor`` keeping the duration.

    The speed stretch raises the pitch; Hann grains (50% overlap) read from
    the stretched signal at a proportionally slower hop are overlap-added to
    restore the original length.
    """
    if pitch_factor <= 0:
        raise ArgumentError("pitch factor must be > 0")
    n = len(signal)
    rate = signal.sample_rate_hz
    if pitch_factor == 1.0 or n == 0:
        return signal

    stretched = _stretch(signal.samples, pitch_factor)
    ratio = stretched.shape[0] / n
    grain = max(int(round(grain_s * rate)), 2)
    hop = grain // 2
    window = get_window("hann", grain)

    source = np.pad(stretched, (grain, 2 * grain + hop))
    out = np.zeros(n + 2 * grain)
    envelope = np.zeros(n + 2 * grain)
    pos = -hop
    while pos < n:
        a = int(round(pos * ratio)) + grain
        o = pos + grain
        out[o:o + grain] += window * source[a:a + grain]
        envelope[o:o + grain] += window
        pos += hop

    out = out[grain:grain + n]
    envelope = envelope[grain:grain + n]
    safe = envelope > ENVELOPE_FLOOR
    result = np.zeros(n)
    result[safe] = out[safe] / envelope[safe]
    return _clipped(result, rate)


def augment_dataset(segments, cfg):
    """Originals plus one noise, pitch, shift and speed copy of every segment."""
    rate = segments.sample_rate_hz
    out, techniques = [], []
    for i, seg in enumerate(segments.segments):
        rng = np.random.default_rng(cfg.rng_seed ^ i)
        shift_max = cfg.shift_max_s
        if shift_max * rate >= len(seg):
            shift_max = (len(seg) - 1) / rate
            logger.debug("%s segment %d: shift limited to %.3fs", segments.source_id, i, shift_max)
        out.extend([
            seg,
            inject_noise(seg, cfg.noise_factor, rng),
            shift_pitch(seg, cfg.pitch_factor, cfg.grain_s),
            shift_time(seg, shift_max, rng),
            stretch_speed(seg, cfg.speed_factor),
        ])
        techniques.extend((TECHNIQUE_ORIGINAL,) + TECHNIQUES)
    return SegmentSet(out, segments.source_id, techniques)


def corrupt_gaussian(features, fraction, sigma, rng):
    """Add N(0, sigma^2) to a uniformly chosen ``fraction`` of the rows.

    Rows are all positions of the leading axes, so clip sequences
    (clips x frames x features) are corrupted frame by frame.
    """
    if not 0 <= fraction <= 1:
        raise ArgumentError(f"fraction must be in [0, 1], got {fraction}")
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    rows = values.reshape(-1, values.shape[-1]).astype(np.float64)
    k = int(round(fraction * rows.shape[0]))
    if k:
        picked = rng.choice(rows.shape[0], size=k, replace=False)
        rows[picked] += rng.normal(0.0, sigma, size=(k, rows.shape[1]))
    corrupted = rows.reshape(values.shape)
    if isinstance(features, FeatureMatrix):
        return features.with_values(corrupted)
    return corrupted
