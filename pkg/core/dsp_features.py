# file: core/dsp_features.py
"""MFCC feature extraction and z-score normalization.

Each participant segment is cut into 2.5 s clips (hop 0.5 s), every clip into
60 ms analysis frames (hop 30 ms). Per frame we compute 20 static MFCCs
(c0 included) from a 24 band mel filterbank, then first and second order
deltas along the frames of the clip, giving 60 columns per row.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass

import librosa
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct
from sklearn.preprocessing import StandardScaler

from .errors import ArgumentError, EmptyFeaturesError, FormatError, ShapeError

logger = logging.getLogger(__name__)

# --- Constants for MFCC extraction ---
CLIP_LEN_S = 2.5
CLIP_HOP_S = 0.5
FRAME_LEN_S = 0.060
FRAME_HOP_S = 0.030
N_MEL = 24
N_STATIC_CEPS = 20
DELTA_WINDOW = 2
LOG_FLOOR = 1e-10
CLIP_MIN_FILL = 0.5
STD_FLOOR = 1e-8

FMX_FORMAT = "fmx"
NRM_FORMAT = "nrm"
FILE_VERSION = 1


@dataclass(frozen=True)
class FrameSpec:
    clip_len_s: float = CLIP_LEN_S
    clip_hop_s: float = CLIP_HOP_S
    frame_len_s: float = FRAME_LEN_S
    frame_hop_s: float = FRAME_HOP_S
    n_mel: int = N_MEL
    n_static_ceps: int = N_STATIC_CEPS
    fft_size: int = None  # None: next power of two >= frame samples
    delta_window: int = DELTA_WINDOW
    log_floor: float = LOG_FLOOR
    clip_min_fill: float = CLIP_MIN_FILL

    def __post_init__(self):
        if not 0 < self.frame_len_s <= self.clip_len_s:
            raise ArgumentError("frame_len_s must be positive and no longer than clip_len_s")
        if not 0 < self.frame_hop_s <= self.frame_len_s:
            raise ArgumentError("frame_hop_s must satisfy 0 < frame_hop_s <= frame_len_s")
        if self.clip_hop_s <= 0:
            raise ArgumentError("clip_hop_s must be positive")
        if not 1 <= self.n_static_ceps <= self.n_mel:
            raise ArgumentError("n_static_ceps must be between 1 and n_mel")
        if self.fft_size is not None and (self.fft_size < 2 or self.fft_size & (self.fft_size - 1)):
            raise ArgumentError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.delta_window < 1:
            raise ArgumentError("delta_window must be >= 1")
        if not 0 < self.clip_min_fill <= 1:
            raise ArgumentError("clip_min_fill must be in (0, 1]")

    @property
    def n_features(self):
        return 3 * self.n_static_ceps

    def clip_samples(self, rate):
        return int(round(self.clip_len_s * rate))

    def clip_hop_samples(self, rate):
        return int(round(self.clip_hop_s * rate))

    def frame_samples(self, rate):
        return int(round(self.frame_len_s * rate))

    def frame_hop_samples(self, rate):
        return int(round(self.frame_hop_s * rate))

    def frames_per_clip(self, rate):
        return (self.clip_samples(rate) - self.frame_samples(rate)) // self.frame_hop_samples(rate) + 1

    def fft_size_for(self, frame_samples):
        if self.fft_size is not None:
            if self.fft_size < frame_samples:
                raise ArgumentError(f"fft_size {self.fft_size} shorter than frame ({frame_samples} samples)")
            return self.fft_size
        return 1 << max(int(frame_samples) - 1, 1).bit_length()

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(eq=False)
class FeatureMatrix:
    """Rows are analysis frames ordered by (segment, clip, frame).

    ``origins`` holds (segment index, clip index, frame index) per row.
    """
    values: np.ndarray
    origins: np.ndarray
    source_id: str
    frame_spec: FrameSpec
    frames_per_clip: int
    normalized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.origins = np.asarray(self.origins, dtype=np.int32).reshape(-1, 3)
        if self.values.ndim != 2 or self.values.shape[1] != self.frame_spec.n_features:
            raise ShapeError(f"feature matrix must have {self.frame_spec.n_features} columns, "
                             f"got shape {self.values.shape}")
        if self.origins.shape[0] != self.values.shape[0]:
            raise ShapeError("origins must have one entry per row")
        if self.frames_per_clip < 1 or self.values.shape[0] % self.frames_per_clip:
            raise ShapeError("row count is not a whole number of clips")
        if not np.all(np.isfinite(self.values)):
            raise ArgumentError(f"non-finite feature values in {self.source_id}")

    @property
    def n_rows(self):
        return self.values.shape[0]

    @property
    def n_clips(self):
        return self.n_rows // self.frames_per_clip

    def clip_sequences(self):
        """(clips, frames_per_clip, features) view of the rows."""
        return self.values.reshape(self.n_clips, self.frames_per_clip, self.values.shape[1])

    def clip_origins(self):
        """(segment, clip) pair for each sequence returned by clip_sequences."""
        return self.origins[::self.frames_per_clip, :2]

    def with_values(self, values, normalized=None):
        return FeatureMatrix(values, self.origins, self.source_id, self.frame_spec,
                             self.frames_per_clip,
                             self.normalized if normalized is None else normalized)


@dataclass(eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.std = np.asarray(self.std, dtype=np.float64).ravel()
        if self.mean.shape != self.std.shape:
            raise ShapeError("mean and std must have the same length")
        if np.any(self.std < STD_FLOOR):
            raise ArgumentError(f"std entries must be >= {STD_FLOOR}")

    @property
    def n_features(self):
        return self.mean.shape[0]

    def same_as(self, other):
        return np.array_equal(self.mean, other.mean) and np.array_equal(self.std, other.std)

    @classmethod
    def identity(cls, n_features):
        return cls(np.zeros(n_features), np.ones(n_features))


# -----------------
# Framing
# -----------------
def clip_starts(n_samples, spec, rate):
    """Start offsets of the clips cut from a segment of ``n_samples``.

    Full clips every clip hop; if the tail past the last full clip is not
    covered, one more clip starts at the next hop position and is kept
    (zero padded) only when it holds at least ``clip_min_fill`` of a clip.
    """
    clip = spec.clip_samples(rate)
    hop = spec.clip_hop_samples(rate)
    starts = []
    pos = 0
    while pos + clip <= n_samples:
        starts.append(pos)
        pos += hop
    covered = starts[-1] + clip if starts else 0
    if covered < n_samples and n_samples - pos >= spec.clip_min_fill * clip:
        starts.append(pos)
    return starts


def _segment_clips(samples, spec, rate):
    clip = spec.clip_samples(rate)
    starts = clip_starts(samples.shape[0], spec, rate)
    clips = np.zeros((len(starts), clip), dtype=np.float64)
    for i, s in enumerate(starts):
        piece = samples[s:s + clip]
        clips[i, :piece.shape[0]] = piece
    return clips


def _clip_frames(clips, spec, rate):
    frame = spec.frame_samples(rate)
    hop = spec.frame_hop_samples(rate)
    # (clips, windows, frame) with windows taken every hop samples
    return sliding_window_view(clips, frame, axis=1)[:, ::hop, :]


def frame_segments(segments, spec):
    """Cut every segment into clips and every clip into analysis frames.

    Returns ``(frames, origins)``: frames is (n, frame_samples), origins is
    (n, 3) with (segment, clip, frame) per frame, in temporal order.
    """
    rate = segments.sample_rate_hz
    frame_len = spec.frame_samples(rate)
    blocks, origins = [], []
    for seg_idx, seg in enumerate(segments.segments):
        frames = _clip_frames(_segment_clips(seg.samples, spec, rate), spec, rate)
        if frames.shape[0] == 0:
            continue
        n_clips, n_frames = frames.shape[:2]
        blocks.append(frames.reshape(-1, frame_len))
        clip_idx, frame_idx = np.meshgrid(np.arange(n_clips), np.arange(n_frames), indexing="ij")
        origins.append(np.column_stack([np.full(n_clips * n_frames, seg_idx),
                                        clip_idx.ravel(), frame_idx.ravel()]))
    if not blocks:
        return np.zeros((0, frame_len)), np.zeros((0, 3), dtype=np.int32)
    return np.concatenate(blocks), np.concatenate(origins).astype(np.int32)


# -----------------
# Spectral analysis
# -----------------
def hamming_window(n):
    """w[k] = 0.54 - 0.46 cos(2 pi k / (n - 1))."""
    if n < 2:
        raise ArgumentError(f"Hamming window needs n >= 2, got {n}")
    return np.hamming(n)


def power_spectrum(frame, spec, fft_size=None):
    """|DFT| of the Hamming windowed, zero padded frame (fft_size/2 + 1 bins)."""
    frame = np.asarray(frame, dtype=np.float64)
    n = frame.shape[-1]
    fft_size = fft_size or spec.fft_size_for(n)
    if n > fft_size:
        raise ArgumentError(f"frame of {n} samples does not fit fft_size {fft_size}")
    return np.abs(np.fft.rfft(frame * hamming_window(n), n=fft_size, axis=-1))


def hz_to_mel(f):
    return librosa.hz_to_mel(f, htk=True)


def mel_filterbank(spec, sample_rate_hz):
    """Un-normalized triangular filters, centres equally spaced in mel between 0 and rate/2."""
    if spec.n_mel < 2:
        raise ArgumentError("mel filterbank needs at least 2 filters")
    fft_size = spec.fft_size_for(spec.frame_samples(sample_rate_hz))
    return librosa.filters.mel(sr=sample_rate_hz, n_fft=fft_size, n_mels=spec.n_mel,
                               fmin=0.0, fmax=sample_rate_hz / 2.0, htk=True, norm=None,
                               dtype=np.float64)


def _cepstrum(magnitudes, fb, spec):
    energies = magnitudes @ fb.T
    log_energies = np.log(np.maximum(energies, spec.log_floor))
    return dct(log_energies, type=2, norm="ortho", axis=-1)[..., :spec.n_static_ceps]


def mfcc_frame(frame, fb, spec):
    """Static cepstral coefficients (c0 first) of one frame."""
    fft_size = 2 * (fb.shape[1] - 1)
    return _cepstrum(power_spectrum(frame, spec, fft_size), fb, spec)


def deltas(static, window=DELTA_WINDOW):
    """Regression deltas along axis -2 (time), edge frames replicated."""
    static = np.asarray(static, dtype=np.float64)
    n = static.shape[-2]
    if n < 1:
        raise ArgumentError("deltas need at least one frame")
    pad = [(0, 0)] * static.ndim
    pad[-2] = (window, window)
    padded = np.pad(static, pad, mode="edge")
    out = np.zeros_like(static)
    for m in range(1, window + 1):
        ahead = padded[..., window + m:window + m + n, :]
        behind = padded[..., window - m:window - m + n, :]
        out += m * (ahead - behind)
    return out / (2.0 * sum(m * m for m in range(1, window + 1)))


def extract_features(segments, spec):
    """60 column [static | delta | delta-delta] rows for every frame of every clip."""
    rate = segments.sample_rate_hz
    fb = mel_filterbank(spec, rate)
    fft_size = 2 * (fb.shape[1] - 1)
    frames_per_clip = spec.frames_per_clip(rate)

    blocks, origins = [], []
    for seg_idx, seg in enumerate(segments.segments):
        frames = _clip_frames(_segment_clips(seg.samples, spec, rate), spec, rate)
        if frames.shape[0] == 0:
            continue
        static = _cepstrum(power_spectrum(frames, spec, fft_size), fb, spec)
        d1 = deltas(static, spec.delta_window)
        d2 = deltas(d1, spec.delta_window)
        per_clip = np.concatenate([static, d1, d2], axis=-1)
        n_clips, n_frames = per_clip.shape[:2]
        blocks.append(per_clip.reshape(n_clips * n_frames, -1))
        clip_idx, frame_idx = np.meshgrid(np.arange(n_clips), np.arange(n_frames), indexing="ij")
        origins.append(np.column_stack([np.full(n_clips * n_frames, seg_idx),
                                        clip_idx.ravel(), frame_idx.ravel()]))

    if not blocks:
        raise EmptyFeaturesError(f"no clip of {segments.source_id or 'input'} reaches "
                                 f"{spec.clip_min_fill * spec.clip_len_s:.2f}s")
    values = np.concatenate(blocks)
    logger.debug("%s: %d clips, %d frames", segments.source_id, values.shape[0] // frames_per_clip,
                 values.shape[0])
    return FeatureMatrix(values, np.concatenate(origins), segments.source_id, spec, frames_per_clip)


# -----------------
# Normalization
# -----------------
def _as_blocks(features):
    if isinstance(features, (FeatureMatrix, np.ndarray)):
        features = [features]
    for fm in features:
        values = fm.values if isinstance(fm, FeatureMatrix) else np.asarray(fm)
        yield values.reshape(-1, values.shape[-1])


def fit_norm_stats(features):
    """Per-column mean and population std over one or many training matrices."""
    scaler = StandardScaler()
    n_rows = 0
    for block in _as_blocks(features):
        if block.shape[0] == 0:
            continue
        scaler.partial_fit(block.astype(np.float64))
        n_rows += block.shape[0]
    if n_rows < 2:
        raise ArgumentError(f"normalization statistics need at least 2 rows, got {n_rows}")
    std = np.maximum(np.sqrt(scaler.var_), STD_FLOOR)
    return NormStats(scaler.mean_.copy(), std)


def apply_norm(features, stats):
    """(x - mean) / std per column; returns the same kind it was given."""
    values = features.values if isinstance(features, FeatureMatrix) else np.asarray(features)
    if values.shape[-1] != stats.n_features:
        raise ShapeError(f"{values.shape[-1]} feature columns but stats for {stats.n_features}")
    out = (values.astype(np.float64) - stats.mean) / stats.std
    if isinstance(features, FeatureMatrix):
        return features.with_values(out, normalized=True)
    return out


# -----------------
# Persistence (.fmx / .nrm)
# -----------------
def _split_header(data, expected_format):
    newline = data.find(b"\n")
    if newline < 0:
        raise FormatError(f"missing {expected_format} header line")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt {expected_format} header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != expected_format:
        raise FormatError(f"not a {expected_format} file")
    if header.get("version") != FILE_VERSION:
        raise FormatError(f"unsupported {expected_format} version {header.get('version')}")
    return header, data[newline + 1:]


def features_to_bytes(fm):
    header = {
        "format": FMX_FORMAT,
        "version": FILE_VERSION,
        "shape": list(fm.values.shape),
        "source_id": fm.source_id,
        "frame_spec": fm.frame_spec.to_dict(),
        "frames_per_clip": fm.frames_per_clip,
        "normalized": fm.normalized,
        "blocks": ["values:<f4", "origins:<i4"],
    }
    return (json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
            + fm.values.astype("<f4").tobytes() + fm.origins.astype("<i4").tobytes())


def features_from_bytes(data):
    header, payload = _split_header(data, FMX_FORMAT)
    try:
        rows, cols = (int(v) for v in header["shape"])
        n_values = rows * cols
        expected = 4 * n_values + 4 * rows * 3
        if len(payload) != expected:
            raise FormatError(f"fmx payload is {len(payload)} bytes, expected {expected}")
        values = np.frombuffer(payload, dtype="<f4", count=n_values).reshape(rows, cols)
        origins = np.frombuffer(payload, dtype="<i4", offset=4 * n_values).reshape(rows, 3)
        return FeatureMatrix(values.astype(np.float32), origins, header["source_id"],
                             FrameSpec.from_dict(header["frame_spec"]), int(header["frames_per_clip"]),
                             bool(header["normalized"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt fmx file: {exc}") from exc


def save_features(path, fm):
    with open(path, "wb") as f:
        f.write(features_to_bytes(fm))


def load_features(path):
    with open(path, "rb") as f:
        return features_from_bytes(f.read())


def norm_stats_to_bytes(stats):
    header = {"format": NRM_FORMAT, "version": FILE_VERSION, "n_features": stats.n_features,
              "blocks": ["mean:<f8", "std:<f8"]}
    return (json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
            + stats.mean.astype("<f8").tobytes() + stats.std.astype("<f8").tobytes())


def norm_stats_from_bytes(data):
    header, payload = _split_header(data, NRM_FORMAT)
    n = header.get("n_features")
    if not isinstance(n, int) or len(payload) != 16 * n:
        raise FormatError("nrm payload does not match its header")
    arr = np.frombuffer(payload, dtype="<f8")
    return NormStats(arr[:n].copy(), arr[n:].copy())


def save_norm_stats(path, stats):
    with open(path, "wb") as f:
        f.write(norm_stats_to_bytes(stats))


def load_norm_stats(path):
    with open(path, "rb") as f:
        return norm_stats_from_bytes(f.read())
