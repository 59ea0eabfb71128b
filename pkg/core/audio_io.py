# file: core/audio_io.py
"""WAV decoding/encoding, interview transcripts and participant segmentation.

Audio is always handled as mono float64 samples in [-1, 1]. Transcripts are
the four column tab separated layout used by clinical interview corpora::

    start_time<TAB>stop_time<TAB>speaker<TAB>value
"""

import csv
import enum
import io
import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.io import wavfile

from .errors import (ArgumentError, EmptySegmentsError, FormatError, ParseError,
                     UnsupportedError)

logger = logging.getLogger(__name__)

# --- Constants for audio ingestion ---
CANONICAL_RATE_HZ = 16000
PCM16_SCALE = 32768.0
MIN_SEGMENT_S = 0.1
MAX_CHANNELS = 2

# Speaker labels as they appear in transcripts (lower-cased for matching)
INTERVIEWER_LABELS = ("ellie", "interviewer")
PARTICIPANT_LABELS = ("participant",)

TRANSCRIPT_COLUMNS = ["start_time", "stop_time", "speaker", "value"]

TECHNIQUE_ORIGINAL = "original"


class Speaker(str, enum.Enum):
    PARTICIPANT = "Participant"
    INTERVIEWER = "Interviewer"


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """Mono sample buffer. ``samples`` is stored as a read-only float64 array."""
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ArgumentError(f"AudioSignal expects a 1-D buffer, got shape {samples.shape}")
        rate = int(self.sample_rate_hz)
        if rate <= 0:
            raise ArgumentError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ArgumentError("AudioSignal samples must be finite")
        if samples.size and (samples.max() > 1.0 or samples.min() < -1.0):
            raise ArgumentError("AudioSignal samples must lie in [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_seconds(self):
        return len(self) / self.sample_rate_hz

    def same_as(self, other):
        """Bit-for-bit equality of rate and samples."""
        return (self.sample_rate_hz == other.sample_rate_hz
                and np.array_equal(self.samples, other.samples))


@dataclass(frozen=True)
class TranscriptTurn:
    start_s: float
    stop_s: float
    speaker: Speaker
    text: str = ""
    line_number: int = field(default=None, compare=False)

    @property
    def duration_s(self):
        return self.stop_s - self.start_s


@dataclass
class SegmentSet:
    """Participant speech segments of one recording, in temporal order.

    ``techniques`` is parallel to ``segments`` and records how each segment
    was produced (``original`` or an augmentation name).
    """
    segments: list
    source_id: str
    techniques: list = None

    def __post_init__(self):
        self.segments = list(self.segments)
        if self.techniques is None:
            self.techniques = [TECHNIQUE_ORIGINAL] * len(self.segments)
        else:
            self.techniques = list(self.techniques)
        if len(self.techniques) != len(self.segments):
            raise ArgumentError("techniques must be parallel to segments")
        rates = {seg.sample_rate_hz for seg in self.segments}
        if len(rates) > 1:
            raise ArgumentError(f"segments of {self.source_id} mix sample rates {sorted(rates)}")
        for seg in self.segments:
            if len(seg) < 1:
                raise ArgumentError(f"empty segment in {self.source_id}")

    def __len__(self):
        return len(self.segments)

    @property
    def sample_rate_hz(self):
        return self.segments[0].sample_rate_hz if self.segments else CANONICAL_RATE_HZ

    @property
    def total_samples(self):
        return sum(len(seg) for seg in self.segments)


# -----------------
# WAV codec
# -----------------
def decode_wav(data):
    """Decode RIFF/WAVE bytes (PCM16 or float32, mono or stereo) into an AudioSignal."""
    try:
        with warnings.catch_warnings():
            # scipy warns about chunks it skips (LIST/INFO etc.)
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, raw = wavfile.read(io.BytesIO(bytes(data)))
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported" in msg:
            raise UnsupportedError(msg) from exc
        raise FormatError(f"malformed WAV: {msg}") from exc
    except (EOFError, struct.error, IndexError) as exc:
        raise FormatError(f"truncated WAV: {exc}") from exc

    if raw.ndim == 2 and raw.shape[1] > MAX_CHANNELS:
        raise UnsupportedError(f"{raw.shape[1]} channels; only mono and stereo are read")

    if raw.dtype == np.int16:
        samples = raw.astype(np.float64) / PCM16_SCALE
    elif raw.dtype == np.float32:
        samples = np.clip(raw.astype(np.float64), -1.0, 1.0)
    else:
        raise UnsupportedError(f"sample format {raw.dtype} is not PCM16 or float32")

    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return AudioSignal(samples, int(rate))


def encode_wav(signal):
    """Encode as 16-bit PCM mono RIFF/WAVE bytes."""
    pcm = np.clip(np.round(signal.samples * PCM16_SCALE), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    wavfile.write(buf, signal.sample_rate_hz, pcm)
    return buf.getvalue()


def read_wav(path):
    with open(path, "rb") as f:
        return decode_wav(f.read())


def write_wav(path, signal):
    with open(path, "wb") as f:
        f.write(encode_wav(signal))


# -----------------
# Transcripts
# -----------------
def _speaker_from_label(label, line_number):
    key = str(label).strip().lower()
    if key in INTERVIEWER_LABELS:
        return Speaker.INTERVIEWER
    if key in PARTICIPANT_LABELS:
        return Speaker.PARTICIPANT
    raise ParseError(f"unknown speaker label {label!r}", line_number)


def _parse_time(value, line_number, column):
    try:
        t = float(str(value).strip())
    except ValueError:
        raise ParseError(f"unparseable {column} {value!r}", line_number) from None
    if not np.isfinite(t) or t < 0:
        raise ParseError(f"{column} must be a finite non-negative number, got {value!r}", line_number)
    return t


def parse_transcript(text):
    """Parse a TSV transcript into turns sorted by start time."""
    if not str(text).strip():
        raise ParseError("empty transcript (missing header line)", 1)
    try:
        df = pd.read_csv(io.StringIO(text), sep="\t", dtype=str, keep_default_na=False,
                         quoting=csv.QUOTE_NONE, index_col=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ParseError(f"malformed transcript: {exc}") from exc

    if df.shape[1] < 3:
        raise ParseError(f"expected at least 3 tab separated columns, found {df.shape[1]}", 1)

    turns = []
    for idx, row in df.iterrows():
        line_number = int(idx) + 2  # header is line 1
        start = _parse_time(row.iloc[0], line_number, "start_time")
        stop = _parse_time(row.iloc[1], line_number, "stop_time")
        if stop <= start:
            raise ParseError(f"stop_time {stop} is not after start_time {start}", line_number)
        speaker = _speaker_from_label(row.iloc[2], line_number)
        utterance = row.iloc[3] if df.shape[1] > 3 else ""
        if pd.isna(utterance):
            utterance = ""
        turns.append(TranscriptTurn(start, stop, speaker, str(utterance), line_number))

    turns.sort(key=lambda t: (t.start_s, t.stop_s, t.speaker.value))
    for prev, cur in zip(turns, turns[1:]):
        if cur.start_s < prev.stop_s:
            raise ParseError(
                f"turn {cur.start_s}-{cur.stop_s} overlaps {prev.start_s}-{prev.stop_s}",
                cur.line_number)
    return turns


def read_transcript(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_transcript(f.read())


def format_transcript(turns):
    """Render turns back into the TSV layout parse_transcript reads."""
    rows = [{
        "start_time": f"{t.start_s:.9f}",
        "stop_time": f"{t.stop_s:.9f}",
        "speaker": "Ellie" if t.speaker == Speaker.INTERVIEWER else "Participant",
        "value": t.text,
    } for t in turns]
    df = pd.DataFrame(rows, columns=TRANSCRIPT_COLUMNS)
    return df.to_csv(sep="\t", index=False, lineterminator="\n")


# -----------------
# Segmentation
# -----------------
def _to_sample(t, rate):
    return int(round(t * rate))


def extract_participant_segments(signal, turns, source_id="", min_segment_s=MIN_SEGMENT_S):
    """Cut one segment per Participant turn; Interviewer turns are discarded."""
    n = len(signal)
    rate = signal.sample_rate_hz
    min_samples = _to_sample(min_segment_s, rate)
    segments = []
    dropped = 0
    for turn in turns:
        if turn.speaker != Speaker.PARTICIPANT:
            continue
        a = min(_to_sample(turn.start_s, rate), n)
        b = min(_to_sample(turn.stop_s, rate), n)
        if b - a < max(min_samples, 1):
            dropped += 1
            continue
        segments.append(AudioSignal(signal.samples[a:b], rate))

    if dropped:
        logger.debug("%s: dropped %d participant turns shorter than %.3fs", source_id, dropped, min_segment_s)
    if not segments:
        raise EmptySegmentsError(f"no participant speech in {source_id or 'recording'}")
    return SegmentSet(segments, source_id)


def whole_signal_segments(signal, source_id=""):
    """Treat an entire recording as participant speech (no transcript available)."""
    if len(signal) < _to_sample(MIN_SEGMENT_S, signal.sample_rate_hz):
        raise EmptySegmentsError(f"recording {source_id or ''} is shorter than {MIN_SEGMENT_S}s")
    return SegmentSet([signal], source_id)


def join_segments(segment_set, gap_s=0.0):
    """Lay segments back to back; returns the joined signal and Participant turns covering them.

    Segment boundaries land on exact sample positions so that
    extract_participant_segments recovers the original segments.
    """
    rate = segment_set.sample_rate_hz
    gap = np.zeros(_to_sample(gap_s, rate))
    pieces = []
    turns = []
    pos = 0
    for seg, technique in zip(segment_set.segments, segment_set.techniques):
        start = pos
        pieces.append(seg.samples)
        pos += len(seg)
        turns.append(TranscriptTurn(start / rate, pos / rate, Speaker.PARTICIPANT, technique))
        if gap.size:
            pieces.append(gap)
            pos += gap.size
    samples = np.concatenate(pieces) if pieces else np.zeros(0)
    return AudioSignal(samples, rate), turns
