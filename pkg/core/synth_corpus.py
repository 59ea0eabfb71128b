# file: core/synth_corpus.py
"""Deterministic synthetic interview corpora.

Each participant recording alternates interviewer and participant turns.
Participant speech is a harmonic tone whose fundamental band, harmonic count
and amplitude-modulation rate depend on the participant's class, so a small
recurrent model can learn the labels from MFCCs.
"""

import logging
import os
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from .audio_io import (AudioSignal, Speaker, TranscriptTurn, extract_participant_segments,
                       format_transcript, read_transcript, read_wav, write_wav)
from .dsp_features import FrameSpec, extract_features
from .errors import ArgumentError, InsufficientDataError
from .manifest import DatasetManifest, ManifestRow
from .run_config import derive_seed

logger = logging.getLogger(__name__)

# --- Constants for the synthetic voices ---
SCHEMES = {
    # scheme: (cue classes, manifest label kind)
    "binary2": (2, "phq8_binary"),
    "severity24": (24, "phq8_score"),
    "emotion8": (8, "emotion8"),
    "bdi": (2, "bdi2"),
}
F0_LOW_HZ = 90.0
F0_SPAN_HZ = 240.0
F0_JITTER = 0.015
BASE_HARMONICS = 3
AM_BASE_HZ = 2.0
AM_STEP_HZ = 0.5
AM_DEPTH = 0.3
VOICE_AMPLITUDE = 0.5
NOISE_STD = 0.005
INTERVIEWER_F0_HZ = 200.0
INTERVIEWER_TURN_S = 1.5
PARTICIPANT_TURN_S = 4.0
HOLDOUT_FRACTION = 0.1
MIN_CLASS_MEMBERS = 3  # one each for train, val and test
SEPARABILITY_CEPS = slice(1, 6)  # static c1..c5


@dataclass(frozen=True)
class SynthSpec:
    n_participants: int = 20
    scheme: str = "binary2"
    seed: int = 0
    duration_s: float = 60.0
    sample_rate_hz: int = 16000
    id_prefix: str = "P"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ArgumentError(f"scheme must be one of {sorted(SCHEMES)}")
        if self.n_participants < 2:
            raise ArgumentError("n_participants must be >= 2")
        if self.n_participants < self.n_classes:
            raise ArgumentError(f"{self.scheme} needs at least {self.n_classes} participants "
                                f"so every class is represented")
        if self.n_participants < MIN_CLASS_MEMBERS * self.n_classes:
            raise InsufficientDataError(f"{self.scheme} needs at least {MIN_CLASS_MEMBERS * self.n_classes} "
                                        f"participants so every split holds every class")
        if self.duration_s < INTERVIEWER_TURN_S + 1.0:
            raise ArgumentError("duration_s too short for one interviewer and one participant turn")

    @property
    def n_classes(self):
        return SCHEMES[self.scheme][0]

    @property
    def label_kind(self):
        return SCHEMES[self.scheme][1]


def class_cues(c, n_classes):
    """(fundamental Hz, harmonic count, AM rate Hz) for cue class ``c``."""
    f0 = F0_LOW_HZ + F0_SPAN_HZ * c / max(n_classes - 1, 1)
    return f0, BASE_HARMONICS + c % 5, AM_BASE_HZ + AM_STEP_HZ * (c % 8)


def _voice(n, rate, f0, harmonics, am_hz, rng):
    t = np.arange(n) / rate
    phases = rng.uniform(0, 2 * np.pi, size=harmonics)
    weights = 1.0 / np.arange(1, harmonics + 1)
    tone = sum(w * np.sin(2 * np.pi * h * f0 * t + p)
               for h, w, p in zip(range(1, harmonics + 1), weights, phases)) / weights.sum()
    envelope = (1.0 + AM_DEPTH * np.sin(2 * np.pi * am_hz * t + rng.uniform(0, 2 * np.pi))) / (1.0 + AM_DEPTH)
    return VOICE_AMPLITUDE * tone * envelope


def timeline(duration_s):
    """Alternating interviewer/participant turns covering ``duration_s``."""
    turns = []
    t = 0.0
    speakers = [(Speaker.INTERVIEWER, INTERVIEWER_TURN_S), (Speaker.PARTICIPANT, PARTICIPANT_TURN_S)]
    k = 0
    while t < duration_s:
        speaker, length = speakers[k % 2]
        stop = min(t + length, duration_s)
        if stop - t >= 0.1:
            turns.append(TranscriptTurn(round(t, 6), round(stop, 6), speaker,
                                        "question" if speaker == Speaker.INTERVIEWER else "answer"))
        t = stop
        k += 1
    return turns


def render_participant(cue_class, n_classes, spec, rng):
    rate = spec.sample_rate_hz
    n = int(round(spec.duration_s * rate))
    samples = np.zeros(n)
    f0, harmonics, am_hz = class_cues(cue_class, n_classes)
    f0 *= 1.0 + rng.uniform(-F0_JITTER, F0_JITTER)
    turns = timeline(spec.duration_s)
    for turn in turns:
        a, b = int(round(turn.start_s * rate)), min(int(round(turn.stop_s * rate)), n)
        if turn.speaker == Speaker.INTERVIEWER:
            samples[a:b] = _voice(b - a, rate, INTERVIEWER_F0_HZ, 3, 3.0, rng)
        else:
            samples[a:b] = _voice(b - a, rate, f0, harmonics, am_hz, rng)
    samples += rng.normal(0.0, NOISE_STD, size=n)
    return AudioSignal(np.clip(samples, -1.0, 1.0), rate), turns


def assign_splits(classes):
    """Per class: last members to test, the ones before to validation, the rest to train."""
    classes = np.asarray(classes)
    splits = np.array(["train"] * len(classes), dtype=object)
    for c in np.unique(classes):
        members = np.flatnonzero(classes == c)
        if len(members) < MIN_CLASS_MEMBERS:
            raise InsufficientDataError(f"class {c} has {len(members)} members, "
                                        f"stratified splits need {MIN_CLASS_MEMBERS}")
        hold = max(1, int(round(HOLDOUT_FRACTION * len(members))))
        splits[members[-hold:]] = "test"
        splits[members[-2 * hold:-hold]] = "val"
    return splits.tolist()


def generate(spec, out_dir, progress=False):
    """Write WAVs, transcripts and manifest.csv for ``spec`` under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    k = spec.n_classes
    cue = [i % k for i in range(spec.n_participants)]
    splits = assign_splits(cue)

    rows = []
    for i in tqdm(range(spec.n_participants), desc=f"synth {spec.scheme}", disable=not progress, leave=False):
        rng = np.random.default_rng(derive_seed(spec.seed, "synth", i))
        pid = f"{spec.id_prefix}{i:03d}"
        signal, turns = render_participant(cue[i], k, spec, rng)
        wav_path = os.path.join(out_dir, f"{pid}.wav")
        tsv_path = os.path.join(out_dir, f"{pid}.tsv")
        write_wav(wav_path, signal)
        with open(tsv_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(format_transcript(turns))

        label = cue[i]
        task = None
        if spec.scheme == "bdi":
            label = int(rng.integers(0, 14)) if cue[i] == 0 else int(rng.integers(14, 64))
            task = "taskA" if (i // k) % 2 == 0 else "taskB"
        rows.append(ManifestRow(pid, os.path.abspath(wav_path), os.path.abspath(tsv_path), spec.label_kind,
                                label, "F" if (i // (2 * k)) % 2 == 0 else "M", splits[i], task, pid))

    manifest = DatasetManifest(rows, out_dir)
    manifest.save(os.path.join(out_dir, "manifest.csv"))
    logger.info("Synthesized %d %s participants in %s", len(rows), spec.scheme, out_dir)
    return manifest


def measure_separability(manifest, frame_spec=None, cue_of=None):
    """Smallest centroid distance between classes divided by the pooled within-class std.

    Uses clip means of static c1..c5. ``cue_of`` maps a row to its class
    (defaults to the label value).
    """
    frame_spec = frame_spec or FrameSpec()
    cue_of = cue_of or (lambda row: row.label_value)
    points, classes = [], []
    for row in manifest:
        signal = read_wav(row.wav_path)
        segments = extract_participant_segments(signal, read_transcript(row.transcript_path), row.id)
        clips = extract_features(segments, frame_spec).clip_sequences()
        points.append(clips[:, :, SEPARABILITY_CEPS].mean(axis=1))
        classes += [cue_of(row)] * clips.shape[0]
    points = np.concatenate(points)
    classes = np.asarray(classes)
    labels = np.unique(classes)
    if len(labels) < 2:
        raise InsufficientDataError("separability needs at least two classes")
    centroids = np.stack([points[classes == c].mean(axis=0) for c in labels])
    within = np.sqrt(np.mean([np.sum((points[classes == c] - centroids[j]) ** 2, axis=1).mean()
                              for j, c in enumerate(labels)]))
    gaps = [np.linalg.norm(centroids[a] - centroids[b])
            for a in range(len(labels)) for b in range(a + 1, len(labels))]
    return float(min(gaps) / max(within, 1e-12))
