# file: core/manifest.py
"""Dataset manifest: the CSV contract between a corpus on disk and the pipeline."""

import logging
import os
from dataclasses import dataclass, replace

import pandas as pd

from .errors import LabelError, ManifestError
from .model import Head

logger = logging.getLogger(__name__)

# --- Constants for manifest columns ---
REQUIRED_COLUMNS = ["id", "wav_path", "transcript_path", "label_kind", "label_value", "gender", "split"]
OPTIONAL_COLUMNS = ["task", "source_id", "technique"]

LABEL_RANGES = {
    "phq8_binary": (0, 1),
    "phq8_score": (0, 23),
    "emotion8": (0, 7),
    "bdi2": (0, 63),
}
LABEL_HEADS = {"phq8_binary": Head.PHQ8_BINARY, "phq8_score": Head.PHQ8_SCORE, "emotion8": Head.EMOTION8}
GENDERS = ("F", "M", "unknown")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestRow:
    id: str
    wav_path: str  # absolute
    transcript_path: str  # absolute, or None for "whole file is participant speech"
    label_kind: str
    label_value: int
    gender: str = "unknown"
    split: str = "train"
    task: str = None
    source_id: str = None
    technique: str = "original"

    def with_changes(self, **changes):
        return replace(self, **changes)


def _resolve(base_dir, path):
    if not path:
        return None
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def _check_row(row):
    if row.label_kind not in LABEL_RANGES:
        raise ManifestError(f"{row.id}: unknown label_kind {row.label_kind!r}")
    lo, hi = LABEL_RANGES[row.label_kind]
    if not lo <= row.label_value <= hi:
        raise LabelError(f"{row.id}: {row.label_kind} label {row.label_value} outside {lo}..{hi}")
    if row.gender not in GENDERS:
        raise ManifestError(f"{row.id}: gender must be one of {GENDERS}, got {row.gender!r}")
    if row.split not in SPLITS:
        raise ManifestError(f"{row.id}: split must be one of {SPLITS}, got {row.split!r}")


class DatasetManifest:
    """Ordered, validated manifest rows; ids are unique."""

    def __init__(self, rows, base_dir="."):
        self.rows = list(rows)
        self.base_dir = os.path.abspath(base_dir)
        seen = set()
        for row in self.rows:
            _check_row(row)
            if row.id in seen:
                raise ManifestError(f"duplicate id {row.id!r}")
            seen.add(row.id)

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def filter(self, split=None, gender=None, task=None):
        rows = [r for r in self.rows
                if (split is None or r.split == split or (isinstance(split, (tuple, list)) and r.split in split))
                and (gender is None or r.gender == gender)
                and (task is None or r.task == task)]
        return DatasetManifest(rows, self.base_dir)

    def ids(self):
        return [r.id for r in self.rows]

    @property
    def label_kind(self):
        kinds = sorted({r.label_kind for r in self.rows})
        if len(kinds) != 1:
            raise ManifestError(f"manifest mixes label kinds {kinds}")
        return kinds[0]

    @property
    def head(self):
        kind = self.label_kind
        if kind not in LABEL_HEADS:
            raise LabelError(f"{kind} labels have no training head")
        return LABEL_HEADS[kind]

    def to_frame(self, relative_to=None):
        base = os.path.abspath(relative_to or self.base_dir)
        records = []
        for r in self.rows:
            records.append({
                "id": r.id,
                "wav_path": os.path.relpath(r.wav_path, base),
                "transcript_path": os.path.relpath(r.transcript_path, base) if r.transcript_path else "",
                "label_kind": r.label_kind,
                "label_value": r.label_value,
                "gender": r.gender,
                "split": r.split,
                "task": r.task or "",
                "source_id": r.source_id or r.id,
                "technique": r.technique or "original",
            })
        return pd.DataFrame(records, columns=REQUIRED_COLUMNS + OPTIONAL_COLUMNS)

    def save(self, path):
        out_dir = os.path.dirname(os.path.abspath(path))
        os.makedirs(out_dir, exist_ok=True)
        self.to_frame(out_dir).to_csv(path, index=False, lineterminator="\n")

    def summary(self):
        """Participant counts by gender and label (rows) and split (columns)."""
        df = self.to_frame()
        if df.empty:
            return pd.DataFrame()
        table = pd.crosstab([df["gender"], df["label_value"]], df["split"], margins=True, margins_name="total")
        return table.reindex(columns=[c for c in SPLITS + ("total",) if c in table.columns])


def load_manifest(path):
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ManifestError(f"unreadable manifest {path}: {exc}") from exc

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise ManifestError(f"manifest {path} is missing columns: {', '.join(missing)}")

    base_dir = os.path.dirname(os.path.abspath(path))
    rows = []
    for idx, rec in df.iterrows():
        line = int(idx) + 2
        try:
            value = int(str(rec["label_value"]).strip())
        except ValueError:
            raise ManifestError(f"manifest line {line}: label_value {rec['label_value']!r} is not an integer") from None
        rid = str(rec["id"]).strip()
        if not rid:
            raise ManifestError(f"manifest line {line}: empty id")
        rows.append(ManifestRow(
            id=rid,
            wav_path=_resolve(base_dir, str(rec["wav_path"]).strip()),
            transcript_path=_resolve(base_dir, str(rec["transcript_path"]).strip()),
            label_kind=str(rec["label_kind"]).strip(),
            label_value=value,
            gender=str(rec["gender"]).strip() or "unknown",
            split=str(rec["split"]).strip(),
            task=str(rec.get("task", "")).strip() or None,
            source_id=str(rec.get("source_id", "")).strip() or rid,
            technique=str(rec.get("technique", "")).strip() or "original",
        ))
    manifest = DatasetManifest(rows, base_dir)
    logger.info("Loaded manifest %s: %d rows", path, len(manifest))
    return manifest
