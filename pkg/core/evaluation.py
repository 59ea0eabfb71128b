# file: core/evaluation.py
"""Metrics, evaluation reports and the evaluation-only experiment runners.

Reports are tagged with the granularity they were computed at (per-clip,
per-frame or per-participant) and serialize to JSON. Runners that need to
train models live in ``core.experiments``.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from . import model as mdl
from .augment import corrupt_gaussian
from .errors import ArgumentError, InsufficientDataError, LabelError, ShapeError

logger = logging.getLogger(__name__)

# --- Constants for reporting ---
PER_CLIP = "per-clip"
PER_FRAME = "per-frame"
PER_PARTICIPANT = "per-participant"
GRANULARITIES = (PER_CLIP, PER_FRAME, PER_PARTICIPANT)

BDI_THRESHOLD = 14
BDI_MAX = 63
NOISE_FRACTIONS = (0.1, 1.0)
NOISE_SIGMA = 0.1
TASK_FILTERS = ("taskA", "taskB", "both")
ALL_TASKS = "all"  # run every task filter

CLASS_NAMES = {
    "phq8_binary": ["non-depressed", "depressed"],
    "emotion8": ["neutral", "calm", "happy", "sad", "angry", "fearful", "disgust", "surprised"],
}


def class_names_for(head):
    head = mdl.Head(head)
    return CLASS_NAMES.get(head.value, [str(i) for i in range(head.size)])


@dataclass
class ParticipantSequences:
    """All clip sequences of one participant with its label and metadata."""
    pid: str
    sequences: np.ndarray  # (clips, frames, features)
    label: int
    gender: str = "unknown"
    split: str = "train"
    task: str = None


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, columns = predicted class
    class_names: list

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def to_frame(self):
        return pd.DataFrame(self.counts, index=[f"true {n}" for n in self.class_names],
                            columns=[f"pred {n}" for n in self.class_names])


def confusion(preds, truths, k, class_names=None):
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ShapeError(f"{preds.size} predictions but {truths.size} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise LabelError(f"{name} class outside 0..{k - 1}")
    counts = confusion_matrix(truths, preds, labels=list(range(k))) if preds.size else np.zeros((k, k), int)
    return ConfusionMatrix(counts.astype(np.int64), list(class_names or [str(i) for i in range(k)]))


def _safe_div(a, b):
    return a / b if b else 0.0


def f1_from_precision_recall(precision, recall):
    return _safe_div(2 * precision * recall, precision + recall)


def prf1(cm, c):
    """Precision, recall and F1 of class ``c``; 0/0 counts as 0."""
    counts = cm.counts
    tp = float(counts[c, c])
    fp = float(counts[:, c].sum() - tp)
    fn = float(counts[c, :].sum() - tp)
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    return precision, recall, f1_from_precision_recall(precision, recall)


def rmse_metric(pred_scores, truths_onehot):
    pred = np.asarray(pred_scores, dtype=np.float64)
    truth = np.asarray(truths_onehot, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"scores {pred.shape} and targets {truth.shape} differ")
    if pred.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


@dataclass
class EvalReport:
    accuracy: float
    rmse: float
    per_class: list  # dicts: class, precision, recall, f1, support
    confusion: ConfusionMatrix
    granularity: str
    n_samples: int
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "granularity": self.granularity,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "rmse": self.rmse,
            "per_class": self.per_class,
            "confusion": {"class_names": self.confusion.class_names,
                          "counts": self.confusion.counts.tolist()},
            "metadata": mdl._jsonable(self.metadata),
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        cm = ConfusionMatrix(np.asarray(data["confusion"]["counts"], dtype=np.int64),
                             list(data["confusion"]["class_names"]))
        return cls(data["accuracy"], data["rmse"], list(data["per_class"]), cm,
                   data["granularity"], data["n_samples"], dict(data.get("metadata", {})))

    def render_table(self):
        """Class | Precision | Recall | F1 table with an accuracy row, then the confusion matrix."""
        rows = [{"Class": pc["class"], "Precision": f"{pc['precision']:.2%}",
                 "Recall": f"{pc['recall']:.2%}", "F1": f"{pc['f1']:.2%}",
                 "Support": pc["support"]} for pc in self.per_class]
        rows.append({"Class": "Accuracy", "Precision": "", "Recall": "",
                     "F1": f"{self.accuracy:.2%}", "Support": self.n_samples})
        title = f"[{self.granularity}] accuracy={self.accuracy:.4f} rmse={self.rmse:.4f}"
        if self.metadata:
            title += "  " + " ".join(f"{k}={v}" for k, v in sorted(self.metadata.items()))
        return "\n".join([title, pd.DataFrame(rows).to_string(index=False), "",
                          self.confusion.to_frame().to_string()])


def build_report(pred_classes, scores, truths, k, granularity, class_names=None, metadata=None):
    if granularity not in GRANULARITIES:
        raise ArgumentError(f"granularity must be one of {GRANULARITIES}")
    truths = np.asarray(truths, dtype=np.int64)
    cm = confusion(pred_classes, truths, k, class_names)
    per_class = []
    for c in range(k):
        p, r, f1 = prf1(cm, c)
        per_class.append({"class": cm.class_names[c], "precision": p, "recall": r, "f1": f1,
                          "support": int(cm.counts[c].sum())})
    rmse = rmse_metric(scores, mdl.one_hot(truths, k)) if truths.size else 0.0
    return EvalReport(cm.accuracy, rmse, per_class, cm, granularity, cm.total, dict(metadata or {}))


def evaluate_scores(scores, labels, head, granularity=PER_CLIP, groups=None, frames_per_clip=1,
                    metadata=None):
    """Report from per-clip head outputs.

    per-frame repeats each clip's outcome for its frames; per-participant
    takes the majority vote of a participant's clips (``groups`` gives the
    participant of every clip) and averages its clip scores for the RMSE.
    """
    head = mdl.Head(head)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = head.size
    names = class_names_for(head)
    preds = np.argmax(scores, axis=1) if scores.size else np.zeros(0, np.int64)
    if granularity == PER_FRAME:
        reps = int(frames_per_clip)
        return build_report(np.repeat(preds, reps), np.repeat(scores, reps, axis=0),
                            np.repeat(labels, reps), k, granularity, names, metadata)
    if granularity == PER_PARTICIPANT:
        if groups is None:
            raise ArgumentError("per-participant reports need the participant of every clip")
        groups = np.asarray(groups)
        order = list(dict.fromkeys(groups.tolist()))
        p_preds, p_scores, p_labels = [], [], []
        for pid in order:
            sel = groups == pid
            p_preds.append(mdl.majority_vote(preds[sel], k))
            p_scores.append(scores[sel].mean(axis=0))
            p_labels.append(labels[sel][0])
        return build_report(p_preds, np.asarray(p_scores).reshape(-1, k), p_labels, k, granularity,
                            names, metadata)
    return build_report(preds, scores, labels, k, granularity, names, metadata)


def stack_participants(participants):
    """Concatenate clip sequences; returns (x, labels, groups)."""
    if not participants:
        return None, np.zeros(0, np.int64), np.zeros(0, dtype=object)
    x = np.concatenate([p.sequences for p in participants]).astype(np.float32, copy=False)
    labels = np.concatenate([np.full(len(p.sequences), p.label, np.int64) for p in participants])
    groups = np.concatenate([np.full(len(p.sequences), p.pid, dtype=object) for p in participants])
    return x, labels, groups


def evaluate_checkpoint(ckpt, participants, granularity=PER_CLIP, metadata=None):
    x, labels, groups = stack_participants(participants)
    if x is None or x.shape[0] == 0:
        raise InsufficientDataError("nothing to evaluate")
    scores = mdl.predict_scores(ckpt, x)
    return evaluate_scores(scores, labels, ckpt.head, granularity, groups, x.shape[1], metadata)


def compare_reports(a, b):
    """Metric deltas (b - a); refuses reports of different granularity."""
    if a.granularity != b.granularity:
        raise ArgumentError(f"cannot compare a {a.granularity} report with a {b.granularity} report")
    if a.confusion.class_names != b.confusion.class_names:
        raise ArgumentError("reports cover different classes")
    return {
        "granularity": a.granularity,
        "accuracy": b.accuracy - a.accuracy,
        "rmse": b.rmse - a.rmse,
        "f1": {pa["class"]: pb["f1"] - pa["f1"] for pa, pb in zip(a.per_class, b.per_class)},
    }


# -----------------
# Experiment runners (no training)
# -----------------
def run_noise_robustness(ckpt, val_x, val_y, fractions=NOISE_FRACTIONS, sigma=NOISE_SIGMA, seed=0,
                         granularity=PER_CLIP, groups=None):
    """Clean report followed by one report per corrupted fraction of the validation frames."""
    val_x = np.asarray(val_x, dtype=np.float32)
    reports = []
    for fraction in (0.0,) + tuple(fractions):
        rng = np.random.default_rng(seed)
        x = corrupt_gaussian(val_x, fraction, sigma, rng).astype(np.float32) if fraction else val_x
        scores = mdl.predict_scores(ckpt, x)
        meta = {"experiment": "noise", "fraction": float(fraction), "sigma": float(sigma)}
        report = evaluate_scores(scores, val_y, ckpt.head, granularity, groups, val_x.shape[1], meta)
        logger.info("noise fraction %.2f: accuracy %.4f rmse %.4f", fraction, report.accuracy, report.rmse)
        reports.append(report)
    return reports


def binarize_bdi(score):
    """BDI-II score 0..63 -> 0 below the threshold of 14, else 1."""
    if isinstance(score, bool) or not float(score).is_integer() or not 0 <= score <= BDI_MAX:
        raise LabelError(f"BDI-II score must be an integer in 0..{BDI_MAX}, got {score!r}")
    return 0 if score < BDI_THRESHOLD else 1


def run_generalization(ckpt, participants, task_filter="both", label_kind="bdi2", granularity=PER_CLIP):
    """Evaluate a PHQ-8 binary model on a foreign corpus without retraining."""
    if ckpt.head is not mdl.Head.PHQ8_BINARY:
        raise LabelError(f"generalization needs a phq8_binary model, got {ckpt.head.value}")
    if task_filter not in TASK_FILTERS:
        raise ArgumentError(f"task filter must be one of {TASK_FILTERS}")
    selected = [p for p in participants if task_filter == "both" or p.task == task_filter]
    if not selected:
        raise InsufficientDataError(f"no participants for task filter {task_filter}")
    if label_kind == "bdi2":
        selected = [ParticipantSequences(p.pid, p.sequences, binarize_bdi(p.label), p.gender, p.split, p.task)
                    for p in selected]
    elif label_kind != "phq8_binary":
        raise LabelError(f"cannot evaluate a binary model on {label_kind} labels")
    meta = {"experiment": "generalize", "task": task_filter, "participants": len(selected)}
    return evaluate_checkpoint(ckpt, selected, granularity, meta)


def run_generalization_suite(ckpt, participants, label_kind="bdi2", granularity=PER_CLIP):
    """Reports for taskA, taskB and both (tasks with no participants are skipped)."""
    reports = {}
    for task in TASK_FILTERS:
        try:
            reports[task] = run_generalization(ckpt, participants, task, label_kind, granularity)
        except InsufficientDataError:
            logger.warning("generalization: no participants for %s", task)
    return reports
