# file: core/pipeline.py
"""Pipeline commands behind the CLI.

Each ``cmd_*`` function takes paths and a RunConfig, writes its outputs and
returns a plain dict summary. Per-row ingestion problems do not stop
``cmd_extract``/``cmd_augment``; they are collected under ``failures``.
"""

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import model as mdl
from . import plot_manager as plots
from .audio_io import (CANONICAL_RATE_HZ, SegmentSet, extract_participant_segments, format_transcript,
                       join_segments, read_transcript, read_wav, whole_signal_segments, write_wav)
from .augment import TECHNIQUES, augment_dataset
from .dsp_features import (apply_norm, clip_starts, extract_features, fit_norm_stats, load_features,
                           load_norm_stats, save_features, save_norm_stats)
from .errors import (ArgumentError, FormatError, InsufficientDataError, LabelError, SdrError,
                     UnsupportedError)
from .evaluation import (ALL_TASKS, EvalReport, ParticipantSequences, compare_reports, evaluate_checkpoint,
                         run_generalization, run_generalization_suite, run_noise_robustness,
                         stack_participants)
from .experiments import clip_count, run_gender_split
from .manifest import LABEL_HEADS, DatasetManifest, load_manifest
from .run_config import derive_seed
from .synth_corpus import SynthSpec, generate

logger = logging.getLogger(__name__)

# --- Constants for pipeline outputs ---
THREADS_ENV = "SDR_THREADS"
RAW_DIR = "raw"
NORM_FILE = "train.nrm"
FEATURE_EXT = ".fmx"
CKPT_EXT = ".ckpt"
EXPERIMENTS = ("basic", "noise", "gender", "generalize")
GENERALIZE_KINDS = ("bdi2", "phq8_binary")


def thread_count():
    """Worker cap from SDR_THREADS (default: CPU count)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ArgumentError(f"{THREADS_ENV} must be >= 1")
    return n


def _write_json(path, doc):
    out_dir = os.path.dirname(os.path.abspath(path))
    os.makedirs(out_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(mdl._jsonable(doc), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _out_base(out):
    return out[:-len(CKPT_EXT)] if out.endswith(CKPT_EXT) else out


def load_segments(wav_path, transcript_path, source_id, sample_rate_hz):
    """Participant segments of one recording; the whole file when there is no transcript."""
    signal = read_wav(wav_path)
    if signal.sample_rate_hz != sample_rate_hz:
        raise UnsupportedError(f"{source_id}: sample rate {signal.sample_rate_hz} Hz, "
                               f"pipeline expects {sample_rate_hz} Hz")
    if not transcript_path:
        return whole_signal_segments(signal, source_id)
    return extract_participant_segments(signal, read_transcript(transcript_path), source_id)


def _row_features(row, config):
    segments = load_segments(row.wav_path, row.transcript_path, row.id, config.experiment.sample_rate_hz)
    return extract_features(segments, config.frame)


def _run_rows(rows, work, desc, progress):
    """Apply ``work`` to every row on a thread pool; returns ({id: result}, [(id, message)])."""
    results, failures = {}, []

    def guarded(row):
        try:
            return row.id, work(row), None
        except (SdrError, OSError) as exc:
            return row.id, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        for rid, result, error in tqdm(pool.map(guarded, rows), total=len(rows), desc=desc,
                                       disable=not progress, leave=False):
            if error is None:
                results[rid] = result
            else:
                logger.error("Skipping %s: %s", rid, error)
                failures.append((rid, error))
    return results, failures


# -----------------
# extract
# -----------------
def cmd_extract(manifest_path, config, out_dir, progress=False):
    """Raw features per row, train-only NormStats, then normalized features per row."""
    manifest = load_manifest(manifest_path)
    raw_dir = os.path.join(out_dir, RAW_DIR)
    os.makedirs(raw_dir, exist_ok=True)

    def work(row):
        fm = _row_features(row, config)
        save_features(os.path.join(raw_dir, row.id + FEATURE_EXT), fm)
        return fm

    raw, failures = _run_rows(manifest.rows, work, "extract", progress)
    train_ids = [r.id for r in manifest.rows if r.split == "train" and r.id in raw]
    if not train_ids:
        raise InsufficientDataError("no training row produced features; cannot fit normalization")
    stats = fit_norm_stats([raw[rid] for rid in train_ids])
    norm_path = os.path.join(out_dir, NORM_FILE)
    save_norm_stats(norm_path, stats)

    written = 0
    for row in manifest.rows:
        if row.id not in raw:
            continue
        save_features(os.path.join(out_dir, row.id + FEATURE_EXT), apply_norm(raw[row.id], stats))
        written += 1

    logger.info("Extracted %d/%d rows (%d train rows fit the normalization), %d failed",
                written, len(manifest), len(train_ids), len(failures))
    return {"features": written, "rows": len(manifest), "train_rows": len(train_ids),
            "norm_stats": norm_path, "failures": failures}


def load_participants(manifest, features_dir, split=None):
    """ParticipantSequences for the manifest rows (optionally one split) from ``.fmx`` files."""
    rows = manifest.filter(split=split).rows if split else manifest.rows
    parts = []
    for row in rows:
        path = os.path.join(features_dir, row.id + FEATURE_EXT)
        if not os.path.exists(path):
            raise ArgumentError(f"missing features for {row.id} ({path}); run extract first")
        fm = load_features(path)
        if not fm.normalized:
            logger.warning("%s: features are not normalized", row.id)
        parts.append(ParticipantSequences(row.id, fm.clip_sequences(), row.label_value, row.gender,
                                          row.split, row.task))
    return parts


def participants_on_the_fly(manifest, frame_spec, norm_stats, sample_rate_hz, progress=False):
    """Extract and normalize every row with a checkpoint's own FrameSpec and NormStats."""
    parts = []
    for row in tqdm(manifest.rows, desc="features", disable=not progress, leave=False):
        segments = load_segments(row.wav_path, row.transcript_path, row.id, sample_rate_hz)
        fm = extract_features(segments, frame_spec)
        if norm_stats is not None:
            fm = apply_norm(fm, norm_stats)
        parts.append(ParticipantSequences(row.id, fm.clip_sequences(), row.label_value, row.gender,
                                          row.split, row.task))
    return parts


def _norm_stats_from(features_dir):
    path = os.path.join(features_dir, NORM_FILE)
    return load_norm_stats(path) if os.path.exists(path) else None


# -----------------
# augment
# -----------------
def cmd_augment(manifest_path, config, out_dir, progress=False, make_plots=False):
    """Write noise/pitch/shift/speed copies of every train row and the expanded manifest."""
    manifest = load_manifest(manifest_path)
    train_rows = manifest.filter(split="train").rows
    if not train_rows:
        raise InsufficientDataError("augmentation needs at least one train row")
    os.makedirs(out_dir, exist_ok=True)
    index_of = {row.id: i for i, row in enumerate(manifest.rows)}
    rate = config.experiment.sample_rate_hz

    def work(row):
        segments = load_segments(row.wav_path, row.transcript_path, row.id, rate)
        augmented = augment_dataset(segments, config.augment_config(index_of[row.id]))
        new_rows = []
        for technique in TECHNIQUES:
            picked = [s for s, t in zip(augmented.segments, augmented.techniques) if t == technique]
            if not any(clip_starts(len(s), config.frame, rate) for s in picked):
                logger.warning("%s/%s: every augmented segment is too short for a clip", row.id, technique)
            signal, turns = join_segments(SegmentSet(picked, row.id, [technique] * len(picked)))
            new_id = f"{row.id}__{technique}"
            wav_path = os.path.join(out_dir, new_id + ".wav")
            tsv_path = os.path.join(out_dir, new_id + ".tsv")
            write_wav(wav_path, signal)
            with open(tsv_path, "w", encoding="utf-8", newline="\n") as f:
                f.write(format_transcript(turns))
            new_rows.append(row.with_changes(id=new_id, wav_path=os.path.abspath(wav_path),
                                             transcript_path=os.path.abspath(tsv_path),
                                             source_id=row.id, technique=technique))
        return segments, augmented, new_rows

    results, failures = _run_rows(train_rows, work, "augment", progress)

    rows = []
    for row in manifest.rows:
        rows.append(row)
        if row.id in results:
            rows.extend(results[row.id][2])
    expanded = DatasetManifest(rows, out_dir)
    out_manifest = os.path.join(out_dir, "manifest.csv")
    expanded.save(out_manifest)

    if make_plots and results:
        first = next(r.id for r in train_rows if r.id in results)
        segments, augmented, _ = results[first]
        for technique in TECHNIQUES:
            pos = augmented.techniques.index(technique)
            fig = plots.create_waveform_comparison(segments.segments[0], augmented.segments[pos], technique,
                                                   title=first)
            plots.save_figure(fig, os.path.join(out_dir, "plots", f"{first}__{technique}.png"))

    n_train = len(expanded.filter(split="train"))
    logger.info("Augmented %d train rows into %d; %d failed", len(results), n_train, len(failures))
    return {"manifest": out_manifest, "rows": len(expanded), "train_rows": n_train, "failures": failures}


# -----------------
# train / pretrain / finetune
# -----------------
def _write_history(out, history, title, make_plots):
    base = _out_base(out)
    _write_json(base + ".history.json", history)
    pd.DataFrame(history).to_csv(base + ".history.csv", index=False, lineterminator="\n")
    if make_plots:
        plots.save_figure(plots.create_training_curves(history, title), base + ".history.png")


def _training_data(manifest, features_dir):
    train_parts = load_participants(manifest, features_dir, "train")
    if not train_parts:
        raise InsufficientDataError("manifest has no train rows")
    val_parts = load_participants(manifest, features_dir, "val")
    logger.info("Training on %d clips (%d participants), validating on %d clips",
                clip_count(train_parts), len(train_parts), clip_count(val_parts))
    x, y, _ = stack_participants(train_parts)
    vx, vy, _ = stack_participants(val_parts)
    return x, y, vx, vy


def _save_trained(ckpt, history, out, make_plots, title):
    out = out if out.endswith(CKPT_EXT) else out + CKPT_EXT
    mdl.save_checkpoint(out, ckpt)
    _write_history(out, history, title, make_plots)
    logger.info("Wrote %s (best epoch %s)", out, ckpt.provenance.get("best_epoch"))
    return {"checkpoint": out, "epochs": len(history), "history": history,
            "best_epoch": ckpt.provenance.get("best_epoch")}


def cmd_train(manifest_path, config, features_dir, out, progress=False, make_plots=False):
    manifest = load_manifest(manifest_path)
    arch = config.arch.with_head(manifest.head)
    x, y, vx, vy = _training_data(manifest, features_dir)
    train_cfg = config.train_config("train")
    ckpt = mdl.build_model(arch, train_cfg.seed, config.frame, _norm_stats_from(features_dir))
    ckpt, history = mdl.train(ckpt, x, y, vx, vy, train_cfg, progress=progress)
    return _save_trained(ckpt, history, out, make_plots, f"train {arch.head.value}")


def cmd_pretrain(manifest_path, config, features_dir, out, progress=False, make_plots=False):
    manifest = load_manifest(manifest_path)
    if manifest.head is not mdl.Head.EMOTION8:
        raise LabelError(f"pretraining needs emotion8 labels, manifest has {manifest.label_kind}")
    x, y, vx, vy = _training_data(manifest, features_dir)
    ckpt, history = mdl.pretrain_emotion(config.arch, x, y, vx, vy, config.train_config("pretrain"),
                                         config.frame, _norm_stats_from(features_dir), progress=progress)
    return _save_trained(ckpt, history, out, make_plots, "pretrain emotion8")


def cmd_finetune(manifest_path, config, features_dir, pretrained_path, out, progress=False, make_plots=False):
    if not pretrained_path:
        raise ArgumentError("finetune needs --pretrained")
    manifest = load_manifest(manifest_path)
    pretrained = mdl.load_checkpoint(pretrained_path)
    head = manifest.head
    x, y, vx, vy = _training_data(manifest, features_dir)
    before = mdl.param_digest(pretrained, "recurrent")
    ckpt, history = mdl.fine_tune(pretrained, head, x, y, vx, vy, config.train_config("finetune"),
                                  arch=config.arch.with_head(head), norm_stats=_norm_stats_from(features_dir),
                                  progress=progress)
    result = _save_trained(ckpt, history, out, make_plots, f"fine-tune {head.value}")
    result["recurrent_digest"] = before
    result["frozen_hash_equal"] = mdl.param_digest(ckpt, "recurrent") == before
    return result


# -----------------
# evaluate
# -----------------
def _check_kind(ckpt, manifest):
    kind = manifest.label_kind
    if LABEL_HEADS.get(kind) is not ckpt.head:
        raise LabelError(f"{ckpt.head.value} model cannot be evaluated on {kind} labels")


def _eval_participants(ckpt, manifest, features_dir, config, progress):
    if features_dir:
        return load_participants(manifest, features_dir)
    return participants_on_the_fly(manifest, ckpt.frame_spec, ckpt.norm_stats,
                                   config.experiment.sample_rate_hz, progress)


def cmd_evaluate(checkpoint_path, manifest_path, config, experiment="basic", features_dir=None, out=None,
                 split=None, progress=False, make_plots=False):
    """Run one evaluation protocol; returns (and optionally writes) ``{"reports": [...]}``."""
    if experiment not in EXPERIMENTS:
        raise ArgumentError(f"experiment must be one of {EXPERIMENTS}")
    manifest = load_manifest(manifest_path)
    exp = config.experiment
    split = split or exp.eval_split
    ckpt = None
    if experiment != "gender":
        if not checkpoint_path:
            raise ArgumentError(f"{experiment} evaluation needs --checkpoint")
        ckpt = mdl.load_checkpoint(checkpoint_path)

    if experiment == "basic":
        _check_kind(ckpt, manifest)
        parts = _eval_participants(ckpt, manifest.filter(split=split), features_dir, config, progress)
        reports = [evaluate_checkpoint(ckpt, parts, exp.granularity, {"experiment": "basic", "split": split})]
    elif experiment == "noise":
        _check_kind(ckpt, manifest)
        parts = _eval_participants(ckpt, manifest.filter(split=split), features_dir, config, progress)
        x, y, groups = stack_participants(parts)
        if x is None:
            raise InsufficientDataError(f"no {split} rows to corrupt")
        reports = run_noise_robustness(ckpt, x, y, exp.noise_fractions, exp.noise_sigma,
                                       derive_seed(config.seed, "noise"), exp.granularity, groups)
        for report in reports:
            report.metadata["split"] = split
    elif experiment == "gender":
        if not features_dir:
            raise ArgumentError("gender evaluation trains per group and needs --features")
        head = manifest.head
        reports = list(run_gender_split(load_participants(manifest, features_dir), config.arch.with_head(head),
                                        config.train_config("gender"), exp.gender_eval_splits,
                                        exp.granularity, config.frame, _norm_stats_from(features_dir),
                                        progress))
    else:
        kind = manifest.label_kind
        if kind not in GENERALIZE_KINDS:
            raise LabelError(f"generalization reads bdi2 or phq8_binary labels, manifest has {kind}")
        parts = participants_on_the_fly(manifest, ckpt.frame_spec, ckpt.norm_stats, exp.sample_rate_hz, progress)
        if exp.task_filter == ALL_TASKS:
            suite = run_generalization_suite(ckpt, parts, kind, exp.granularity)
            if not suite:
                raise InsufficientDataError("no participants to generalize to")
            reports = list(suite.values())
        else:
            reports = [run_generalization(ckpt, parts, exp.task_filter, kind, exp.granularity)]

    doc = {"reports": [r.to_dict() for r in reports]}
    for report in reports:
        logger.info("\n%s", report.render_table())
    if out:
        _write_json(out, doc)
        if make_plots:
            base = os.path.splitext(out)[0]
            for i, report in enumerate(reports):
                plots.save_figure(plots.create_confusion_heatmap(report), f"{base}.confusion{i}.png")
    return doc


def _read_reports(path):
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if not isinstance(doc, dict) or "reports" not in doc:
        raise FormatError(f"{path} is not an evaluate output")
    return [EvalReport.from_dict(r) for r in doc["reports"]]


def cmd_compare(baseline_path, candidate_path):
    """Diff two checkpoints (bit identity and group digests) or two evaluate outputs (metric deltas)."""
    if baseline_path.endswith(CKPT_EXT) and candidate_path.endswith(CKPT_EXT):
        a, b = mdl.load_checkpoint(baseline_path), mdl.load_checkpoint(candidate_path)
        digests = {group: {"baseline": mdl.param_digest(a, group), "candidate": mdl.param_digest(b, group)}
                   for group in ("recurrent", "dense")}
        equal = mdl.checkpoints_equal(a, b)
        logger.info("Checkpoints %s", "identical" if equal else "differ")
        return {"kind": "checkpoint", "equal": equal, "digests": digests}

    baseline, candidate = _read_reports(baseline_path), _read_reports(candidate_path)
    if len(baseline) != len(candidate):
        raise ArgumentError(f"{baseline_path} has {len(baseline)} reports, {candidate_path} has {len(candidate)}")
    deltas = []
    for a, b in zip(baseline, candidate):
        delta = compare_reports(a, b)
        delta["metadata"] = mdl._jsonable(b.metadata)
        deltas.append(delta)
        logger.info("accuracy %+.4f rmse %+.4f  %s", delta["accuracy"], delta["rmse"], b.metadata)
    return {"kind": "report", "deltas": deltas}


# -----------------
# predict
# -----------------
def cmd_predict(checkpoint_path, wav_path, transcript_path=None, config=None):
    """Per-clip predictions of one recording plus the participant-level majority vote."""
    ckpt = mdl.load_checkpoint(checkpoint_path)
    rate = config.experiment.sample_rate_hz if config is not None else CANONICAL_RATE_HZ
    started = time.perf_counter()
    segments = load_segments(wav_path, transcript_path, os.path.basename(wav_path), rate)
    fm = extract_features(segments, ckpt.frame_spec)
    if ckpt.norm_stats is not None:
        fm = apply_norm(fm, ckpt.norm_stats)
    sequences = fm.clip_sequences().astype(np.float32)
    origins = fm.clip_origins()

    clips, latencies = [], []
    for i, seq in enumerate(sequences):
        t0 = time.perf_counter()
        pred = mdl.forward(ckpt, seq)
        latencies.append(time.perf_counter() - t0)
        clips.append({"index": i, "segment": int(origins[i][0]), "clip": int(origins[i][1]),
                      "predicted_class": pred.predicted_class,
                      "scores": [float(s) for s in pred.scores]})
    wall = time.perf_counter() - started
    vote = mdl.majority_vote([c["predicted_class"] for c in clips], ckpt.head.size)
    logger.info("%s: %d clips, majority class %d, %.4fs (%.2f ms per clip)", wav_path, len(clips), vote, wall,
                1000 * float(np.mean(latencies)))
    return {"task": ckpt.head.value, "n_clips": len(clips), "clips": clips, "majority_vote": vote,
            "wall_time_s": wall, "mean_clip_latency_s": float(np.mean(latencies))}


# -----------------
# synth
# -----------------
def cmd_synth(out_dir, n_participants=20, scheme="binary2", seed=0, duration_s=60.0, sample_rate_hz=16000,
              progress=False, make_plots=False):
    spec = SynthSpec(n_participants, scheme, seed, duration_s, sample_rate_hz)
    manifest = generate(spec, out_dir, progress)
    summary = manifest.summary()
    logger.info("Corpus repartition:\n%s", summary.to_string())
    if make_plots:
        plots.save_figure(plots.create_class_distribution_chart(summary),
                          os.path.join(out_dir, "repartition.png"))
    return {"manifest": os.path.join(out_dir, "manifest.csv"), "rows": len(manifest),
            "scheme": scheme, "seed": seed}
