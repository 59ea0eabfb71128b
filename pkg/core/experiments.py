# file: core/experiments.py
"""Experiment protocols that train models: gender split, augmentation and transfer comparisons."""

import logging

import numpy as np

from . import model as mdl
from .evaluation import PER_CLIP, evaluate_checkpoint, stack_participants
from .errors import InsufficientDataError

logger = logging.getLogger(__name__)

GENDER_GROUPS = (("F", "female"), ("M", "male"))


def train_on_participants(arch, train_parts, val_parts, config, frame_spec=None, norm_stats=None,
                          progress=False):
    """Build a fresh model for ``arch`` and train it on the participants' clip sequences."""
    train_x, train_y, _ = stack_participants(train_parts)
    if train_x is None or train_x.shape[0] == 0:
        raise InsufficientDataError("no training sequences")
    val_x, val_y, _ = stack_participants(val_parts)
    ckpt = mdl.build_model(arch, config.seed, frame_spec, norm_stats)
    return mdl.train(ckpt, train_x, train_y, val_x, val_y, config, progress=progress)


def run_gender_split(participants, arch, config, eval_splits=("val", "test"), granularity=PER_CLIP,
                     frame_spec=None, norm_stats=None, progress=False):
    """Train and evaluate one model per gender with the same seed and config.

    Each group is evaluated on its held-out rows (``eval_splits``).
    Returns (female_report, male_report).
    """
    reports = []
    for code, name in GENDER_GROUPS:
        group = [p for p in participants if p.gender == code]
        if len({p.pid for p in group}) < 2:
            raise InsufficientDataError(f"{name} group has fewer than 2 participants")
        train_parts = [p for p in group if p.split == "train"]
        val_parts = [p for p in group if p.split == "val"]
        held_out = [p for p in group if p.split in eval_splits]
        if not train_parts or not held_out:
            raise InsufficientDataError(f"{name} group needs training and held-out participants")
        ckpt, _ = train_on_participants(arch, train_parts, val_parts, config, frame_spec, norm_stats, progress)
        report = evaluate_checkpoint(ckpt, held_out, granularity,
                                     {"experiment": "gender", "gender": name,
                                      "participants": len(group), "evaluated": len(held_out)})
        logger.info("gender %s: accuracy %.4f on %d participants", name, report.accuracy, len(held_out))
        reports.append(report)
    return tuple(reports)


def run_augmentation_experiment(train_parts, augmented_train_parts, val_parts, arch, config,
                                granularity=PER_CLIP, progress=False):
    """Same seed and config with and without the augmented training copies."""
    results = {}
    for name, parts in (("plain", train_parts), ("augmented", augmented_train_parts)):
        ckpt, history = train_on_participants(arch, parts, val_parts, config, progress=progress)
        n_seq = sum(len(p.sequences) for p in parts)
        results[name] = {
            "report": evaluate_checkpoint(ckpt, val_parts, granularity,
                                          {"experiment": "augmentation", "training": name,
                                           "train_sequences": n_seq}),
            "history": history,
            "checkpoint": ckpt,
        }
    return results


def run_transfer_experiment(emotion_train, emotion_val, target_train, target_val, arch, pretrain_config,
                            finetune_config, granularity=PER_CLIP, progress=False):
    """Pretrain on emotions, fine-tune on the target task, and compare with a random-LSTM ablation.

    The ablation freezes a randomly initialized recurrent stack and trains
    the dense layers with exactly the fine-tuning budget.
    """
    em_x, em_y, _ = stack_participants(emotion_train)
    em_vx, em_vy, _ = stack_participants(emotion_val)
    pretrained, pre_history = mdl.pretrain_emotion(arch, em_x, em_y, em_vx, em_vy, pretrain_config,
                                                   progress=progress)

    x, y, _ = stack_participants(target_train)
    vx, vy, _ = stack_participants(target_val)
    head = arch.head
    before = mdl.param_digest(pretrained, "recurrent")
    tuned, tune_history = mdl.fine_tune(pretrained, head, x, y, vx, vy, finetune_config, arch=arch,
                                        progress=progress)
    frozen_ok = mdl.param_digest(tuned, "recurrent") == before

    random_model = mdl.prepare_fine_tune(mdl.build_model(arch.with_head(mdl.Head.EMOTION8),
                                                         finetune_config.seed ^ 0x5EED),
                                         head, arch, finetune_config.seed)
    ablation, ablation_history = mdl.train(random_model, x, y, vx, vy, finetune_config, frozen=True,
                                           progress=progress)

    meta = {"experiment": "transfer"}
    return {
        "pretrained": pretrained,
        "fine_tuned": tuned,
        "frozen_hash_equal": frozen_ok,
        "fine_tuned_report": evaluate_checkpoint(tuned, target_val, granularity, dict(meta, model="fine_tuned")),
        "random_lstm_report": evaluate_checkpoint(ablation, target_val, granularity,
                                                  dict(meta, model="random_lstm")),
        "histories": {"pretrain": pre_history, "fine_tune": tune_history, "random_lstm": ablation_history},
    }


def clip_count(participants):
    return int(np.sum([len(p.sequences) for p in participants]))
