"""
Tests for the experiment protocols that train models (small networks, few epochs).
"""
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import model as mdl
from core.errors import InsufficientDataError
from core.evaluation import ParticipantSequences
from core.experiments import (clip_count, run_augmentation_experiment, run_gender_split,
                              run_transfer_experiment, train_on_participants)

SMALL = mdl.ArchitectureSpec(input_dim=4, lstm_units=(4,), dense_units=(3,))
QUICK = mdl.TrainConfig(batch_size=8, epochs=2, seed=4)


def _people(n, seed, k=2, clips=3, genders=("F", "M"), splits=("train", "train", "val", "test")):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = i % k
        x = rng.normal(size=(clips, 5, 4)) + (label - (k - 1) / 2)
        out.append(ParticipantSequences(f"S{seed}_{i}", x.astype(np.float32), label,
                                        genders[(i // k) % len(genders)], splits[(i // (2 * k)) % len(splits)]))
    return out


def test_clip_count():
    assert clip_count(_people(5, 0)) == 15
    assert clip_count([]) == 0


def test_train_on_participants_needs_data():
    with pytest.raises(InsufficientDataError):
        train_on_participants(SMALL, [], [], QUICK)
    ckpt, history = train_on_participants(SMALL, _people(4, 1), [], QUICK)
    assert len(history) == 2 and history[0]["val_rmse"] is None


def test_gender_split_is_deterministic():
    people = _people(32, 2)
    female, male = run_gender_split(people, SMALL, QUICK)
    assert female.metadata["gender"] == "female" and male.metadata["gender"] == "male"
    again = run_gender_split(people, SMALL, QUICK)
    assert (female.accuracy, female.rmse, male.accuracy, male.rmse) == \
           (again[0].accuracy, again[0].rmse, again[1].accuracy, again[1].rmse)
    held_out = [p for p in people if p.split in ("val", "test")]
    assert female.n_samples + male.n_samples == clip_count(held_out)


def test_gender_split_needs_two_participants_per_group():
    people = _people(8, 3, genders=("F",))
    with pytest.raises(InsufficientDataError):
        run_gender_split(people, SMALL, QUICK)


def test_augmentation_experiment_compares_two_runs():
    train = _people(4, 4)
    augmented = train + _people(8, 5)
    val = _people(4, 6)
    results = run_augmentation_experiment(train, augmented, val, SMALL, QUICK)
    assert set(results) == {"plain", "augmented"}
    assert results["plain"]["report"].metadata["train_sequences"] == 12
    assert results["augmented"]["report"].metadata["train_sequences"] == 36
    assert results["plain"]["report"].n_samples == results["augmented"]["report"].n_samples == 12


def test_transfer_experiment_keeps_frozen_weights():
    emotions = _people(16, 7, k=8)
    target = _people(8, 8)
    results = run_transfer_experiment(emotions, emotions[:8], target, target[:4], SMALL, QUICK, QUICK)
    assert results["frozen_hash_equal"]
    assert results["pretrained"].head is mdl.Head.EMOTION8
    assert results["fine_tuned"].head is mdl.Head.PHQ8_BINARY
    assert mdl.param_digest(results["fine_tuned"]) == mdl.param_digest(results["pretrained"])
    assert results["fine_tuned_report"].metadata["model"] == "fine_tuned"
    assert results["random_lstm_report"].n_samples == results["fine_tuned_report"].n_samples
