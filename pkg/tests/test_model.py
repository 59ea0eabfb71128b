"""
Tests for the recurrent model: construction, gradients of the full stack,
training, transfer and checkpoint files.
"""
import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core import model as mdl
from core import nn_core as nn
from core.dsp_features import NormStats
from core.errors import (ArchError, ArgumentError, FormatError, InsufficientDataError, LabelError,
                         ShapeError, VersionError)

SMALL = mdl.ArchitectureSpec(input_dim=4, lstm_units=(5, 3), dense_units=(4,))


def _toy_data(n, seed, k=2, T=6, dim=4, offset=2.0):
    """Sequences whose mean encodes the class."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % k
    x = rng.normal(size=(n, T, dim)) + offset * (y[:, None, None] - (k - 1) / 2)
    return x.astype(np.float32), y


def _to_float64(ckpt):
    for layer in ckpt.lstm + ckpt.dense + ckpt.bn:
        for name, arr in layer.arrays().items():
            setattr(layer, name, arr.astype(np.float64))
    return ckpt


# -----------------
# Construction
# -----------------
def test_default_parameter_count():
    ckpt = mdl.build_model(mdl.ArchitectureSpec())
    assert ckpt.parameter_count() == 29622
    assert [lstm.units for lstm in ckpt.lstm] == [40, 30, 20]
    assert ckpt.dense[-1].activation == "sigmoid"


def test_heads_and_output_shapes():
    x = np.random.default_rng(0).normal(size=(3, 7, 4))
    for head, size in [(mdl.Head.PHQ8_BINARY, 2), (mdl.Head.PHQ8_SCORE, 24), (mdl.Head.EMOTION8, 8)]:
        ckpt = mdl.build_model(SMALL.with_head(head))
        scores = mdl.predict_scores(ckpt, x)
        assert scores.shape == (3, size)
    ckpt = mdl.build_model(SMALL.with_head("phq8_score"))
    np.testing.assert_allclose(mdl.predict_scores(ckpt, x).sum(axis=1), 1.0, rtol=1e-5)


def test_build_is_deterministic():
    a = mdl.build_model(SMALL, 5)
    b = mdl.build_model(SMALL, 5)
    c = mdl.build_model(SMALL, 6)
    assert mdl.checkpoints_equal(a, b)
    assert not mdl.checkpoints_equal(a, c)


@pytest.mark.parametrize("kwargs", [
    {"lstm_units": ()},
    {"lstm_units": (4, 0)},
    {"dense_units": (-1,)},
    {"pooling": "max"},
    {"dropout": 1.0},
    {"l1_bias": -0.1},
])
def test_bad_architecture(kwargs):
    with pytest.raises(ArgumentError):
        mdl.ArchitectureSpec(**kwargs)


def test_forward_single_sequence():
    ckpt = mdl.build_model(SMALL)
    pred = mdl.forward(ckpt, np.zeros((5, 4)))
    assert pred.task == "phq8_binary"
    assert pred.predicted_class in (0, 1)
    with pytest.raises(ShapeError):
        mdl.forward(ckpt, np.zeros((5, 3)))
    with pytest.raises(ShapeError):
        mdl.predict_scores(ckpt, np.zeros((2, 0, 4)))


def test_majority_vote_breaks_ties_low():
    assert mdl.majority_vote([1, 1, 0], 2) == 1
    assert mdl.majority_vote([1, 0], 2) == 0
    assert mdl.majority_vote([3, 2, 2, 3], 5) == 2
    with pytest.raises(ArgumentError):
        mdl.majority_vote([], 2)


# -----------------
# Gradients of the whole network
# -----------------
@pytest.mark.parametrize("pooling", ["mean", "last"])
def test_backward_matches_finite_differences(pooling):
    arch = mdl.ArchitectureSpec(input_dim=3, lstm_units=(4, 3), dense_units=(3,), head="phq8_score",
                                dropout=0.0, recurrent_dropout=0.0, pooling=pooling)
    ckpt = _to_float64(mdl.build_model(arch, 2))
    x, y = _toy_data(3, 1, k=24, T=4, dim=3, offset=0.1)
    targets = mdl.one_hot(y, 24)

    def loss():
        out, _ = mdl.forward_batch(ckpt, x, nn.TRAIN)
        return nn.rmse_loss(out, targets)[0]

    out, cache = mdl.forward_batch(ckpt, x, nn.TRAIN)
    _, dout = nn.rmse_loss(out, targets)
    grads = mdl.backward_batch(ckpt, cache, dout)
    blocks = dict(ckpt.param_blocks())
    assert set(grads) == {n for n in blocks if "running_" not in n}
    for name, g in grads.items():
        fd = nn.numerical_gradient(loss, blocks[name])
        assert nn.relative_error(g, fd) < 1e-4, name


# -----------------
# Training
# -----------------
def test_one_step_updates_every_parameter():
    ckpt = mdl.build_model(SMALL, 1)
    x, y = _toy_data(12, 2)
    config = mdl.TrainConfig(batch_size=12, epochs=1, seed=3)
    trained, history = mdl.train(ckpt, x, y, config=config)
    assert len(history) == 1
    before = dict(ckpt.param_blocks())
    for name, arr in trained.param_blocks():
        assert not np.array_equal(arr, before[name]), name


def test_training_learns_separable_classes():
    x, y = _toy_data(64, 3)
    vx, vy = _toy_data(32, 4)
    config = mdl.TrainConfig(batch_size=16, epochs=40, seed=5, lr=0.01)
    trained, history = mdl.train(mdl.build_model(SMALL, 5), x, y, vx, vy, config)
    assert history[-1]["train_rmse"] < history[0]["train_rmse"]
    best = trained.provenance["best_epoch"]
    val_rmse = [h["val_rmse"] for h in history]
    assert best == int(np.argmin(val_rmse)) + 1
    assert history[best - 1]["val_accuracy"] >= 0.8
    assert set(history[0]) == {"epoch", "train_accuracy", "train_rmse", "val_accuracy", "val_rmse", "lr"}


def test_training_is_deterministic():
    x, y = _toy_data(20, 6)
    config = mdl.TrainConfig(batch_size=8, epochs=3, seed=9)
    a, ha = mdl.train(mdl.build_model(SMALL, 9), x, y, config=config)
    b, hb = mdl.train(mdl.build_model(SMALL, 9), x, y, config=config)
    assert mdl.checkpoints_equal(a, b)
    assert ha == hb


def test_l1_shrinks_lstm_biases():
    x, y = _toy_data(40, 7)
    config = mdl.TrainConfig(batch_size=10, epochs=25, seed=1)  # 100 steps
    sums = []
    for lam in (0.0, 0.001):
        arch = mdl.ArchitectureSpec(input_dim=4, lstm_units=(5, 3), dense_units=(4,), l1_bias=lam)
        trained, _ = mdl.train(mdl.build_model(arch, 1), x, y, config=config)
        sums.append(sum(float(np.abs(lstm.b).sum()) for lstm in trained.lstm))
    assert sums[1] < sums[0]


def test_training_input_errors():
    ckpt = mdl.build_model(SMALL)
    x, y = _toy_data(6, 0)
    with pytest.raises(InsufficientDataError):
        mdl.train(ckpt, np.zeros((0, 6, 4)), np.zeros(0, dtype=int))
    with pytest.raises(LabelError):
        mdl.train(ckpt, x, y + 5)
    with pytest.raises(ShapeError):
        mdl.train(ckpt, x, y[:3])
    with pytest.raises(ArgumentError):
        mdl.TrainConfig(epochs=0)


# -----------------
# Transfer
# -----------------
def test_pretrain_then_fine_tune_keeps_recurrent_weights():
    ex, ey = _toy_data(32, 10, k=8)
    pre, _ = mdl.pretrain_emotion(SMALL, ex, ey, config=mdl.TrainConfig(batch_size=16, epochs=2, seed=1))
    assert pre.head is mdl.Head.EMOTION8
    assert pre.dense[-1].W.shape[1] == 8

    x, y = _toy_data(20, 11)
    tuned, history = mdl.fine_tune(pre, mdl.Head.PHQ8_BINARY, x, y, x, y,
                                   mdl.TrainConfig(batch_size=10, epochs=3, seed=2))
    assert len(history) == 3
    assert tuned.head is mdl.Head.PHQ8_BINARY
    assert mdl.param_digest(tuned) == mdl.param_digest(pre)
    assert mdl.param_digest(tuned, "dense") != mdl.param_digest(pre, "dense")
    assert tuned.provenance["pretrained_task"] == "emotion8"
    assert tuned.provenance["frozen"] is True


def test_fine_tune_rejects_mismatched_trunks():
    pre = mdl.build_model(SMALL.with_head("emotion8"))
    other = mdl.ArchitectureSpec(input_dim=4, lstm_units=(6, 3), dense_units=(4,))
    with pytest.raises(ArchError):
        mdl.prepare_fine_tune(pre, "phq8_binary", other)
    with pytest.raises(ArchError):
        mdl.fine_tune(pre, "phq8_binary", np.zeros((2, 5, 7)), np.array([0, 1]))


def test_prepare_fine_tune_keeps_matching_head():
    pre = mdl.build_model(SMALL, 3)
    same = mdl.prepare_fine_tune(pre, "phq8_binary")
    np.testing.assert_array_equal(same.dense[-1].W, pre.dense[-1].W)
    resized = mdl.prepare_fine_tune(pre, "phq8_score")
    assert resized.dense[-1].W.shape == (4, 24)
    assert resized.dense[-1].activation == "softmax"


# -----------------
# Checkpoint files
# -----------------
def test_checkpoint_round_trip(tmp_path):
    x, y = _toy_data(10, 12)
    ckpt, _ = mdl.train(mdl.build_model(SMALL, 4), x, y, config=mdl.TrainConfig(batch_size=5, epochs=2))
    ckpt.norm_stats = NormStats(np.arange(4.0), np.ones(4) * 2)
    path = tmp_path / "m.ckpt"
    mdl.save_checkpoint(str(path), ckpt)
    assert path.read_bytes()[:4] == b"SDR1"
    back = mdl.load_checkpoint(str(path))
    assert mdl.checkpoints_equal(ckpt, back)
    assert back.provenance["epochs"] == 2
    np.testing.assert_array_equal(mdl.predict_scores(ckpt, x), mdl.predict_scores(back, x))
    assert mdl.checkpoint_to_bytes(back) == path.read_bytes()
    assert back.rng_seed == 4


def test_generator_built_model_records_no_seed(tmp_path):
    ckpt = mdl.build_model(SMALL, np.random.default_rng(3))
    assert ckpt.rng_seed is None
    assert mdl.build_model(SMALL, np.int64(3)).rng_seed == 3
    path = tmp_path / "g.ckpt"
    mdl.save_checkpoint(str(path), ckpt)
    back = mdl.load_checkpoint(str(path))
    assert back.rng_seed is None
    assert mdl.checkpoints_equal(ckpt, back)


def test_corrupt_checkpoints():
    raw = mdl.checkpoint_to_bytes(mdl.build_model(SMALL))
    with pytest.raises(FormatError):
        mdl.checkpoint_from_bytes(b"XYZ" + raw[3:])
    with pytest.raises(VersionError):
        mdl.checkpoint_from_bytes(raw[:3] + b"2" + raw[4:])
    with pytest.raises(FormatError):
        mdl.checkpoint_from_bytes(raw[:-4])
    with pytest.raises(FormatError):
        mdl.checkpoint_from_bytes(raw[:10])
