# file: core/model.py
"""The MFCC based recurrent network: build, train, fine-tune, persist.

Architecture (defaults): three LSTM layers (40, 30, 20 units), each followed
by batch norm over (batch x time) and dropout, temporal mean pooling, two
tanh dense layers (15, 10) and a task head. One training sample is one clip
sequence (frames x 60 features); every clip inherits its participant's label.
"""

import copy
import dataclasses
import enum
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

from . import nn_core as nn
from .dsp_features import FrameSpec, NormStats
from .errors import (ArchError, ArgumentError, FormatError, InsufficientDataError, LabelError,
                     ShapeError, VersionError)

logger = logging.getLogger(__name__)

# --- Constants for the network ---
INPUT_DIM = 60
LSTM_UNITS = (40, 30, 20)
DENSE_UNITS = (15, 10)
DENSE_ACTIVATION = "tanh"
DROPOUT = 0.2
RECURRENT_DROPOUT = 0.2
POOLING_CHOICES = ("mean", "last")

# --- Constants for training ---
BATCH_SIZE = 130
EPOCHS = 120
PREDICT_CHUNK = 256

# --- Constants for the checkpoint file ---
CKPT_MAGIC = b"SDR"
CKPT_VERSION = 1
CKPT_VERSION_BYTE = b"1"


class Head(enum.Enum):
    PHQ8_BINARY = "phq8_binary"
    PHQ8_SCORE = "phq8_score"
    EMOTION8 = "emotion8"

    @property
    def size(self):
        return {"phq8_binary": 2, "phq8_score": 24, "emotion8": 8}[self.value]

    @property
    def activation(self):
        return "sigmoid" if self is Head.PHQ8_BINARY else "softmax"


@dataclass(frozen=True)
class ArchitectureSpec:
    input_dim: int = INPUT_DIM
    lstm_units: tuple = LSTM_UNITS
    dense_units: tuple = DENSE_UNITS
    head: Head = Head.PHQ8_BINARY
    dropout: float = DROPOUT
    recurrent_dropout: float = RECURRENT_DROPOUT
    l1_bias: float = nn.L1_LAMBDA
    pooling: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "lstm_units", tuple(int(u) for u in self.lstm_units))
        object.__setattr__(self, "dense_units", tuple(int(u) for u in self.dense_units))
        object.__setattr__(self, "head", Head(self.head))
        if not self.lstm_units or min(self.lstm_units) < 1:
            raise ArgumentError("lstm_units must be a non-empty list of positive sizes")
        if self.dense_units and min(self.dense_units) < 1:
            raise ArgumentError("dense_units must be positive")
        if self.input_dim < 1:
            raise ArgumentError("input_dim must be positive")
        if self.pooling not in POOLING_CHOICES:
            raise ArgumentError(f"pooling must be one of {POOLING_CHOICES}")
        if not (0 <= self.dropout < 1 and 0 <= self.recurrent_dropout < 1):
            raise ArgumentError("dropout rates must be in [0, 1)")
        if self.l1_bias < 0:
            raise ArgumentError("l1_bias must be >= 0")

    def with_head(self, head):
        return dataclasses.replace(self, head=Head(head))

    def trunk_matches(self, other):
        """True when everything except the head agrees."""
        return (self.input_dim, self.lstm_units, self.dense_units, self.pooling) == \
               (other.input_dim, other.lstm_units, other.dense_units, other.pooling)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["head"] = self.head.value
        d["lstm_units"] = list(self.lstm_units)
        d["dense_units"] = list(self.dense_units)
        return d

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    seed: int = 0
    lr: float = nn.ADAM_LR
    decay: float = nn.ADAM_DECAY
    patience: int = nn.PLATEAU_PATIENCE
    factor: float = nn.PLATEAU_FACTOR
    min_lr: float = nn.PLATEAU_MIN_LR
    min_delta: float = nn.PLATEAU_MIN_DELTA

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ArgumentError("batch_size and epochs must be >= 1")


@dataclass(eq=False)
class ModelCheckpoint:
    arch: ArchitectureSpec
    lstm: list
    bn: list
    dense: list  # hidden dense layers followed by the head
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    norm_stats: NormStats = None
    rng_seed: int = 0  # None when built from a caller-owned Generator
    format_version: int = CKPT_VERSION
    provenance: dict = field(default_factory=dict)

    @property
    def head(self):
        return self.arch.head

    def param_blocks(self, group="all"):
        """Ordered (name, array) pairs; group is 'recurrent', 'dense' or 'all'."""
        blocks = []
        if group in ("all", "recurrent"):
            for k, (lstm, bn) in enumerate(zip(self.lstm, self.bn)):
                blocks += [(f"lstm{k}.{n}", a) for n, a in lstm.arrays().items()]
                blocks += [(f"bn{k}.{n}", a) for n, a in bn.arrays().items()]
        if group in ("all", "dense"):
            for k, dense in enumerate(self.dense):
                blocks += [(f"dense{k}.{n}", a) for n, a in dense.arrays().items()]
        if not blocks and group not in ("all", "recurrent", "dense"):
            raise ArgumentError(f"unknown parameter group {group!r}")
        return blocks

    def parameter_count(self):
        return sum(a.size for _, a in self.param_blocks())

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class Prediction:
    scores: np.ndarray
    predicted_class: int
    task: str

    def to_dict(self):
        return {"scores": [float(s) for s in self.scores], "predicted_class": int(self.predicted_class),
                "task": self.task}


# -----------------
# Construction
# -----------------
def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def build_model(arch, rng=0, frame_spec=None, norm_stats=None):
    """Untrained checkpoint with Glorot weights and forget bias 1."""
    seed = int(rng) if isinstance(rng, (int, np.integer)) else None
    rng = _rng(rng)
    lstm, bn = [], []
    in_dim = arch.input_dim
    for units in arch.lstm_units:
        lstm.append(nn.init_lstm(in_dim, units, rng))
        bn.append(nn.init_batchnorm(units))
        in_dim = units
    dense = []
    for units in arch.dense_units:
        dense.append(nn.init_dense(in_dim, units, rng, DENSE_ACTIVATION))
        in_dim = units
    dense.append(nn.init_dense(in_dim, arch.head.size, rng, arch.head.activation))
    return ModelCheckpoint(arch, lstm, bn, dense, frame_spec or FrameSpec(), norm_stats, seed)


# -----------------
# Forward / backward
# -----------------
def _check_input(ckpt, x):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[2] != ckpt.arch.input_dim or x.shape[1] < 1:
        raise ShapeError(f"expected (batch, T >= 1, {ckpt.arch.input_dim}) sequences, got {x.shape}")
    return x.astype(np.float32, copy=False)


def _recurrent_forward(ckpt, x, mode, rng):
    """LSTM/BN/dropout stack plus pooling; returns (pooled, caches)."""
    arch = ckpt.arch
    B, T, _ = x.shape
    h = x
    caches = []
    for lstm, bn in zip(ckpt.lstm, ckpt.bn):
        u = lstm.units
        rmask = dmask = None
        if mode == nn.TRAIN:
            rmask = nn.dropout_mask((B, u), arch.recurrent_dropout, rng)
            dmask = nn.dropout_mask((B, T, u), arch.dropout, rng)
        hs, lc = nn.lstm_forward(lstm, h, recurrent_mask=rmask)
        y, bc = nn.batchnorm_forward(bn, hs.reshape(B * T, u), mode)
        y = y.reshape(B, T, u)
        if dmask is not None:
            y = y * dmask
        caches.append((lc, bc, dmask))
        h = y
    pooled = h.mean(axis=1) if arch.pooling == "mean" else h[:, -1]
    return pooled, caches


def _dense_forward(ckpt, pooled):
    a = pooled
    caches = []
    for dense in ckpt.dense:
        a, dc = nn.dense_forward(dense, a)
        caches.append(dc)
    return a, caches


def forward_batch(ckpt, x, mode=nn.INFER, rng=None):
    """Head outputs for (B, T, features) sequences; returns (outputs, cache)."""
    x = _check_input(ckpt, x)
    pooled, rcaches = _recurrent_forward(ckpt, x, mode, rng)
    out, dcaches = _dense_forward(ckpt, pooled)
    return out, {"recurrent": rcaches, "dense": dcaches, "T": x.shape[1]}


def _dense_backward(ckpt, dcaches, dout):
    grads = {}
    d = dout
    for k in range(len(ckpt.dense) - 1, -1, -1):
        g, d = nn.dense_backward(dcaches[k], d)
        grads[f"dense{k}.W"], grads[f"dense{k}.b"] = g["W"], g["b"]
    return grads, d


def backward_batch(ckpt, cache, dout):
    """Gradients of every trainable parameter given d(loss)/d(outputs)."""
    grads, dpooled = _dense_backward(ckpt, cache["dense"], dout)
    T = cache["T"]
    B, u = dpooled.shape
    if ckpt.arch.pooling == "mean":
        dh = np.repeat((dpooled / T)[:, None, :], T, axis=1)
    else:
        dh = np.zeros((B, T, u), dtype=dpooled.dtype)
        dh[:, -1] = dpooled
    for k in range(len(ckpt.lstm) - 1, -1, -1):
        lc, bc, dmask = cache["recurrent"][k]
        if dmask is not None:
            dh = dh * dmask
        units = ckpt.lstm[k].units
        g_bn, dflat = nn.batchnorm_backward(bc, dh.reshape(B * T, units))
        g_lstm, dh, _, _ = nn.lstm_backward(lc, dflat.reshape(B, T, units))
        for name, g in g_lstm.items():
            grads[f"lstm{k}.{name}"] = g
        grads[f"bn{k}.gamma"], grads[f"bn{k}.beta"] = g_bn["gamma"], g_bn["beta"]
    return grads


def encode(ckpt, x, batch_size=PREDICT_CHUNK):
    """Pooled recurrent features in infer mode (input of the dense stack)."""
    x = _check_input(ckpt, x)
    parts = [_recurrent_forward(ckpt, x[i:i + batch_size], nn.INFER, None)[0]
             for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, ckpt.arch.lstm_units[-1]), np.float32)


def predict_scores(ckpt, x, batch_size=PREDICT_CHUNK):
    """Infer-mode head outputs, (N, head size)."""
    x = _check_input(ckpt, x)
    parts = [forward_batch(ckpt, x[i:i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, ckpt.head.size), np.float32)


def forward(ckpt, sequence, mode=nn.INFER, rng=None):
    """Prediction for one (T, features) sequence."""
    sequence = np.asarray(sequence)
    if sequence.ndim != 2:
        raise ShapeError(f"expected a (T, {ckpt.arch.input_dim}) sequence, got {sequence.shape}")
    out, _ = forward_batch(ckpt, sequence[None], mode, rng)
    scores = out[0]
    return Prediction(scores, int(np.argmax(scores)), ckpt.head.value)


def majority_vote(classes, n_classes):
    """Most frequent class; the lowest index wins ties."""
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size == 0:
        raise ArgumentError("majority vote over no predictions")
    return int(np.bincount(classes, minlength=n_classes).argmax())


# -----------------
# Training
# -----------------
def one_hot(labels, k):
    out = np.zeros((len(labels), k), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _check_labels(labels, head, n_rows, what):
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ShapeError(f"{what}: {n_rows} sequences but labels of shape {labels.shape}")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0
                        or labels.max() >= head.size):
        raise LabelError(f"{what}: labels must be integers in 0..{head.size - 1} for {head.value}")
    return labels.astype(np.int64)


def _metrics(outputs, labels):
    targets = one_hot(labels, outputs.shape[1])
    sq = float(np.sum((outputs.astype(np.float64) - targets) ** 2))
    correct = int(np.sum(np.argmax(outputs, axis=1) == labels))
    return sq, correct


def _lstm_biases(ckpt):
    return [lstm.b for lstm in ckpt.lstm]


def train(ckpt, train_x, train_y, val_x=None, val_y=None, config=TrainConfig(), frozen=False,
          progress=False):
    """Mini-batch training with RMSE + L1(LSTM biases) loss and Adam.

    With ``frozen`` the recurrent stack (LSTM and batch norm) runs in infer
    mode and only the dense layers are updated. Returns the checkpoint of the
    epoch with the lowest validation RMSE (the last one without validation
    data) and the per-epoch history.
    """
    train_x = _check_input(ckpt, train_x)
    if train_x.shape[0] == 0:
        raise InsufficientDataError("no training sequences")
    head = ckpt.head
    train_y = _check_labels(train_y, head, train_x.shape[0], "train")
    has_val = val_x is not None and len(val_x) > 0
    if has_val:
        val_x = _check_input(ckpt, val_x)
        val_y = _check_labels(val_y, head, val_x.shape[0], "validation")

    model = ckpt.copy()
    rng = np.random.default_rng(config.seed)
    adam = nn.AdamState(lr=config.lr, decay=config.decay)
    sched = nn.PlateauScheduler(lr=config.lr, factor=config.factor, patience=config.patience,
                                min_lr=config.min_lr, min_delta=config.min_delta)
    group = "dense" if frozen else "all"
    params = {name: a for name, a in model.param_blocks(group) if "running_" not in name}
    if frozen:
        train_feats = encode(model, train_x)
        val_feats = encode(model, val_x) if has_val else None

    n = train_x.shape[0]
    k = head.size
    history = []
    best, best_score = None, float("inf")
    epochs = tqdm(range(1, config.epochs + 1), desc=f"train {head.value}", unit="epoch",
                  disable=not progress, leave=False)
    for epoch in epochs:
        lr_used = adam.lr
        perm = rng.permutation(n)
        sq_sum, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            targets = one_hot(train_y[idx], k)
            if frozen:
                out, dcaches = _dense_forward(model, train_feats[idx])
            else:
                out, cache = forward_batch(model, train_x[idx], nn.TRAIN, rng)
            _, dout = nn.rmse_loss(out, targets)
            if frozen:
                grads, _ = _dense_backward(model, dcaches, dout)
            else:
                grads = backward_batch(model, cache, dout)
                if model.arch.l1_bias:
                    _, subgrads = nn.l1_penalty(_lstm_biases(model), model.arch.l1_bias)
                    for j, sg in enumerate(subgrads):
                        grads[f"lstm{j}.b"] = grads[f"lstm{j}.b"] + sg
            nn.assert_finite(f"epoch {epoch} gradients", *grads.values())
            nn.adam_step(adam, params, grads)
            nn.assert_finite(f"epoch {epoch} parameters", *params.values())
            s, c = _metrics(out, train_y[idx])
            sq_sum += s
            correct += c

        entry = {"epoch": epoch, "train_accuracy": correct / n,
                 "train_rmse": float(np.sqrt(sq_sum / (n * k))),
                 "val_accuracy": None, "val_rmse": None, "lr": lr_used}
        if has_val:
            if frozen:
                val_out, _ = _dense_forward(model, val_feats)
            else:
                val_out = predict_scores(model, val_x)
            s, c = _metrics(val_out, val_y)
            entry["val_accuracy"] = c / val_x.shape[0]
            entry["val_rmse"] = float(np.sqrt(s / (val_x.shape[0] * k)))
        history.append(entry)

        monitor = entry["val_rmse"] if has_val else entry["train_rmse"]
        adam.lr = sched.step(monitor)
        if not has_val or monitor < best_score:
            best_score = monitor
            best = (epoch, model.copy())
        logger.info("epoch %d/%d train_acc=%.4f train_rmse=%.4f val_acc=%s val_rmse=%s lr=%.3g",
                    epoch, config.epochs, entry["train_accuracy"], entry["train_rmse"],
                    "-" if entry["val_accuracy"] is None else f"{entry['val_accuracy']:.4f}",
                    "-" if entry["val_rmse"] is None else f"{entry['val_rmse']:.4f}", lr_used)

    best_epoch, result = best
    result.provenance = dict(model.provenance, task=head.value, epochs=config.epochs,
                             best_epoch=best_epoch, batch_size=config.batch_size, seed=config.seed,
                             frozen=bool(frozen),
                             final_train_rmse=history[best_epoch - 1]["train_rmse"],
                             final_val_rmse=history[best_epoch - 1]["val_rmse"])
    return result, history


def pretrain_emotion(arch, train_x, train_y, val_x=None, val_y=None, config=TrainConfig(),
                     frame_spec=None, norm_stats=None, progress=False):
    """Train a fresh model with the eight-class emotion head."""
    arch = arch.with_head(Head.EMOTION8)
    ckpt = build_model(arch, config.seed, frame_spec, norm_stats)
    return train(ckpt, train_x, train_y, val_x, val_y, config, progress=progress)


def param_digest(ckpt, group="recurrent"):
    h = hashlib.sha256()
    for name, arr in ckpt.param_blocks(group):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def prepare_fine_tune(pretrained, head, arch=None, rng=0):
    """Copy of ``pretrained`` with a head for ``head``; the head is re-initialized if its size changes."""
    head = Head(head)
    if arch is not None and not pretrained.arch.trunk_matches(arch):
        raise ArchError(f"pretrained architecture {pretrained.arch.to_dict()} does not match "
                        f"target {arch.to_dict()}")
    model = pretrained.copy()
    old_head = model.dense[-1]
    if old_head.W.shape[1] != head.size or old_head.activation != head.activation:
        model.dense[-1] = nn.init_dense(old_head.W.shape[0], head.size, _rng(rng), head.activation)
    model.arch = model.arch.with_head(head)
    return model


def fine_tune(pretrained, head, train_x, train_y, val_x=None, val_y=None, config=TrainConfig(),
              arch=None, norm_stats=None, progress=False):
    """Freeze the recurrent stack of ``pretrained`` and retrain the dense layers for ``head``."""
    if np.asarray(train_x).shape[-1] != pretrained.arch.input_dim:
        raise ArchError(f"pretrained model reads {pretrained.arch.input_dim} features, "
                        f"data has {np.asarray(train_x).shape[-1]}")
    model = prepare_fine_tune(pretrained, head, arch, config.seed)
    if norm_stats is not None:
        model.norm_stats = norm_stats
    frozen_before = param_digest(pretrained, "recurrent")
    tuned, history = train(model, train_x, train_y, val_x, val_y, config, frozen=True, progress=progress)
    if param_digest(tuned, "recurrent") != frozen_before:
        raise ArchError("frozen recurrent parameters changed during fine-tuning")
    tuned.provenance["pretrained_task"] = pretrained.head.value
    return tuned, history


# -----------------
# Persistence
# -----------------
def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def checkpoint_to_bytes(ckpt):
    blocks = ckpt.param_blocks()
    header = {
        "format_version": CKPT_VERSION,
        "arch": ckpt.arch.to_dict(),
        "frame_spec": ckpt.frame_spec.to_dict(),
        "norm_stats": None if ckpt.norm_stats is None else {
            "mean": [float(v) for v in ckpt.norm_stats.mean],
            "std": [float(v) for v in ckpt.norm_stats.std]},
        "rng_seed": None if ckpt.rng_seed is None else int(ckpt.rng_seed),
        "provenance": _jsonable(ckpt.provenance),
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in blocks)
    return CKPT_MAGIC + CKPT_VERSION_BYTE + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def checkpoint_from_bytes(data):
    if len(data) < 8 or data[:3] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if data[3:4] != CKPT_VERSION_BYTE:
        raise VersionError(f"unsupported checkpoint version byte {data[3:4]!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    if 8 + header_len > len(data):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(data[8:8 + header_len].decode("utf-8"))
        if header["format_version"] != CKPT_VERSION:
            raise VersionError(f"unsupported checkpoint format_version {header['format_version']}")
        arch = ArchitectureSpec.from_dict(header["arch"])
        frame_spec = FrameSpec.from_dict(header["frame_spec"])
        ns = header["norm_stats"]
        norm_stats = None if ns is None else NormStats(ns["mean"], ns["std"])
        shapes = [(name, tuple(shape)) for name, shape in header["blocks"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc

    expected = 8 + header_len + 4 * sum(int(np.prod(s)) for _, s in shapes)
    if len(data) != expected:
        raise FormatError(f"checkpoint is {len(data)} bytes, expected {expected}")

    model = build_model(arch, 0, frame_spec, norm_stats)
    offset = 8 + header_len
    targets = dict(model.param_blocks())
    if [n for n, _ in shapes] != list(targets):
        raise FormatError("checkpoint blocks do not match its architecture")
    for name, shape in shapes:
        count = int(np.prod(shape))
        if targets[name].shape != shape:
            raise FormatError(f"block {name} has shape {shape}, architecture needs {targets[name].shape}")
        targets[name][...] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
    model.rng_seed = None if header["rng_seed"] is None else int(header["rng_seed"])
    model.provenance = header["provenance"]
    return model


def save_checkpoint(path, ckpt):
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


def checkpoints_equal(a, b):
    """Parameter-bit identity plus matching arch, frame spec and normalization stats."""
    if a.arch != b.arch or a.frame_spec != b.frame_spec:
        return False
    if (a.norm_stats is None) != (b.norm_stats is None):
        return False
    if a.norm_stats is not None and not a.norm_stats.same_as(b.norm_stats):
        return False
    pa, pb = a.param_blocks(), b.param_blocks()
    return [n for n, _ in pa] == [n for n, _ in pb] and all(
        np.array_equal(x, y) for (_, x), (_, y) in zip(pa, pb))
