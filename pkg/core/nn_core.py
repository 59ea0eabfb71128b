# file: core/nn_core.py
"""Numpy layers with exact backward passes, Adam and a plateau scheduler.

Arrays keep the dtype of the parameters they are computed with: float32
during training, float64 for finite difference checks. LSTM gate blocks are
laid out (input, forget, cell, output) along the last axis of W, U and b.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, softmax

from .errors import ArgumentError, ShapeError

logger = logging.getLogger(__name__)

# --- Constants for layer defaults ---
FORGET_BIAS = 1.0
BN_MOMENTUM = 0.99
BN_EPSILON = 1e-3
L1_LAMBDA = 0.001
LOSS_FLOOR = 1e-12

# --- Constants for Adam and the plateau schedule ---
ADAM_LR = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
ADAM_DECAY = 1e-6
PLATEAU_FACTOR = 0.1
PLATEAU_PATIENCE = 5
PLATEAU_MIN_LR = 1e-10
PLATEAU_MIN_DELTA = 1e-4

ACTIVATIONS = ("tanh", "sigmoid", "softmax", "identity")
TRAIN, INFER = "train", "infer"


@dataclass
class LstmLayerParams:
    W: np.ndarray  # (in_dim, 4 * units)
    U: np.ndarray  # (units, 4 * units)
    b: np.ndarray  # (4 * units,)

    @property
    def units(self):
        return self.U.shape[0]

    @property
    def in_dim(self):
        return self.W.shape[0]

    def arrays(self):
        return {"W": self.W, "U": self.U, "b": self.b}


@dataclass
class DenseLayerParams:
    W: np.ndarray  # (in_dim, out_dim)
    b: np.ndarray
    activation: str = "identity"

    def arrays(self):
        return {"W": self.W, "b": self.b}


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def arrays(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}


# -----------------
# Initializers and helpers
# -----------------
def glorot_uniform(in_dim, out_dim, rng, dtype=np.float32):
    if in_dim < 1 or out_dim < 1:
        raise ArgumentError("glorot_uniform needs dims >= 1")
    bound = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(in_dim, out_dim)).astype(dtype)


def init_lstm(in_dim, units, rng, dtype=np.float32):
    b = np.zeros(4 * units, dtype=dtype)
    b[units:2 * units] = FORGET_BIAS
    return LstmLayerParams(glorot_uniform(in_dim, 4 * units, rng, dtype),
                           glorot_uniform(units, 4 * units, rng, dtype), b)


def init_dense(in_dim, out_dim, rng, activation="identity", dtype=np.float32):
    if activation not in ACTIVATIONS:
        raise ArgumentError(f"unknown activation {activation!r}")
    return DenseLayerParams(glorot_uniform(in_dim, out_dim, rng, dtype),
                            np.zeros(out_dim, dtype=dtype), activation)


def init_batchnorm(n_features, dtype=np.float32):
    return BatchNormParams(np.ones(n_features, dtype=dtype), np.zeros(n_features, dtype=dtype),
                           np.zeros(n_features, dtype=dtype), np.ones(n_features, dtype=dtype))


def hard_sigmoid(x):
    return np.clip(0.2 * x + 0.5, 0.0, 1.0).astype(np.result_type(x, np.float32), copy=False)


def hard_sigmoid_grad(x):
    return np.where(np.abs(x) < 2.5, 0.2, 0.0).astype(np.result_type(x, np.float32), copy=False)


def assert_finite(name, *arrays):
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in {name}")


# -----------------
# LSTM
# -----------------
def lstm_forward(params, x, h0=None, c0=None, recurrent_mask=None):
    """Run the LSTM over ``x`` of shape (T, in) or (B, T, in).

    ``recurrent_mask`` (B, units) multiplies h_{t-1} in every gate
    pre-activation and is held fixed over the sequence.
    Returns (h_seq, cache); h_seq has the batch layout of ``x``.
    """
    x = np.asarray(x)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != params.in_dim:
        raise ShapeError(f"LSTM expects (*, T, {params.in_dim}) input, got {x.shape}")
    dtype = params.W.dtype
    x = x.astype(dtype, copy=False)
    B, T, _ = x.shape
    u = params.units
    h = np.zeros((B, T + 1, u), dtype=dtype)
    c = np.zeros((B, T + 1, u), dtype=dtype)
    if h0 is not None:
        h[:, 0] = h0
    if c0 is not None:
        c[:, 0] = c0
    if recurrent_mask is not None and recurrent_mask.shape != (B, u):
        raise ShapeError(f"recurrent mask must be {(B, u)}, got {recurrent_mask.shape}")

    z = x @ params.W + params.b  # (B, T, 4u); recurrent term added per step
    gates = np.empty_like(z)
    tanh_c = np.empty((B, T, u), dtype=dtype)
    for t in range(T):
        h_prev = h[:, t] if recurrent_mask is None else h[:, t] * recurrent_mask
        z[:, t] += h_prev @ params.U
        zt = z[:, t]
        gates[:, t, :u] = hard_sigmoid(zt[:, :u])
        gates[:, t, u:2 * u] = hard_sigmoid(zt[:, u:2 * u])
        gates[:, t, 2 * u:3 * u] = np.tanh(zt[:, 2 * u:3 * u])
        gates[:, t, 3 * u:] = hard_sigmoid(zt[:, 3 * u:])
        i, f, g, o = (gates[:, t, k * u:(k + 1) * u] for k in range(4))
        c[:, t + 1] = f * c[:, t] + i * g
        tanh_c[:, t] = np.tanh(c[:, t + 1])
        h[:, t + 1] = o * tanh_c[:, t]

    cache = {"x": x, "z": z, "gates": gates, "h": h, "c": c, "tanh_c": tanh_c,
             "mask": recurrent_mask, "params": params, "single": single}
    h_seq = h[:, 1:]
    return (h_seq[0] if single else h_seq), cache


def lstm_backward(cache, grad_h_seq, grad_c_last=None):
    """Backpropagation through time.

    Returns (grads, dx, dh0, dc0) where grads is {"W", "U", "b"}.
    """
    params = cache["params"]
    x, z, gates = cache["x"], cache["z"], cache["gates"]
    h, c, tanh_c, mask = cache["h"], cache["c"], cache["tanh_c"], cache["mask"]
    dh_seq = np.asarray(grad_h_seq, dtype=x.dtype)
    if cache["single"]:
        dh_seq = dh_seq[None]
    B, T, _ = x.shape
    u = params.units
    if dh_seq.shape != (B, T, u):
        raise ShapeError(f"upstream gradient must be {(B, T, u)}, got {dh_seq.shape}")

    dz = np.empty_like(z)
    dh_next = np.zeros((B, u), dtype=x.dtype)
    dc_next = np.zeros((B, u), dtype=x.dtype) if grad_c_last is None else grad_c_last.astype(x.dtype)
    U_T = params.U.T
    for t in range(T - 1, -1, -1):
        i, f, g, o = (gates[:, t, k * u:(k + 1) * u] for k in range(4))
        zt = z[:, t]
        dh = dh_seq[:, t] + dh_next
        tc = tanh_c[:, t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz[:, t, :u] = dc * g * hard_sigmoid_grad(zt[:, :u])
        dz[:, t, u:2 * u] = dc * c[:, t] * hard_sigmoid_grad(zt[:, u:2 * u])
        dz[:, t, 2 * u:3 * u] = dc * i * (1.0 - g * g)
        dz[:, t, 3 * u:] = dh * tc * hard_sigmoid_grad(zt[:, 3 * u:])
        dc_next = dc * f
        dh_next = dz[:, t] @ U_T
        if mask is not None:
            dh_next = dh_next * mask

    h_in = h[:, :-1] if mask is None else h[:, :-1] * mask[:, None, :]
    grads = {
        "W": np.einsum("bti,btg->ig", x, dz),
        "U": np.einsum("btu,btg->ug", h_in, dz),
        "b": dz.sum(axis=(0, 1)),
    }
    dx = dz @ params.W.T
    if cache["single"]:
        return grads, dx[0], dh_next[0], dc_next[0]
    return grads, dx, dh_next, dc_next


# -----------------
# Dense
# -----------------
def _activate(a, activation):
    if activation == "tanh":
        return np.tanh(a)
    if activation == "sigmoid":
        return expit(a)
    if activation == "softmax":
        return softmax(a, axis=-1)
    if activation == "identity":
        return a
    raise ArgumentError(f"unknown activation {activation!r}")


def dense_forward(params, x, activation=None):
    activation = activation or params.activation
    x = np.asarray(x)
    if x.shape[-1] != params.W.shape[0]:
        raise ShapeError(f"dense layer expects {params.W.shape[0]} inputs, got {x.shape[-1]}")
    x = x.astype(params.W.dtype, copy=False)
    y = _activate(x @ params.W + params.b, activation).astype(params.W.dtype, copy=False)
    return y, {"x": x, "y": y, "activation": activation, "params": params}


def dense_backward(cache, dy):
    x, y, params = cache["x"], cache["y"], cache["params"]
    dy = np.asarray(dy, dtype=y.dtype)
    if dy.shape != y.shape:
        raise ShapeError(f"upstream gradient must be {y.shape}, got {dy.shape}")
    act = cache["activation"]
    if act == "tanh":
        da = dy * (1.0 - y * y)
    elif act == "sigmoid":
        da = dy * y * (1.0 - y)
    elif act == "softmax":
        da = y * (dy - np.sum(dy * y, axis=-1, keepdims=True))
    else:
        da = dy
    x2 = x.reshape(-1, x.shape[-1])
    da2 = da.reshape(-1, da.shape[-1])
    grads = {"W": x2.T @ da2, "b": da2.sum(axis=0)}
    return grads, da @ params.W.T


# -----------------
# Batch normalization
# -----------------
def batchnorm_forward(params, x, mode=TRAIN):
    """Normalize (N, features); train mode uses batch statistics and updates the running ones."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.gamma.shape[0]:
        raise ShapeError(f"batch norm expects (N, {params.gamma.shape[0]}), got {x.shape}")
    x = x.astype(params.gamma.dtype, copy=False)
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ArgumentError("batch norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        params.running_mean[...] = params.momentum * params.running_mean + (1 - params.momentum) * mean
        params.running_var[...] = params.momentum * params.running_var + (1 - params.momentum) * var
    elif mode == INFER:
        mean, var = params.running_mean, params.running_var
    else:
        raise ArgumentError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    x_hat = (x - mean) * inv_std
    y = params.gamma * x_hat + params.beta
    return y, {"x_hat": x_hat, "inv_std": inv_std, "mode": mode, "params": params}


def batchnorm_backward(cache, dy):
    x_hat, inv_std, params = cache["x_hat"], cache["inv_std"], cache["params"]
    dy = np.asarray(dy, dtype=x_hat.dtype)
    grads = {"gamma": np.sum(dy * x_hat, axis=0), "beta": dy.sum(axis=0)}
    if cache["mode"] == INFER:
        return grads, dy * params.gamma * inv_std
    n = dy.shape[0]
    dx = (params.gamma * inv_std / n) * (n * dy - grads["beta"] - x_hat * grads["gamma"])
    return grads, dx


# -----------------
# Dropout, loss and penalty
# -----------------
def dropout_mask(shape, rate, rng, dtype=np.float32):
    """Inverted dropout mask (kept cells scaled by 1/(1-rate)); None when rate is 0."""
    if not 0 <= rate < 1:
        raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return None
    return ((rng.random(shape) >= rate) / (1.0 - rate)).astype(dtype)


def dropout(x, rate, rng, mode=TRAIN):
    if mode == INFER:
        return x
    mask = dropout_mask(np.shape(x), rate, rng, np.result_type(x, np.float32))
    return x if mask is None else x * mask


def rmse_loss(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    diff = pred - target
    loss = float(np.sqrt(np.mean(diff * diff)))
    grad = diff / (diff.size * max(loss, LOSS_FLOOR))
    return loss, grad.astype(pred.dtype, copy=False)


def l1_penalty(biases, lam=L1_LAMBDA):
    """lam * sum|b| over the given bias vectors and its subgradient (sign(0) = 0)."""
    penalty = lam * sum(float(np.abs(b).sum()) for b in biases)
    return penalty, [(lam * np.sign(b)).astype(b.dtype) for b in biases]


# -----------------
# Optimizer and schedule
# -----------------
@dataclass
class AdamState:
    lr: float = ADAM_LR  # scheduled rate; the plateau scheduler rewrites it
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    decay: float = ADAM_DECAY
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """In-place Adam update of ``params`` (name -> array) from ``grads``; returns params."""
    lr_t = state.lr / (1.0 + state.decay * state.t)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} is {g.shape}, parameter is {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


@dataclass
class PlateauScheduler:
    lr: float = ADAM_LR
    factor: float = PLATEAU_FACTOR
    patience: int = PLATEAU_PATIENCE
    min_lr: float = PLATEAU_MIN_LR
    min_delta: float = PLATEAU_MIN_DELTA
    best: float = float("inf")
    wait: int = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                if self.lr > self.min_lr:
                    new_lr = max(self.lr * self.factor, self.min_lr)
                    logger.info("Validation loss flat for %d epochs, reducing lr %.3g -> %.3g",
                                self.wait, self.lr, new_lr)
                    self.lr = new_lr
                self.wait = 0
        return self.lr


def plateau_scheduler(state, epoch_val_loss):
    return state.step(epoch_val_loss)


# -----------------
# Gradient checking
# -----------------
def numerical_gradient(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        plus = f()
        flat[k] = old - h
        minus = f()
        flat[k] = old
        g[k] = (plus - minus) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
