"""One-hidden-layer rectifier perceptron regressors trained by SGD.

Parameters are stored in float32 for fast inference; gradient sums are
accumulated in float64. gradient_check runs the same code path on a float64
copy of the model against central finite differences.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WEIGHTS_MAGIC = b"MLPW"
WEIGHTS_FORMAT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    lr_decay_factor: float = 10.0
    min_lr: float = 1e-5
    max_epochs: int = 1000
    batch_size: int = 32
    plateau_patience: int = 20
    plateau_min_delta: float = 1e-3  # relative improvement that resets the plateau counter
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > self.min_lr > 0:
            raise ValueError("require initial_lr > min_lr > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainReport:
    epochs_run: int
    final_train_loss: float
    final_val_loss: float
    lr_trajectory: list = field(default_factory=list)
    val_trajectory: list = field(default_factory=list)


class MlpModel:
    """y = b2 + W2 . rect(x W1 + b1), with hidden width equal to the input width."""

    __slots__ = ("W1", "b1", "W2", "b2")

    def __init__(self, W1, b1, W2, b2):
        self.W1 = np.asarray(W1)
        self.b1 = np.asarray(b1)
        self.W2 = np.asarray(W2)
        self.b2 = self.W1.dtype.type(b2)
        if self.W1.shape != (self.input_dim, self.input_dim):
            raise ValueError("hidden width must equal input width")
        for p in (self.W1, self.b1, self.W2):
            if not np.isfinite(p).all():
                raise ValueError("model parameters must be finite")
        if not np.isfinite(self.b2):
            raise ValueError("model parameters must be finite")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def dtype(self):
        return self.W1.dtype

    def astype(self, dtype) -> "MlpModel":
        return MlpModel(
            self.W1.astype(dtype), self.b1.astype(dtype), self.W2.astype(dtype), float(self.b2)
        )

    def copy(self) -> "MlpModel":
        return MlpModel(self.W1.copy(), self.b1.copy(), self.W2.copy(), float(self.b2))

    def preactivations(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        return x @ self.W1 + self.b1

    def forward(self, x) -> float:
        x = np.asarray(x, dtype=self.dtype)
        if x.shape != (self.input_dim,):
            raise ValueError(f"input shape {x.shape} does not match model dim {self.input_dim}")
        h = np.maximum(x @ self.W1 + self.b1, 0)
        return float(h @ self.W2 + self.b2)

    def forward_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"input shape {X.shape} does not match model dim {self.input_dim}")
        H = np.maximum(X @ self.W1 + self.b1, 0)
        return (H @ self.W2 + self.b2).astype(np.float64)


def init_model(m: int, seed: int, dtype=np.float32) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if m < 2:
        raise ValueError(f"input dim must be >= 2, got {m}")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(m)
    W1 = rng.uniform(-bound, bound, size=(m, m)).astype(dtype)
    W2 = rng.uniform(-bound, bound, size=m).astype(dtype)
    return MlpModel(W1, np.zeros(m, dtype=dtype), W2, 0.0)


def _batch_gradients(model: MlpModel, X: np.ndarray, y: np.ndarray):
    """Mean-squared-error loss and parameter gradients, accumulated in float64.

    The forward pass runs in the model's dtype; backward matmuls cast to
    float64 so the same code path serves both training and gradient_check.
    """
    Xd = np.asarray(X, dtype=model.dtype)
    Z = Xd @ model.W1 + model.b1
    H = np.maximum(Z, 0)
    pred = (H @ model.W2 + model.b2).astype(np.float64)
    err = pred - np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    loss = float(err @ err) / n
    g = (2.0 / n) * err
    H64 = H.astype(np.float64)
    gW2 = H64.T @ g
    gb2 = float(g.sum())
    dH = np.outer(g, model.W2.astype(np.float64))
    dZ = np.where(Z > 0, dH, 0.0)
    gW1 = np.asarray(X, dtype=np.float64).T @ dZ
    gb1 = dZ.sum(axis=0)
    return loss, gW1, gb1, gW2, gb2


def _mse(model: MlpModel, X: np.ndarray, y: np.ndarray) -> float:
    err = model.forward_batch(X) - np.asarray(y, dtype=np.float64)
    return float(err @ err) / X.shape[0]


def train(
    model: MlpModel,
    inputs,
    targets,
    val_inputs,
    val_targets,
    cfg: TrainConfig,
) -> tuple:
    """SGD with a divide-on-plateau learning-rate schedule.

    The learning rate divides by lr_decay_factor whenever the validation loss
    fails to improve by plateau_min_delta (relative) for plateau_patience
    consecutive epochs; training stops at max_epochs or once the next rate
    would fall below min_lr. Returns the parameters with the best validation
    loss seen at any epoch boundary.
    """
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    Xv = np.asarray(val_inputs, dtype=np.float64)
    yv = np.asarray(val_targets, dtype=np.float64)
    if X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValueError("inputs and targets must align and be non-empty")
    if not (np.isfinite(y).all() and (y >= 0).all()):
        raise ValueError("targets must be finite and non-negative")

    model = model.copy()
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.initial_lr
    lr_trajectory = []
    val_trajectory = []
    best_val = math.inf
    best_params = model.copy()
    plateau_best = math.inf
    wait = 0
    epochs_run = 0

    for epoch in range(cfg.max_epochs):
        lr_trajectory.append(lr)
        epochs_run = epoch + 1
        perm = rng.permutation(X.shape[0])
        for start in range(0, X.shape[0], cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            loss, gW1, gb1, gW2, gb2 = _batch_gradients(model, X[sel], y[sel])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} (lr={lr:g})")
            dt = model.dtype
            model.W1 = (model.W1 - lr * gW1).astype(dt)
            model.b1 = (model.b1 - lr * gb1).astype(dt)
            model.W2 = (model.W2 - lr * gW2).astype(dt)
            model.b2 = dt.type(float(model.b2) - lr * gb2)

        val_loss = _mse(model, Xv, yv)
        val_trajectory.append(val_loss)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch} (lr={lr:g})")
        if val_loss < best_val:
            best_val = val_loss
            best_params = model.copy()
        if val_loss < plateau_best * (1.0 - cfg.plateau_min_delta):
            plateau_best = val_loss
            wait = 0
        else:
            wait += 1
            if wait >= cfg.plateau_patience:
                wait = 0
                lr = lr / cfg.lr_decay_factor
                if lr < cfg.min_lr:
                    break

    report = TrainReport(
        epochs_run=epochs_run,
        final_train_loss=_mse(best_params, X, y),
        final_val_loss=best_val,
        lr_trajectory=lr_trajectory,
        val_trajectory=val_trajectory,
    )
    return best_params, report


def gradient_check(model: MlpModel, x, y: float, h: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference gradients."""
    model = model.astype(np.float64)
    X = np.asarray(x, dtype=np.float64).reshape(1, -1)
    yarr = np.asarray([y], dtype=np.float64)
    _, gW1, gb1, gW2, gb2 = _batch_gradients(model, X, yarr)
    analytic = np.concatenate((gW1.ravel(), gb1, gW2, [gb2]))

    params = [model.W1, model.b1, model.W2]
    numeric = []
    for arr in params:
        flat = arr.ravel()
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            up = _mse(model, X, yarr)
            flat[i] = orig - h
            down = _mse(model, X, yarr)
            flat[i] = orig
            numeric.append((up - down) / (2 * h))
    b2_orig = float(model.b2)
    model.b2 = np.float64(b2_orig + h)
    up = _mse(model, X, yarr)
    model.b2 = np.float64(b2_orig - h)
    down = _mse(model, X, yarr)
    model.b2 = np.float64(b2_orig)
    numeric.append((up - down) / (2 * h))
    numeric = np.asarray(numeric)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-10)
    return float(np.max(np.abs(analytic - numeric) / scale))


def weight_byte_size(m: int) -> int:
    """Serialized parameter payload in bytes (header excluded)."""
    return 4 * (m * m + m + m + 1)


def save_weights(model: MlpModel, path) -> None:
    m = model.input_dim
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<III", WEIGHTS_FORMAT_VERSION, m, m))
        fh.write(model.W1.astype("<f4").tobytes())
        fh.write(model.b1.astype("<f4").tobytes())
        fh.write(model.W2.astype("<f4").tobytes())
        fh.write(np.float32(model.b2).astype("<f4").tobytes())


def load_weights(path) -> MlpModel:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"not a filter weights file: {path}")
    version, m, hidden = struct.unpack("<III", raw[4:16])
    if version != WEIGHTS_FORMAT_VERSION or hidden != m:
        raise ValueError(f"unsupported weights layout in {path}")
    expected = 16 + weight_byte_size(m)
    if len(raw) != expected:
        raise ValueError(f"weights file {path} has length {len(raw)}, expected {expected}")
    vals = np.frombuffer(raw, dtype="<f4", offset=16)
    W1 = vals[: m * m].reshape(m, m).astype(np.float32)
    b1 = vals[m * m : m * m + m].astype(np.float32)
    W2 = vals[m * m + m : m * m + 2 * m].astype(np.float32)
    b2 = float(vals[-1])
    return MlpModel(W1, b1, W2, b2)
