"""Slice-level 4-class linear classifier with per-class sigmoid outputs.

Training follows the usual recipe for the slice CNNs: Adam, a linear
warmup into a cosine-annealed learning rate, binary cross-entropy over the
four one-vs-rest sigmoid heads.
"""

from __future__ import annotations

import dataclasses
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import N_CLASSES, PhaseLabel

MAGIC = b"PHSM"
FORMAT_VERSION = 1
PROB_CLAMP = 1e-7
_HEADER = struct.Struct("<4sIIIII")


class DimensionMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


class ModelFileError(ValueError):
    pass


class VersionMismatch(ModelFileError):
    pass


class CorruptPayload(ModelFileError):
    pass


class ConstraintViolated(ValueError):
    pass


@dataclass(eq=False)
class LinearModelParams:
    weights: np.ndarray
    biases: np.ndarray
    bins: int = 32
    grid: int = 2
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.weights.shape[0] != N_CLASSES:
            raise ValueError(f"weights must have shape ({N_CLASSES}, dim), got {self.weights.shape}")
        if self.biases.shape != (N_CLASSES,):
            raise ValueError(f"biases must have shape ({N_CLASSES},)")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("model parameters must be finite")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def zeros(cls, dim: int, bins: int = 32, grid: int = 2) -> "LinearModelParams":
        return cls(np.zeros((N_CLASSES, dim)), np.zeros(N_CLASSES), bins, grid)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LinearModelParams):
            return NotImplemented
        return (
            (self.bins, self.grid, self.version) == (other.bins, other.grid, other.version)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.biases, other.biases)
        )

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"feature length {x.shape[-1]} != model dim {self.dim}")
        # elementwise product + last-axis sum rather than BLAS: each row's
        # result must not depend on how many rows share the call
        return (x[..., None, :] * self.weights).sum(axis=-1) + self.biases


def sigmoid(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


_OPEN_LO = np.nextafter(0.0, 1.0)
_OPEN_HI = np.nextafter(1.0, 0.0)


def predict_batch(params: LinearModelParams, features) -> np.ndarray:
    """Per-class sigmoid scores for a (n, dim) feature matrix -> (n, 4)."""
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return np.clip(sigmoid(params.logits(x)), _OPEN_LO, _OPEN_HI)


def predict_slice(params: LinearModelParams, features) -> np.ndarray:
    """Scores of one feature vector, each strictly inside (0, 1)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch("predict_slice takes one feature vector")
    return predict_batch(params, x[None, :])[0]


def one_hot(labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, N_CLASSES))
    out[np.arange(labels.size), labels] = 1.0
    return out


def bce_loss(probs, target: PhaseLabel) -> float:
    """Mean binary cross-entropy over the four class heads."""
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    y = np.zeros(N_CLASSES)
    y[int(target)] = 1.0
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def batch_loss(params: LinearModelParams, x, labels) -> float:
    p = np.clip(sigmoid(params.logits(x)), PROB_CLAMP, 1 - PROB_CLAMP)
    y = one_hot(labels)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def bce_gradients(params: LinearModelParams, x, labels):
    """Loss and analytic gradients (d_weights, d_biases) of ``batch_loss``.

    The clamp on probabilities is ignored here; it only bites once a head
    is saturated to within 1e-7.
    """
    x = np.asarray(x, dtype=np.float64)
    p = sigmoid(params.logits(x))
    y = one_hot(labels)
    pc = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = float(np.mean(-(y * np.log(pc) + (1 - y) * np.log1p(-pc))))
    g = (p - y) / (N_CLASSES * x.shape[0])
    return loss, g.T @ x, g.sum(axis=0)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-2
    epochs: int = 15
    warmup_steps: Optional[int] = None  # None: one epoch of steps
    batch_size: int = 64
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # optimize on z-scored features, then fold the scaling into weights/biases
    standardize: bool = True

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.warmup_steps is not None and self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to base_lr, then cosine annealing toward zero."""
    warmup = cfg.warmup_steps or 0
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if warmup >= total_steps:
        raise ValueError("warmup_steps must be smaller than total_steps")
    if step < warmup:
        return cfg.base_lr * (step + 1) / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    params: LinearModelParams
    epoch_losses: list = field(default_factory=list)
    n_steps: int = 0
    config: Optional[TrainConfig] = None


def train_arrays(x, labels, cfg: TrainConfig = TrainConfig(), bins: int = 32, grid: int = 2) -> TrainResult:
    """Fit the linear model with mini-batch Adam.

    All randomness (weight init, per-epoch shuffles) comes from one
    generator seeded with ``cfg.seed``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyDataset("training set is empty")
    if labels.shape != (x.shape[0],):
        raise DimensionMismatch("one label per feature row required")
    if labels.min() < 0 or labels.max() >= N_CLASSES:
        raise ValueError("labels must be phase ordinals 0..3")

    n, dim = x.shape
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    if cfg.warmup_steps is None:
        cfg = dataclasses.replace(cfg, warmup_steps=min(steps_per_epoch, total - 1))

    if cfg.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        x = (x - mean) / scale

    rng = np.random.default_rng(cfg.seed)
    bound = 1.0 / math.sqrt(dim)
    params = LinearModelParams(rng.uniform(-bound, bound, size=(N_CLASSES, dim)), np.zeros(N_CLASSES), bins, grid)
    m_w = np.zeros_like(params.weights)
    v_w = np.zeros_like(params.weights)
    m_b = np.zeros_like(params.biases)
    v_b = np.zeros_like(params.biases)

    losses = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, g_w, g_b = bce_gradients(params, x[idx], labels[idx])
            epoch_loss += loss * idx.size
            lr = lr_at_step(cfg, step, total)
            step += 1
            m_w = cfg.beta1 * m_w + (1 - cfg.beta1) * g_w
            v_w = cfg.beta2 * v_w + (1 - cfg.beta2) * g_w * g_w
            m_b = cfg.beta1 * m_b + (1 - cfg.beta1) * g_b
            v_b = cfg.beta2 * v_b + (1 - cfg.beta2) * g_b * g_b
            c1 = 1 - cfg.beta1 ** step
            c2 = 1 - cfg.beta2 ** step
            params.weights -= lr * (m_w / c1) / (np.sqrt(v_w / c2) + cfg.eps)
            params.biases -= lr * (m_b / c1) / (np.sqrt(v_b / c2) + cfg.eps)
        losses.append(epoch_loss / n)
    if cfg.standardize:
        folded = params.weights / scale
        params = LinearModelParams(folded, params.biases - folded @ mean, bins, grid)
    return TrainResult(params, losses, step, cfg)


def train(dataset: Sequence, cfg: TrainConfig = TrainConfig(), bins: int = 32, grid: int = 2) -> TrainResult:
    """Train on a sequence of (feature_vector, PhaseLabel) pairs."""
    if len(dataset) == 0:
        raise EmptyDataset("training set is empty")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _ in dataset])
    y = np.array([int(label) for _, label in dataset])
    return train_arrays(x, y, cfg, bins, grid)


# --------------------------------------------------------------------------
# model file: magic, u32 version/bins/grid/n_classes/dim, f64 weights and
# biases, u32 CRC32 of everything before it; all little-endian
# --------------------------------------------------------------------------


def save_model(params: LinearModelParams) -> bytes:
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, params.bins, params.grid, N_CLASSES, params.dim)
    body = params.weights.astype("<f8").tobytes() + params.biases.astype("<f8").tobytes()
    payload = head + body
    return payload + struct.pack("<I", zlib.crc32(payload))


def load_model(data: bytes) -> LinearModelParams:
    data = bytes(data)
    if len(data) < _HEADER.size + 4:
        raise CorruptPayload(f"model payload too short ({len(data)} bytes)")
    magic, version, bins, grid, n_classes, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptPayload(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, this reader supports {FORMAT_VERSION}")
    if n_classes != N_CLASSES:
        raise CorruptPayload(f"model has {n_classes} classes, expected {N_CLASSES}")
    n_values = n_classes * dim + n_classes
    expected = _HEADER.size + 8 * n_values + 4
    if len(data) != expected:
        raise CorruptPayload(f"model payload is {len(data)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if crc != zlib.crc32(data[:expected - 4]):
        raise CorruptPayload("CRC32 mismatch")
    values = np.frombuffer(data, dtype="<f8", count=n_values, offset=_HEADER.size).astype(np.float64)
    try:
        return LinearModelParams(values[: n_classes * dim].reshape(n_classes, dim), values[n_classes * dim:], bins, grid)
    except ValueError as exc:
        raise CorruptPayload(str(exc)) from None


# --------------------------------------------------------------------------
# compound scaling of depth / width / resolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingConfig:
    alpha: float
    beta: float
    gamma: float
    phi: float
    validate: bool = False

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 1:
            raise ValueError("alpha, beta and gamma must be >= 1")
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")

    @property
    def flops_factor(self) -> float:
        return self.alpha * self.beta ** 2 * self.gamma ** 2


def compound_scale(cfg: ScalingConfig):
    """Return (depth, width, resolution) multipliers alpha**phi, beta**phi, gamma**phi."""
    if cfg.validate and not 1.8 <= cfg.flops_factor <= 2.2:
        raise ConstraintViolated(
            f"alpha*beta^2*gamma^2 = {cfg.flops_factor:g} is outside [1.8, 2.2]"
        )
    return cfg.alpha ** cfg.phi, cfg.beta ** cfg.phi, cfg.gamma ** cfg.phi
