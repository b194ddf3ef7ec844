"""Mini-batch training with best-validation checkpointing."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import Architecture, ModelParams, backward, forward, init_params, prepare_input
from .optim import AdamConfig, AdamState, NumericError, adam_step

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"  # compute precision; checkpoints are always float64 on disk
    warmup_steps: int = 100  # linear learning-rate ramp over the first optimizer steps

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def adam(self, t: int = 0) -> AdamConfig:
        lr = self.learning_rate
        if t and self.warmup_steps:
            lr *= min(1.0, t / self.warmup_steps)
        return AdamConfig(lr, self.beta1, self.beta2, self.eps)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class Checkpoint:
    model: ModelParams
    epoch: int
    val_loss: float
    history: list[EpochMetrics] = field(default_factory=list)


def cast_model(model: ModelParams, dtype) -> ModelParams:
    dtype = np.dtype(dtype)
    return ModelParams(model.arch,
                       OrderedDict((k, v.astype(dtype)) for k, v in model.params.items()),
                       OrderedDict((k, v.astype(dtype)) for k, v in model.buffers.items()))


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    d = pred.astype(np.float64) - target
    return float(np.mean(d * d))


def evaluate_loss(model: ModelParams, x: np.ndarray, y: np.ndarray, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        out, _ = forward(model, x[start:start + batch_size], "eval")
        d = out.astype(np.float64) - y[start:start + batch_size]
        total += float(np.sum(d * d))
    return total / len(x)


def train_arrays(arch: Architecture, x_train, y_train, x_val, y_val, cfg: TrainConfig,
                 on_epoch: Callable[[EpochMetrics], None] | None = None,
                 init: ModelParams | None = None) -> Checkpoint:
    """Train on prepared inputs (B, H, W, 1) with normalized targets."""
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("training and validation sets must be non-empty")
    dtype = np.dtype(cfg.dtype)
    model = cast_model(init if init is not None else init_params(arch, cfg.seed), dtype)
    x_train = np.asarray(x_train, dtype=dtype)
    x_val = np.asarray(x_val, dtype=dtype)
    y_train = np.asarray(y_train, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.float64)
    state = AdamState()
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])
    best: Checkpoint | None = None
    history: list[EpochMetrics] = []
    t = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_train))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            out, cache = forward(model, x_train[idx], "train", dropout_rng)
            diff = out.astype(np.float64) - y_train[idx]
            loss = float(np.mean(diff * diff))
            if not np.isfinite(loss):
                raise TrainingError(epoch, "training loss is not finite")
            total += loss * len(idx)
            grads = backward(model, cache, (2.0 * diff / len(idx)).astype(dtype))
            t += 1
            try:
                adam_step(model.params, grads, state, t, cfg.adam(t))
            except NumericError as exc:
                raise TrainingError(epoch, str(exc)) from exc
        val_loss = evaluate_loss(model, x_val, y_val, max(cfg.batch_size, 64))
        if not np.isfinite(val_loss):
            raise TrainingError(epoch, "validation loss is not finite")
        metrics = EpochMetrics(epoch, total / len(order), val_loss)
        history.append(metrics)
        log.info("epoch %d train %.6g val %.6g", epoch, metrics.train_loss, val_loss)
        if on_epoch:
            on_epoch(metrics)
        if best is None or val_loss < best.val_loss:
            best = Checkpoint(model.copy(), epoch, val_loss)
    best.history = history
    return best


def train(train_set: Sequence, val_set: Sequence, arch: Architecture, cfg: TrainConfig,
          on_epoch=None) -> Checkpoint:
    """Train on spectrograms; targets are ``run_label / arch.n_total``."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")

    def arrays(items):
        x = prepare_input(np.stack([s.values for s in items]), arch).astype(cfg.dtype)
        y = np.array([s.run_label for s in items], dtype=np.float64) / arch.n_total
        return x, y

    return train_arrays(arch, *arrays(train_set), *arrays(val_set), cfg, on_epoch)
