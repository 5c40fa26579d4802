"""Smoke training on synthetic data

Adam with fixed constants (beta1 0.9, beta2 0.999, eps 1e-8), decoupled weight
decay (0 by default), optional global-norm gradient clipping, constant or
cosine learning rate. Loss is mean cross-entropy over each minibatch.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator

from .errors import DivergenceError
from .model import Model
from .tensor import Parameter, Tensor, backward, cross_entropy

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainConfig(BaseModel):
    """Optimisation settings for train-smoke"""
    epochs: int = 200
    lr: float = 2e-3
    batch_size: int = 16
    weight_decay: float = 0.0
    schedule: Literal["constant", "cosine"] = "constant"
    clip_norm: Optional[float] = None
    stop_at: Optional[float] = None
    seed: int = 0

    @field_validator("epochs", "batch_size")
    @classmethod
    def validate_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be positive, got {v}")
        return v

    @field_validator("lr", "weight_decay")
    @classmethod
    def validate_nonnegative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"must be >= 0, got {v}")
        return v


class Adam:
    """Adam over a fixed parameter list, state kept per parameter position"""

    def __init__(self, params: List[Parameter], lr: float, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, grads: List[np.ndarray]) -> None:
        self.step_count += 1
        bias1 = 1.0 - ADAM_BETA1 ** self.step_count
        bias2 = 1.0 - ADAM_BETA2 ** self.step_count
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g
            update = (self.m[i] / bias1) / (np.sqrt(self.v[i] / bias2) + ADAM_EPS)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.data.dtype)


def clip_by_global_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint L2 norm is at most max_norm; returns the norm"""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.lr


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class TrainResult:
    metrics: List[EpochMetrics] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].accuracy if self.metrics else 0.0

    @property
    def best_accuracy(self) -> float:
        return max((m.accuracy for m in self.metrics), default=0.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(m) for m in self.metrics], columns=["epoch", "loss", "accuracy", "lr"])

    def write_csv(self, path: Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            self.to_frame().to_csv(path, index=False)
        except OSError as e:
            raise OSError(f"Cannot write metrics {path}: {e.strerror or e}") from e
        return path


def train_smoke(
    model: Model,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> TrainResult:
    """Train on a small in-memory dataset

    Accuracy of an epoch is measured on the predictions of its own training
    forward passes.

    Raises:
        DivergenceError: If a minibatch loss is not finite
    """
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = Adam(params, cfg.lr, cfg.weight_decay)
    result = TrainResult()
    model.train()
    count = len(labels)

    try:
        for epoch in range(cfg.epochs):
            optimizer.lr = learning_rate(cfg, epoch)
            order = rng.permutation(count)
            total_loss, correct = 0.0, 0

            for start in range(0, count, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                logits = model(Tensor(images[batch]))
                loss = cross_entropy(logits, labels[batch])
                value = loss.item()
                if not math.isfinite(value):
                    last_good = epoch - 1 if epoch > 0 else None
                    raise DivergenceError(
                        f"loss became {value} in epoch {epoch}", last_good_epoch=last_good
                    )
                model.zero_grad()
                grads = backward(loss, wrt=params)
                arrays = [grads[p].data for p in params]
                if cfg.clip_norm is not None:
                    clip_by_global_norm(arrays, cfg.clip_norm)
                optimizer.step(arrays)

                total_loss += value * len(batch)
                correct += int((logits.data.argmax(axis=-1) == labels[batch]).sum())

            metrics = EpochMetrics(epoch, total_loss / count, correct / count, optimizer.lr)
            result.metrics.append(metrics)
            logger.debug(f"epoch {epoch}: loss {metrics.loss:.4f} acc {metrics.accuracy:.3f}")
            if on_epoch is not None:
                on_epoch(metrics)
            if cfg.stop_at is not None and metrics.accuracy >= cfg.stop_at:
                logger.info(f"Reached accuracy {metrics.accuracy:.3f} at epoch {epoch}")
                break
    finally:
        model.eval()
        model.zero_grad()

    return result
