"""Mini-batch SGD and the pretrain-then-fine-tune regime."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .data import Dataset
from .tensor import ArchSpec, ModelState, forward, log_softmax, loss_and_param_grad


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    weight_decay: float = 0.0
    linear_decay: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


# fine-tuning regime on the private split: lr 0.001, batch 128, one epoch
FINETUNE_DEFAULTS = TrainConfig(learning_rate=0.001, batch_size=128, epochs=1)


def init_model(arch: ArchSpec, seed: int) -> ModelState:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    chunks = []
    for shapes in arch.layer_param_shapes():
        for i, shape in enumerate(shapes):
            if i == 0:
                fan_in = int(np.prod(shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return ModelState(arch, params)


def batches(n: int, batch_size: int, rng):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def sgd_train(model: ModelState, ds: Dataset, cfg: TrainConfig, history: Optional[list] = None) -> ModelState:
    """Plain SGD ``theta <- theta - lr * grad`` over seeded shuffled mini-batches.

    The last partial batch of every epoch is kept. If ``history`` is given,
    the mean training loss of each epoch is appended to it.
    """
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(model.params)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate
        if cfg.linear_decay:
            lr *= 1.0 - epoch / cfg.epochs
        total = 0.0
        for idx in batches(len(ds), cfg.batch_size, rng):
            current = model.with_params(theta)
            loss, grad = loss_and_param_grad(current, ds.features[idx], ds.labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            if cfg.weight_decay:
                grad = grad + cfg.weight_decay * theta
            theta = theta - lr * grad
            total += loss * idx.size
        if history is not None:
            history.append(total / len(ds))
    return model.with_params(theta)


def pretrain_finetune(arch: ArchSpec, d0: Dataset, du: Dataset, pre_cfg: TrainConfig,
                      ft_cfg: TrainConfig = FINETUNE_DEFAULTS, init_seed: Optional[int] = None):
    """Train M_0 from scratch on ``d0``, then fine-tune it on ``du`` into M."""
    init = init_model(arch, pre_cfg.seed if init_seed is None else init_seed)
    m0 = sgd_train(init, d0, pre_cfg)
    m = sgd_train(m0, du, ft_cfg)
    return m0, m


def effective_batch_size(cfg: TrainConfig, n: int) -> int:
    return min(cfg.batch_size, n)


def evaluate(model: ModelState, ds: Dataset) -> dict:
    logits = forward(model, ds.features)
    pred = logits.argmax(axis=1)
    loss = -log_softmax(logits)[np.arange(len(ds)), ds.labels].mean()
    return {"accuracy": float((pred == ds.labels).mean()), "mean_loss": float(loss)}


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
