"""Exact (retraining) and single-gradient approximate unlearning."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import training
from .data import Dataset, SelectionError
from .tensor import ModelState, check_same_arch, loss_and_param_grad

# offset mixed into the fine-tune seed so retraining draws a fresh batch order
RETRAIN_SEED_OFFSET = 0x5EED


@dataclass(frozen=True)
class ApproxUnlearnConfig:
    eta: float = 0.001
    batch_size: int = 128
    epochs: int = 1
    aggregation: str = "sum_per_sample"

    def __post_init__(self):
        if self.eta < 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("need eta >= 0, batch_size >= 1, epochs >= 1")
        if self.aggregation != "sum_per_sample":
            raise ValueError(f"unsupported aggregation {self.aggregation!r}")

    @property
    def scale(self) -> float:
        return self.eta * self.epochs / self.batch_size


def exact_unlearn(m0: ModelState, du: Dataset, removed, ft_cfg: training.TrainConfig,
                  seed: Optional[int] = None) -> ModelState:
    """Fine-tune M_0 on ``du`` without the ``removed`` indices.

    ``seed`` defaults to a stream distinct from ``ft_cfg.seed``; pass
    ``ft_cfg.seed`` to replay the original batch order.
    """
    removed = np.asarray(removed, dtype=np.int64)
    if removed.size and (removed.min() < 0 or removed.max() >= len(du)):
        raise SelectionError("removed index outside the private set")
    mask = np.ones(len(du), dtype=bool)
    mask[removed] = False
    if not mask.any():
        raise SelectionError("nothing left to retrain on")
    remaining = du.subset(np.flatnonzero(mask))
    if seed is None:
        seed = ft_cfg.seed + RETRAIN_SEED_OFFSET
    return training.sgd_train(m0, remaining, replace(ft_cfg, seed=seed))


def unlearning_gradient(m0: ModelState, removed: Dataset, cfg: ApproxUnlearnConfig) -> np.ndarray:
    """``(eta * m / b) * sum_s dL(f_{M_0}(x_s), y_s)/dM_0`` over the removed samples."""
    total = np.zeros(m0.param_count)
    for x, y in zip(removed.features, removed.labels):
        total += loss_and_param_grad(m0, x, int(y))[1]
    return cfg.scale * total


def apply_unlearning_gradient(m: ModelState, grad_u) -> ModelState:
    return m.with_params(m.params + np.asarray(grad_u, dtype=np.float64))


def approx_unlearn(m: ModelState, m0: ModelState, removed: Dataset, cfg: ApproxUnlearnConfig):
    """Add the removed samples' M_0 gradient back onto M; returns (M_u, grad_u)."""
    check_same_arch(m, m0)
    if len(removed) == 0:
        raise SelectionError("no samples to unlearn")
    grad_u = unlearning_gradient(m0, removed, cfg)
    return apply_unlearning_gradient(m, grad_u), grad_u
