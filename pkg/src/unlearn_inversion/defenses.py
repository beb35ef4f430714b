"""Post-processing applied to an unlearned model before release."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import training
from .data import Dataset
from .tensor import ModelState


@dataclass(frozen=True)
class ObfuscationConfig:
    clip_norm: float = 1.2
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class DefenseReport:
    name: str
    parameter: float
    model: ModelState
    accuracy_ratio: float
    defended_accuracy: float
    undefended_accuracy: float

    def to_record(self) -> dict:
        return {
            "defense": self.name,
            "parameter": self.parameter,
            "accuracy_ratio": self.accuracy_ratio,
            "defended_accuracy": self.defended_accuracy,
            "undefended_accuracy": self.undefended_accuracy,
        }


def obfuscate_unlearn_gradient(grad_u, cfg: ObfuscationConfig) -> np.ndarray:
    """Clip to L2 norm ``clip_norm``, then add N(0, sigma^2) noise per coordinate.

    Applied to the already-scaled aggregate unlearning gradient; the defended
    model is ``M + obfuscate(grad_u)``.
    """
    g = np.array(grad_u, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm > cfg.clip_norm:
        g *= cfg.clip_norm / norm
    if cfg.noise_sigma > 0:
        g += cfg.noise_sigma * np.random.default_rng(cfg.seed).standard_normal(g.shape)
    return g


def prune_model(model: ModelState, p: float) -> ModelState:
    """Zero the ``floor(p * n)`` smallest-magnitude parameters (ties: lower index first)."""
    if not 0 <= p < 1:
        raise ValueError("pruning fraction must lie in [0, 1)")
    k = int(math.floor(p * model.param_count))
    params = np.array(model.params)
    if k:
        order = np.argsort(np.abs(params), kind="stable")
        params[order[:k]] = 0.0
    return model.with_params(params)


def finetune_defense(model_u: ModelState, extra: Dataset, lr: float, epochs: int = 1,
                     seed: int = 0, batch_size: int = 128) -> ModelState:
    if len(extra) == 0:
        raise ValueError("fine-tuning defense needs extra samples")
    cfg = training.TrainConfig(learning_rate=lr, batch_size=batch_size, epochs=epochs, seed=seed)
    return training.sgd_train(model_u, extra, cfg)


def utility_ratio(defended: ModelState, undefended: ModelState, val: Dataset) -> float:
    base = training.evaluate(undefended, val)["accuracy"]
    if base == 0:
        raise ZeroDivisionError("undefended model has zero validation accuracy")
    return training.evaluate(defended, val)["accuracy"] / base


def report(name: str, parameter: float, defended: ModelState, undefended: ModelState,
           val: Dataset) -> DefenseReport:
    acc_d = training.evaluate(defended, val)["accuracy"]
    acc_u = training.evaluate(undefended, val)["accuracy"]
    if acc_u == 0:
        raise ZeroDivisionError("undefended model has zero validation accuracy")
    return DefenseReport(name, parameter, defended, acc_d / acc_u, acc_d, acc_u)
