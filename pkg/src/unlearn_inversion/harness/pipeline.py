"""Seeded experiment stages shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import data, training
from ..data import Dataset
from ..inversion import InversionConfig
from ..label_inference import ZooConfig
from ..tensor import ArchSpec, convnet, mlp
from ..unlearning import ApproxUnlearnConfig
from .config import ExperimentConfig
from .seeds import derive_seed


@dataclass
class Splits:
    pretrain: Dataset  # D_0
    private: Dataset  # D_u
    extra: Optional[Dataset]  # held-out samples available to the fine-tuning defense
    val: Dataset  # held-out validation set


def load_source(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.source == "synth":
        kw = {"spread": d.spread} if d.kind == "tabular_blobs" else {"noise": d.noise}
        ds = data.synth_dataset(d.kind, d.n, d.num_classes, d.shape, derive_seed(cfg.seed, "data"), **kw)
    elif d.source == "csv":
        ds = data.load_csv(d.path, d.label_column, d.header)
    else:
        ds = data.load_image_bin(d.path)
    return data.minmax_normalize(ds) if d.normalize else ds


def flatten_rows(ds: Dataset) -> Dataset:
    """``[n, 1, 1, d]`` (binary storage of tabular data) back to ``[n, d]``."""
    if ds.features.ndim == 4 and ds.shape[:2] == (1, 1):
        return Dataset(ds.features.reshape(len(ds), -1), ds.labels, ds.num_classes, ds.norm)
    return ds


def make_splits(cfg: ExperimentConfig, ds: Dataset) -> Splits:
    seed = derive_seed(cfg.seed, "split")
    train_idx, held_idx = data.split_indices(len(ds), cfg.dataset.test_fraction, seed)
    if held_idx.size < 2:
        raise data.SelectionError("held-out split needs at least 2 samples")
    d0, du = data.split_pretrain_private(ds.subset(train_idx), seed + 1, cfg.dataset.private_fraction)
    held = ds.subset(held_idx)
    n_extra = min(cfg.dataset.extra_size, len(held) // 2)
    extra = held.subset(np.arange(n_extra)) if n_extra else None
    val = held.subset(np.arange(n_extra, len(held)))
    return Splits(d0, du, extra, val)


def build_arch(cfg: ExperimentConfig, shape, num_classes: int) -> ArchSpec:
    a = cfg.arch
    if a.type == "mlp":
        return mlp(int(np.prod(shape)), a.hidden, num_classes)
    if len(shape) != 3:
        raise ValueError(f"convnet needs [ch, h, w] inputs, got shape {tuple(shape)}")
    return convnet(tuple(shape), a.channels, num_classes, a.kernel)


def train_config(cfg: ExperimentConfig, which: str) -> training.TrainConfig:
    sec = cfg.pretrain if which == "pretrain" else cfg.finetune
    return training.TrainConfig(sec.learning_rate, sec.batch_size, sec.epochs,
                                derive_seed(cfg.seed, which), sec.weight_decay, sec.linear_decay)


def approx_config(cfg: ExperimentConfig, private_size: int) -> ApproxUnlearnConfig:
    ft = train_config(cfg, "finetune")
    return ApproxUnlearnConfig(ft.learning_rate, training.effective_batch_size(ft, private_size), ft.epochs)


def inversion_config(cfg: Optional[ExperimentConfig], batch_count: int, label_mode: Optional[str] = None,
                     seed: Optional[int] = None) -> InversionConfig:
    if cfg is None:
        return InversionConfig(restarts=1, batch_count=batch_count, label_mode=label_mode or "known",
                               seed=0 if seed is None else seed)
    f = cfg.attack.feature
    return InversionConfig(steps=f.steps, lr=f.lr, tv_weight=f.tv_weight, label_mode=label_mode or f.label_mode,
                           restarts=f.restarts, batch_count=batch_count,
                           seed=derive_seed(cfg.seed, "feature_attack") if seed is None else seed)


def zoo_config(cfg: Optional[ExperimentConfig]) -> ZooConfig:
    if cfg is None:
        return ZooConfig()
    lab = cfg.attack.label
    return ZooConfig(max_queries=lab.max_queries, step_size=lab.step_size, fd_step=lab.fd_step,
                     coords_per_iter=lab.coords_per_iter, seed=derive_seed(cfg.seed, "label_attack"),
                     threshold=lab.threshold)
