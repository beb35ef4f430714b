"""Feature and label leakage from machine-unlearning updates, at desk scale."""

from .data import (Dataset, load_csv, load_image_bin, save_image_bin, select_unlearn,
                   split_pretrain_private, synth_dataset)
from .defenses import obfuscate_unlearn_gradient, prune_model, utility_ratio
from .inversion import InversionConfig, cosine_sim, estimate_gradient, invert
from .label_inference import build_probing_set, infer_labels, probe_delta
from .oracle import ModelOracle
from .tensor import (ArchSpec, ModelState, convnet, forward, input_grad, mixed_second_gradient, mlp,
                     param_grad)
from .training import TrainConfig, evaluate, pretrain_finetune, sgd_train
from .unlearning import ApproxUnlearnConfig, approx_unlearn, exact_unlearn

__all__ = [
    "ApproxUnlearnConfig", "ArchSpec", "Dataset", "InversionConfig", "ModelOracle", "ModelState",
    "TrainConfig", "approx_unlearn", "build_probing_set", "convnet", "cosine_sim", "estimate_gradient",
    "evaluate", "exact_unlearn", "forward", "infer_labels", "input_grad", "invert", "load_csv",
    "load_image_bin", "mixed_second_gradient", "mlp", "obfuscate_unlearn_gradient", "param_grad",
    "pretrain_finetune", "probe_delta", "prune_model", "save_image_bin", "select_unlearn", "sgd_train",
    "split_pretrain_private", "synth_dataset", "utility_ratio",
]
