"""Experiment harness: config, checkpoints, seed lineage, records and the CLI."""

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .seeds import derive_seed, lineage

__all__ = ["Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint", "ConfigError",
           "ExperimentConfig", "load_config", "derive_seed", "lineage"]
