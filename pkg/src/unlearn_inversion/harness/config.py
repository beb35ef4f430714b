"""Experiment configuration (YAML, schema version 1).

Every section is optional and falls back to the defaults below. Validation
errors name the offending field by its dotted path, e.g.
``pretrain.learning_rate: must be > 0``.

.. code-block:: yaml

    schema_version: 1
    seed: 0                       # master seed, UIP_SEED overrides
    output_dir: runs/demo         # relative to the config file
    dataset:
      source: synth               # synth | csv | bin
      kind: tabular_blobs         # synth: tabular_blobs | pattern_images
      n: 250
      num_classes: 4
      shape: [24]                 # [d] or [ch, h, w]
      spread: 0.15                # tabular_blobs cluster std
      noise: 0.05                 # pattern_images pixel noise
      path: null                  # csv / bin source file
      label_column: -1
      header: false
      normalize: false            # min-max scale features to [0, 1]
      test_fraction: 0.2          # held-out split (extra + validation)
      private_fraction: 0.2
      extra_size: 100
    arch: {type: mlp, hidden: [32, 32, 32, 32]}   # or {type: convnet, channels: [8]}
    pretrain: {learning_rate: 0.1, batch_size: 8, epochs: 20}
    finetune: {learning_rate: 0.001, batch_size: 128, epochs: 1}
    unlearn: {method: approx, select: "index:0"}
    attack:
      feature: {steps: 2000, lr: 0.1, restarts: 1, label_mode: known}
      label: {probes: 10, topk: 1, max_queries: 50000}
    defense:
      clip_norm: 1.2
      obfuscate: [0.001, 0.003, 0.005, 0.007]
      prune: [0.0, 0.7, 0.9]
      finetune: [0.001]
      finetune_epochs: 1
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

SCHEMA_VERSION = 1
SEED_ENV = "UIP_SEED"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class DatasetConfig:
    source: str = "synth"
    kind: str = "tabular_blobs"
    n: int = 250
    num_classes: int = 4
    shape: list = field(default_factory=lambda: [24])
    spread: float = 0.15
    noise: float = 0.05
    path: Optional[str] = None
    label_column: int = -1
    header: bool = False
    normalize: bool = False
    test_fraction: float = 0.2
    private_fraction: float = 0.2
    extra_size: int = 100


@dataclass
class ArchConfig:
    type: str = "mlp"
    hidden: list = field(default_factory=lambda: [32, 32, 32, 32])
    channels: list = field(default_factory=lambda: [8])
    kernel: int = 3


@dataclass
class TrainSection:
    learning_rate: float = 0.1
    batch_size: int = 8
    epochs: int = 20
    weight_decay: float = 0.0
    linear_decay: bool = False


@dataclass
class FinetuneSection(TrainSection):
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 1


@dataclass
class UnlearnSection:
    method: str = "approx"
    select: str = "index:0"


@dataclass
class FeatureAttackSection:
    steps: int = 2000
    lr: float = 0.1
    restarts: int = 1
    label_mode: str = "known"
    tv_weight: Optional[float] = None
    convention: str = "reconstruction_diff"


@dataclass
class LabelAttackSection:
    probes: int = 10
    topk: int = 1
    max_queries: int = 50_000
    step_size: float = 0.01
    fd_step: float = 1e-4
    coords_per_iter: int = 128
    threshold: float = 1 - 1e-3


@dataclass
class AttackSection:
    feature: FeatureAttackSection = field(default_factory=FeatureAttackSection)
    label: LabelAttackSection = field(default_factory=LabelAttackSection)


@dataclass
class DefenseSection:
    clip_norm: float = 1.2
    obfuscate: list = field(default_factory=lambda: [0.001, 0.003, 0.005, 0.007])
    prune: list = field(default_factory=lambda: [0.0, 0.7, 0.9])
    finetune: list = field(default_factory=lambda: [0.001])
    finetune_epochs: int = 1


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseSection = field(default_factory=DefenseSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def content_hash(self, **extra) -> str:
        """Hash of everything except the master seed, so seeds of one setting group together."""
        doc = self.to_dict()
        doc.pop("seed")
        doc.pop("output_dir")
        doc["extra"] = extra
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Building from a document
# ---------------------------------------------------------------------------

_SCALARS = {int: "an integer", float: "a number", bool: "a boolean", str: "a string"}


def _coerce(value, default, path):
    """Check ``value`` against the type of the field's default."""
    if is_dataclass(default):
        return _build(type(default), value, path)
    kind = type(default)
    if default is None:  # optional float / str fields
        if value is None or isinstance(value, (int, float, str)) and not isinstance(value, bool):
            return value
        raise ConfigError(path, "must be a number, a string or null")
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, "must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "must be a number")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, "must be a string")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(path, "must be a list")
        return list(value)
    raise ConfigError(path, f"unsupported field type {kind.__name__}")


def _build(cls, doc, path=""):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(path, "must be a mapping")
    obj = cls()
    names = {f.name for f in fields(cls)}
    for key, value in doc.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(sub, "unknown field")
        setattr(obj, key, _coerce(value, getattr(obj, key), sub))
    return obj


# ---------------------------------------------------------------------------
# Range checks
# ---------------------------------------------------------------------------


def _require(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def _int_list(values, path, minimum):
    for i, v in enumerate(values):
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
                 f"{path}[{i}]", f"must be an integer >= {minimum}")


def _num_list(values, path, lo, hi=None, hi_open=False):
    for i, v in enumerate(values):
        ok = isinstance(v, (int, float)) and not isinstance(v, bool) and v >= lo
        if ok and hi is not None:
            ok = v < hi if hi_open else v <= hi
        _require(ok, f"{path}[{i}]", f"must be a number in [{lo}, {hi if hi is not None else 'inf'}"
                 + (")" if hi_open or hi is None else "]"))


def _check_train(t: TrainSection, path):
    _require(t.learning_rate > 0, f"{path}.learning_rate", "must be > 0")
    _require(t.batch_size >= 1, f"{path}.batch_size", "must be >= 1")
    _require(t.epochs >= 0, f"{path}.epochs", "must be >= 0")
    _require(t.weight_decay >= 0, f"{path}.weight_decay", "must be >= 0")


def validate(cfg: ExperimentConfig, base_dir: Path = Path(".")) -> ExperimentConfig:
    from ..data import parse_selection  # local import keeps config importable on its own

    _require(cfg.schema_version == SCHEMA_VERSION, "schema_version",
             f"unsupported version {cfg.schema_version} (expected {SCHEMA_VERSION})")
    _require(cfg.seed >= 0, "seed", "must be >= 0")

    d = cfg.dataset
    _require(d.source in ("synth", "csv", "bin"), "dataset.source", "must be synth, csv or bin")
    if d.source == "synth":
        _require(d.kind in ("tabular_blobs", "pattern_images"), "dataset.kind",
                 "must be tabular_blobs or pattern_images")
        _require(d.n >= 2, "dataset.n", "must be >= 2")
        _require(d.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        _int_list(d.shape, "dataset.shape", 1)
        want = 1 if d.kind == "tabular_blobs" else 3
        _require(len(d.shape) == want, "dataset.shape", f"must have {want} entr{'y' if want == 1 else 'ies'}")
        _require(d.spread >= 0, "dataset.spread", "must be >= 0")
        _require(d.noise >= 0, "dataset.noise", "must be >= 0")
    else:
        _require(d.path is not None, "dataset.path", f"required for source {d.source!r}")
        p = Path(d.path) if Path(d.path).is_absolute() else base_dir / d.path
        _require(p.is_file(), "dataset.path", f"file not found: {p}")
        d.path = str(p)
    _require(0 < d.test_fraction < 1, "dataset.test_fraction", "must lie in (0, 1)")
    _require(0 < d.private_fraction < 1, "dataset.private_fraction", "must lie in (0, 1)")
    _require(d.extra_size >= 0, "dataset.extra_size", "must be >= 0")

    a = cfg.arch
    _require(a.type in ("mlp", "convnet"), "arch.type", "must be mlp or convnet")
    _int_list(a.hidden, "arch.hidden", 1)
    _int_list(a.channels, "arch.channels", 1)
    _require(a.kernel >= 1 and a.kernel % 2 == 1, "arch.kernel", "must be an odd integer >= 1")
    if a.type == "convnet" and d.source == "synth":
        _require(len(d.shape) == 3, "arch.type", "convnet needs image-shaped data [ch, h, w]")

    _check_train(cfg.pretrain, "pretrain")
    _check_train(cfg.finetune, "finetune")

    u = cfg.unlearn
    _require(u.method in ("exact", "approx"), "unlearn.method", "must be exact or approx")
    try:
        parse_selection(u.select)
    except ValueError as exc:
        raise ConfigError("unlearn.select", str(exc)) from None

    f = cfg.attack.feature
    _require(f.steps >= 1, "attack.feature.steps", "must be >= 1")
    _require(f.lr > 0, "attack.feature.lr", "must be > 0")
    _require(f.restarts >= 1, "attack.feature.restarts", "must be >= 1")
    _require(f.label_mode in ("known", "variable"), "attack.feature.label_mode", "must be known or variable")
    _require(f.tv_weight is None or isinstance(f.tv_weight, (int, float)) and f.tv_weight >= 0,
             "attack.feature.tv_weight", "must be null or a number >= 0")
    _require(f.convention in ("reconstruction_diff", "direct_diff"), "attack.feature.convention",
             "must be reconstruction_diff or direct_diff")

    lab = cfg.attack.label
    _require(lab.probes >= 1, "attack.label.probes", "must be >= 1")
    _require(lab.topk >= 1, "attack.label.topk", "must be >= 1")
    _require(lab.max_queries >= 1, "attack.label.max_queries", "must be >= 1")
    _require(lab.step_size > 0, "attack.label.step_size", "must be > 0")
    _require(lab.fd_step > 0, "attack.label.fd_step", "must be > 0")
    _require(lab.coords_per_iter >= 1, "attack.label.coords_per_iter", "must be >= 1")
    _require(0 < lab.threshold <= 1, "attack.label.threshold", "must lie in (0, 1]")

    df = cfg.defense
    _require(df.clip_norm > 0, "defense.clip_norm", "must be > 0")
    _num_list(df.obfuscate, "defense.obfuscate", 0)
    _num_list(df.prune, "defense.prune", 0, 1, hi_open=True)
    _num_list(df.finetune, "defense.finetune", 0)
    _require(df.finetune_epochs >= 1, "defense.finetune_epochs", "must be >= 1")
    return cfg


def from_dict(doc: Any, base_dir: Path = Path(".")) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc)
    return validate(cfg, base_dir)


def load_config(path, env: Optional[dict] = None) -> ExperimentConfig:
    """Parse and validate a YAML config; ``UIP_SEED`` in ``env`` overrides ``seed``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: invalid YAML ({exc})") from None
    cfg = from_dict(doc, path.parent)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(SEED_ENV, f"must be an integer, got {env[SEED_ENV]!r}") from None
        _require(cfg.seed >= 0, SEED_ENV, "must be >= 0")
    out = Path(cfg.output_dir)
    cfg.output_dir = str(out if out.is_absolute() else path.parent / out)
    return cfg
