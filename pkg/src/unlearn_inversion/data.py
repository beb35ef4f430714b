"""Datasets: CSV and binary ingestion, synthetic generators, normalisation, splits."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

IMAGE_MAGIC = b"UIPD"
IMAGE_VERSION = 1
_HEADER = struct.Struct("<4s6I")


class DataFormatError(ValueError):
    """Malformed CSV or binary dataset file."""


class SelectionError(ValueError):
    """Unlearning selection is empty or out of range."""


@dataclass(frozen=True)
class Normalization:
    minimum: np.ndarray
    maximum: np.ndarray


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # [n, *shape]
    labels: np.ndarray  # [n] int64
    num_classes: int
    norm: Optional[Normalization] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim < 2:
            raise DataFormatError("features need a leading sample axis")
        if features.shape[0] != labels.size:
            raise DataFormatError(f"{features.shape[0]} feature rows but {labels.size} labels")
        if labels.size < 1:
            raise DataFormatError("dataset is empty")
        if self.num_classes < 2 or labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataFormatError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.size

    @property
    def shape(self) -> tuple:
        return self.features.shape[1:]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.shape))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes, self.norm)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------


def load_csv(path, label_column=-1, header: bool = False, num_classes: Optional[int] = None) -> Dataset:
    """Read a comma-separated numeric table.

    ``label_column`` is a column index (negative counts from the end) or, when
    ``header`` is set, a column name. Labels must be non-negative integers;
    the class count defaults to ``max(label) + 1``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    names = None
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if header and names is None:
                names = [c.strip() for c in row]
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric field in {row!r}") from None
            if rows and len(vals) != len(rows[0]):
                raise DataFormatError(
                    f"{path}:{lineno}: expected {len(rows[0])} columns, found {len(vals)}"
                )
            rows.append(vals)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    table = np.array(rows)
    ncol = table.shape[1]
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise DataFormatError(f"{path}: missing label column {label_column!r}")
        col = names.index(label_column)
    else:
        col = int(label_column)
        if not -ncol <= col < ncol:
            raise DataFormatError(f"{path}: missing label column {label_column} ({ncol} columns)")
        col %= ncol
    raw = table[:, col]
    if np.any(raw != np.round(raw)) or np.any(raw < 0):
        raise DataFormatError(f"{path}: labels must be non-negative integers")
    labels = raw.astype(np.int64)
    features = np.delete(table, col, axis=1)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    return Dataset(features, labels, max(c, 2))


def save_image_bin(ds: Dataset, path) -> None:
    """Write the little-endian ``UIPD`` tensor file (1-D features stored as 1x1xd)."""
    shape = ds.shape
    if len(shape) == 1:
        shape = (1, 1, shape[0])
    if len(shape) != 3:
        raise DataFormatError(f"cannot store features of shape {ds.shape}")
    ch, h, w = shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(IMAGE_MAGIC, IMAGE_VERSION, len(ds), ch, h, w, ds.num_classes))
        fh.write(ds.features.astype("<f8").tobytes())
        fh.write(ds.labels.astype("<u4").tobytes())


def load_image_bin(path) -> Dataset:
    """Read a ``UIPD`` file into a dataset of shape ``[n, ch, h, w]``.

    The header's label-count field holds the class count.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, n, ch, h, w, num_classes = _HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != IMAGE_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    nfeat = n * ch * h * w
    expected = _HEADER.size + 8 * nfeat + 4 * n
    if len(blob) != expected:
        raise DataFormatError(f"{path}: payload is {len(blob)} bytes, header implies {expected}")
    feats = np.frombuffer(blob, dtype="<f8", count=nfeat, offset=_HEADER.size)
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=_HEADER.size + 8 * nfeat)
    return Dataset(feats.astype(np.float64).reshape(n, ch, h, w), labels.astype(np.int64), int(num_classes))


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------


def minmax_normalize(ds: Dataset) -> Dataset:
    """Scale each feature to [0, 1]; zero-range features map to 0.

    Re-normalising keeps the first min/max record so :func:`denormalize`
    still restores the raw units.
    """
    flat = ds.features.reshape(len(ds), -1)
    lo, hi = flat.min(axis=0), flat.max(axis=0)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = np.where(span > 0, (flat - lo) / safe, 0.0)
    norm = ds.norm if ds.norm is not None else Normalization(lo, hi)
    return Dataset(scaled.reshape(ds.features.shape), ds.labels, ds.num_classes, norm)


def denormalize(ds: Dataset) -> Dataset:
    if ds.norm is None:
        return ds
    flat = ds.features.reshape(len(ds), -1)
    raw = flat * (ds.norm.maximum - ds.norm.minimum) + ds.norm.minimum
    return Dataset(raw.reshape(ds.features.shape), ds.labels, ds.num_classes, None)


# ---------------------------------------------------------------------------
# Splits and selections
# ---------------------------------------------------------------------------


def split_indices(n: int, fraction: float, seed: int):
    """Seeded shuffle; the second part gets ``floor(fraction * n)`` indices."""
    perm = np.random.default_rng(seed).permutation(n)
    k = int(math.floor(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])


def split_pretrain_private(ds: Dataset, seed: int, private_fraction: float = 0.2):
    """Unstratified 80/20 split into (pretrain D_0, private D_u)."""
    if len(ds) < 5:
        raise SelectionError("need at least 5 samples to split")
    keep, private = split_indices(len(ds), private_fraction, seed)
    return ds.subset(keep), ds.subset(private)


@dataclass(frozen=True)
class ByIndex:
    indices: tuple


@dataclass(frozen=True)
class ByClass:
    cls: int
    proportion: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class ByClasses:
    classes: tuple


def parse_selection(text: str, seed: int = 0):
    """Parse ``index:17``, ``index:1,2``, ``class:0:0.5`` or ``classes:0,3``."""
    kind, _, rest = text.partition(":")
    try:
        if kind == "index":
            return ByIndex(tuple(int(t) for t in rest.split(",")))
        if kind == "class":
            cls, _, prop = rest.partition(":")
            return ByClass(int(cls), float(prop) if prop else 1.0, seed)
        if kind == "classes":
            return ByClasses(tuple(int(t) for t in rest.split(",")))
    except ValueError:
        pass
    raise SelectionError(f"cannot parse selection {text!r}")


def resolve_selection(ds: Dataset, selection) -> np.ndarray:
    n = len(ds)
    if isinstance(selection, ByIndex):
        idx = np.array(sorted(set(selection.indices)), dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise SelectionError(f"index out of range [0, {n}): {list(selection.indices)}")
    elif isinstance(selection, ByClass):
        if not 0 < selection.proportion <= 1:
            raise SelectionError(f"class proportion must lie in (0, 1], got {selection.proportion}")
        members = np.flatnonzero(ds.labels == selection.cls)
        count = int(math.floor(selection.proportion * members.size + 0.5))
        chosen = np.random.default_rng(selection.seed).choice(members, size=count, replace=False)
        idx = np.sort(chosen)
    elif isinstance(selection, ByClasses):
        idx = np.flatnonzero(np.isin(ds.labels, list(selection.classes)))
    else:
        raise TypeError(f"unknown selection {selection!r}")
    return idx


def select_unlearn(ds: Dataset, selection):
    """Return (kept, removed, removed_indices); kept preserves original order."""
    idx = resolve_selection(ds, selection)
    if idx.size == 0:
        raise SelectionError(f"selection {selection} removes no samples")
    mask = np.ones(len(ds), dtype=bool)
    mask[idx] = False
    if not mask.any():
        kept = None
    else:
        kept = ds.subset(np.flatnonzero(mask))
    return kept, ds.subset(idx), idx


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def _balanced_labels(rng, n, num_classes):
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    return labels


def synth_tabular_blobs(n: int, num_classes: int, dim: int, seed: int, spread: float = 0.15) -> Dataset:
    if n < num_classes:
        raise ValueError("need n >= number of classes")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.2, 0.8, size=(num_classes, dim))
    labels = _balanced_labels(rng, n, num_classes)
    x = centers[labels] + spread * rng.standard_normal((n, dim))
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def _pattern(kind: int, rng, h, w):
    yy, xx = np.mgrid[0:h, 0:w] / max(h - 1, 1)
    if kind == 0:  # horizontal stripes
        freq = rng.uniform(1.5, 3.5)
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * yy + rng.uniform(0, 2 * np.pi))
    if kind == 1:  # vertical stripes
        freq = rng.uniform(1.5, 3.5)
        return 0.5 + 0.5 * np.sin(2 * np.pi * freq * xx + rng.uniform(0, 2 * np.pi))
    if kind == 2:  # disc
        cy, cx, r = rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.2, 0.35)
        return ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(float)
    if kind == 3:  # square
        y0, x0, s = rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(0.3, 0.5)
        return ((yy >= y0) & (yy < y0 + s) & (xx >= x0) & (xx < x0 + s)).astype(float)
    if kind == 4:  # checkerboard
        cells = rng.integers(2, 5)
        return ((np.floor(yy * cells * 0.999) + np.floor(xx * cells * 0.999)) % 2).astype(float)
    # diagonal gradient
    return np.clip((xx + yy) / 2 + rng.uniform(-0.2, 0.2), 0, 1)


def synth_pattern_images(n: int, num_classes: int, shape, seed: int, noise: float = 0.05) -> Dataset:
    """Class-specific geometric templates with per-sample shifts and pixel noise."""
    if n < num_classes:
        raise ValueError("need n >= number of classes")
    ch, h, w = shape
    rng = np.random.default_rng(seed)
    templates = []
    for c in range(num_classes):
        base = _pattern(c % 6, rng, h, w)
        color = rng.uniform(0.2, 1.0, size=ch)
        bg = rng.uniform(0.0, 0.3, size=ch)
        templates.append(bg[:, None, None] + (color - bg)[:, None, None] * base[None])
    templates = np.stack(templates)
    labels = _balanced_labels(rng, n, num_classes)
    x = np.empty((n, ch, h, w))
    for i, c in enumerate(labels):
        dy, dx = rng.integers(-2, 3, size=2)
        x[i] = np.roll(templates[c], (dy, dx), axis=(1, 2))
    x += noise * rng.standard_normal(x.shape)
    return Dataset(np.clip(x, 0.0, 1.0), labels, num_classes)


def synth_dataset(kind: str, n: int, num_classes: int, shape, seed: int, **kw) -> Dataset:
    """``kind`` is ``tabular_blobs`` (shape = dim) or ``pattern_images`` (shape = (ch, h, w))."""
    if kind == "tabular_blobs":
        dim = shape if isinstance(shape, int) else int(np.prod(shape))
        return synth_tabular_blobs(n, num_classes, dim, seed, **kw)
    if kind == "pattern_images":
        return synth_pattern_images(n, num_classes, tuple(shape), seed, **kw)
    raise ValueError(f"unknown synthetic kind {kind!r}")
