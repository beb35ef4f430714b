"""Binary model checkpoints.

Layout (little-endian)::

    b"UIPM" | u32 version | u32 len | arch descriptor (utf-8, len bytes)
    | u64 param_count | param_count x f64 | u8 stage tag | u64 master seed
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..tensor import ArchSpec, ModelState

MAGIC = b"UIPM"
VERSION = 1
STAGES = ("pretrained", "original", "unlearned", "defended")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Checkpoint:
    model: ModelState
    stage: str
    master_seed: int


def encode(model: ModelState, stage: str, master_seed: int) -> bytes:
    if stage not in STAGES:
        raise CheckpointError(f"unknown stage {stage!r}")
    arch = model.arch.to_text().encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<II", VERSION, len(arch)),
        arch,
        struct.pack("<Q", model.param_count),
        model.params.astype("<f8").tobytes(),
        struct.pack("<BQ", STAGES.index(stage), master_seed & 0xFFFFFFFFFFFFFFFF),
    ])


def save_checkpoint(path, model: ModelState, stage: str, master_seed: int) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(model, stage, master_seed))


def decode(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    try:
        version, alen = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
        off = 12
        arch = ArchSpec.from_text(blob[off:off + alen].decode("utf-8"))
        off += alen
        (count,) = struct.unpack_from("<Q", blob, off)
        off += 8
        if count != arch.param_count:
            raise CheckpointError(f"{source}: {count} parameters stored, arch needs {arch.param_count}")
        params = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
        off += 8 * count
        tag, seed = struct.unpack_from("<BQ", blob, off)
        off += 9
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{source}: truncated or corrupt checkpoint ({exc})") from None
    if off != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - off} trailing bytes")
    if tag >= len(STAGES):
        raise CheckpointError(f"{source}: unknown stage tag {tag}")
    return Checkpoint(ModelState(arch, params), STAGES[tag], seed)


def load_checkpoint(path, arch: Optional[ArchSpec] = None, stage: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    ckpt = decode(path.read_bytes(), str(path))
    if arch is not None and ckpt.model.arch != arch:
        raise CheckpointError(f"{path}: architecture {ckpt.model.arch.to_text()} != {arch.to_text()}")
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path}: stage {ckpt.stage!r}, expected {stage!r}")
    return ckpt


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
