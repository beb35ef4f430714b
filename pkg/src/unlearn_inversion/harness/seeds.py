"""Per-stage seeds derived from one master seed.

``derive_seed(master, stage)`` feeds ``[master, counter]`` to numpy's
``SeedSequence`` and takes one 63-bit word, where ``counter`` is the stage's
fixed position in :data:`STAGES`. Each stage's stream depends only on the
master seed and its own counter, so re-running or adding one stage leaves the
others untouched.
"""

from __future__ import annotations

import numpy as np

STAGES = (
    "data",
    "split",
    "init",
    "pretrain",
    "finetune",
    "select",
    "retrain",
    "feature_attack",
    "label_attack",
    "defense",
)


def derive_seed(master: int, stage: str) -> int:
    if stage not in STAGES:
        raise KeyError(f"unknown stage {stage!r}")
    word = np.random.SeedSequence([int(master), STAGES.index(stage)]).generate_state(1, np.uint64)[0]
    return int(word >> np.uint64(1))


def lineage(master: int) -> dict:
    return {"master": int(master), **{s: derive_seed(master, s) for s in STAGES}}
