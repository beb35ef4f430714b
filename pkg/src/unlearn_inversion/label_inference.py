"""Black-box label inference from prediction-confidence drops.

Probing inputs are pushed to near-certain predictions on the original model
with zeroth-order (ZOO-style) coordinate Adam, using only oracle queries.
After unlearning, the class whose own probes lose the most confidence is the
inferred label. No model internals are accessed here.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class ProbeConstructionError(RuntimeError):
    """A class ended up without any converged probing sample."""


@dataclass(frozen=True)
class ZooConfig:
    max_queries: int = 50_000
    step_size: float = 0.01
    fd_step: float = 1e-4
    coords_per_iter: int = 128
    seed: int = 0
    threshold: float = 1 - 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    init_std: float = 0.25

    def __post_init__(self):
        if self.max_queries < 1 or self.coords_per_iter < 1:
            raise ValueError("max_queries and coords_per_iter must be >= 1")
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must lie in (0, 1]")


@dataclass
class ProbingSample:
    x: np.ndarray
    target: int
    original_output: np.ndarray  # recorded prediction of the original model
    converged: bool
    query_count: int


@dataclass
class ProbingSet:
    probes: dict  # class -> list[ProbingSample]
    m: int
    threshold: float
    num_classes: int

    def __len__(self):
        return sum(len(v) for v in self.probes.values())

    def converged(self, cls: int) -> list:
        return [p for p in self.probes[cls] if p.converged]

    def save(self, path) -> None:
        flat = [p for c in range(self.num_classes) for p in self.probes[c]]
        np.savez(
            path,
            x=np.stack([p.x for p in flat]),
            target=np.array([p.target for p in flat]),
            output=np.stack([p.original_output for p in flat]),
            converged=np.array([p.converged for p in flat]),
            queries=np.array([p.query_count for p in flat]),
            meta=np.array([self.m, self.num_classes], dtype=np.int64),
            threshold=np.array(self.threshold),
        )

    @classmethod
    def load(cls, path) -> "ProbingSet":
        with np.load(path) as z:
            m, c = (int(v) for v in z["meta"])
            probes = {k: [] for k in range(c)}
            for x, t, out, conv, q in zip(z["x"], z["target"], z["output"], z["converged"], z["queries"]):
                probes[int(t)].append(ProbingSample(x, int(t), out, bool(conv), int(q)))
            return cls(probes, m, float(z["threshold"]), c)


def margin_loss(probs: np.ndarray, target: int) -> np.ndarray:
    """``max_{i != t} z_i - z_t`` with log-probabilities as logits, per row."""
    z = np.log(np.maximum(probs, 1e-300))
    others = np.delete(z, target, axis=1)
    return others.max(axis=1) - z[:, target]


def coordinate_gradient(f, x: np.ndarray, coords, h: float) -> np.ndarray:
    """Symmetric-difference estimates ``(f(x + h e_j) - f(x - h e_j)) / 2h``.

    ``f`` maps a batch ``[2k, d]`` of flat points to ``[2k]`` values.
    """
    coords = np.asarray(coords)
    k = coords.size
    pts = np.repeat(x[None], 2 * k, axis=0)
    pts[np.arange(k), coords] += h
    pts[k + np.arange(k), coords] -= h
    vals = f(pts)
    return (vals[:k] - vals[k:]) / (2 * h)


def zoo_construct_probe(oracle, target: int, shape, cfg: ZooConfig = ZooConfig(),
                        rng: Optional[np.random.Generator] = None) -> ProbingSample:
    """Drive one noise input toward ``target`` with confidence >= ``cfg.threshold``."""
    c = oracle.num_classes
    if not 0 <= target < c:
        raise ValueError(f"target class {target} outside [0, {c})")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    shape = tuple(shape)
    d = int(np.prod(shape))
    k = min(cfg.coords_per_iter, d)
    x = np.clip(0.5 + cfg.init_std * rng.standard_normal(d), 0.0, 1.0)

    def query(points):
        return oracle.predict(points.reshape(-1, *shape))

    probs = query(x[None])[0]
    queries = 1
    m = np.zeros(d)
    v = np.zeros(d)
    t = np.zeros(d)
    while probs[target] < cfg.threshold and queries + 2 * k + 1 <= cfg.max_queries:
        coords = rng.choice(d, size=k, replace=False)
        grad = coordinate_gradient(lambda pts: margin_loss(query(pts), target), x, coords, cfg.fd_step)
        queries += 2 * k
        m[coords] = cfg.beta1 * m[coords] + (1 - cfg.beta1) * grad
        v[coords] = cfg.beta2 * v[coords] + (1 - cfg.beta2) * grad * grad
        t[coords] += 1
        corr = np.sqrt(1 - cfg.beta2 ** t[coords]) / (1 - cfg.beta1 ** t[coords])
        x[coords] = np.clip(x[coords] - cfg.step_size * corr * m[coords] / (np.sqrt(v[coords]) + 1e-8), 0.0, 1.0)
        probs = query(x[None])[0]
        queries += 1
    return ProbingSample(x.reshape(shape), target, probs, bool(probs[target] >= cfg.threshold), queries)


def build_probing_set(oracle, num_classes: int, shape, m: int = 10, cfg: ZooConfig = ZooConfig(),
                      threads: int = 1) -> ProbingSet:
    """``m`` probes per class, each from its own seeded stream."""
    if m < 1:
        raise ValueError("need at least one probe per class")
    jobs = [(cls, i) for cls in range(num_classes) for i in range(m)]

    def run(job):
        cls, i = job
        rng = np.random.default_rng([cfg.seed, cls, i])
        return zoo_construct_probe(oracle, cls, shape, cfg, rng)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            samples = list(pool.map(run, jobs))
    else:
        samples = [run(j) for j in jobs]
    probes = {cls: [] for cls in range(num_classes)}
    for s in samples:
        probes[s.target].append(s)
    failed = [cls for cls in range(num_classes) if not any(p.converged for p in probes[cls])]
    if failed:
        raise ProbeConstructionError(f"no converged probing sample for class(es) {failed}")
    return ProbingSet(probes, m, cfg.threshold, num_classes)


@dataclass
class ConfidenceDelta:
    delta: np.ndarray  # [C, C]: row t is the mean (original - unlearned) output over class-t probes
    beta: np.ndarray  # [C]: beta[t] = delta[t, t], positive means a confidence drop
    counts: np.ndarray = field(default=None)  # converged probes averaged per class


def probe_delta(probes: ProbingSet, unlearned_oracle) -> ConfidenceDelta:
    """Average output change of each class's converged probes on the unlearned model."""
    c = probes.num_classes
    if unlearned_oracle.num_classes != c:
        raise ValueError(f"oracle has {unlearned_oracle.num_classes} classes, probes expect {c}")
    delta = np.zeros((c, c))
    counts = np.zeros(c, dtype=np.int64)
    for cls in range(c):
        used = probes.converged(cls)
        if not used:
            continue
        # one query per probe, as during construction, so an unchanged model gives an exact zero
        after = np.concatenate([np.asarray(unlearned_oracle.predict(p.x[None])) for p in used])
        if after.shape != (len(used), c):
            raise ValueError(f"oracle returned shape {after.shape}, expected ({len(used)}, {c})")
        before = np.stack([p.original_output for p in used])
        delta[cls] = (before - after).mean(axis=0)
        counts[cls] = len(used)
    return ConfidenceDelta(delta, np.diag(delta).copy(), counts)


def infer_labels(deltas, k: int = 1) -> list:
    """The ``k`` classes with the largest drop, descending; ties go to the lower index."""
    beta = deltas.beta if isinstance(deltas, ConfidenceDelta) else np.asarray(deltas, dtype=np.float64)
    if not 1 <= k <= beta.size:
        raise ValueError(f"k must lie in [1, {beta.size}]")
    order = sorted(range(beta.size), key=lambda i: (-beta[i], i))
    return order[:k]
