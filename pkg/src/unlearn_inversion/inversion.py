"""White-box feature recovery from the difference of two model versions.

The parameter difference between the original and unlearned model stands in
for the removed sample's gradient. A dummy input is optimised so that its
gradient at the original model points in the same direction (cosine
similarity), with an optional anisotropic total-variation image prior.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import GradPass, ModelState, ShapeError, check_same_arch, softmax

DIRECT_DIFF = "direct_diff"  # theta - theta_u
RECONSTRUCTION_DIFF = "reconstruction_diff"  # theta_u - theta


class ZeroGradientError(RuntimeError):
    """A gradient (dummy or target) has zero norm, so the cosine is undefined."""


@dataclass(frozen=True)
class GradientEstimate:
    values: np.ndarray
    convention: str = RECONSTRUCTION_DIFF


def estimate_gradient(theta: ModelState, theta_u: ModelState,
                      convention: str = RECONSTRUCTION_DIFF) -> GradientEstimate:
    check_same_arch(theta, theta_u)
    if convention == DIRECT_DIFF:
        diff = theta.params - theta_u.params
    elif convention == RECONSTRUCTION_DIFF:
        diff = theta_u.params - theta.params
    else:
        raise ValueError(f"unknown sign convention {convention!r}")
    return GradientEstimate(diff, convention)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroGradientError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# Total variation
# ---------------------------------------------------------------------------


def _image_view(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None]
    if x.ndim == 4:
        return x
    return None


def total_variation(x) -> float:
    """Sum of |c_i - c_j| over horizontal and vertical neighbours, per channel.

    ``x`` is ``[ch, h, w]`` or a batch ``[B, ch, h, w]``; anything else (flat
    tabular features) has TV 0.
    """
    img = _image_view(x)
    if img is None:
        return 0.0
    dh = np.abs(np.diff(img, axis=2)).sum()
    dw = np.abs(np.diff(img, axis=3)).sum()
    return float(dh + dw)


def tv_grad(x) -> np.ndarray:
    """Subgradient of :func:`total_variation` using sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    img = _image_view(x)
    if img is None:
        return np.zeros_like(x)
    g = np.zeros_like(img)
    sh = np.sign(np.diff(img, axis=2))
    sw = np.sign(np.diff(img, axis=3))
    g[:, :, 1:, :] += sh
    g[:, :, :-1, :] -= sh
    g[:, :, :, 1:] += sw
    g[:, :, :, :-1] -= sw
    return g.reshape(x.shape)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def _target(grad_est):
    t = grad_est.values if isinstance(grad_est, GradientEstimate) else np.asarray(grad_est, dtype=np.float64)
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ZeroGradientError("target gradient is zero (models are identical)")
    return t / nt


def inversion_loss(model: ModelState, x, y, grad_est, tv_weight: float = 0.0) -> float:
    """``-cos(grad of (x, y) at model, grad_est) + tv_weight * TV(x)``."""
    g = GradPass(model, x, y).grad
    return -cosine_sim(g, _target(grad_est)) + tv_weight * total_variation(x)


def inversion_loss_grad(model: ModelState, x, y, grad_est, tv_weight: float = 0.0):
    """Loss and its exact gradients with respect to ``x`` and the soft label ``y``.

    Returns ``(loss, grad_x, grad_y, cos)``; ``grad_y`` has shape ``[B, C]``.
    """
    t_hat = _target(grad_est)
    gp = GradPass(model, x, y)
    g = gp.grad
    ng = np.linalg.norm(g)
    if ng == 0:
        raise ZeroGradientError("dummy gradient is zero")
    g_hat = g / ng
    cos = float(g_hat @ t_hat)
    dx, dy = gp.bilinear((t_hat - cos * g_hat) / ng)
    loss = -cos + tv_weight * total_variation(x)
    grad_x = -dx
    if tv_weight:
        grad_x = grad_x + tv_weight * tv_grad(x)
    return loss, grad_x, -dy, cos


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 2000
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tv_weight: Optional[float] = None  # None: 1e-4 for images, 0 otherwise
    label_mode: str = "known"  # or "variable"
    restarts: int = 4
    batch_count: int = 1
    seed: int = 0
    trace_every: int = 50
    lr_milestones: tuple = (3 / 8, 5 / 8, 7 / 8)
    lr_decay: float = 0.5

    def __post_init__(self):
        if self.steps < 1 or self.restarts < 1 or self.batch_count < 1:
            raise ValueError("steps, restarts and batch_count must be >= 1")
        if self.tv_weight is not None and self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.label_mode not in ("known", "variable"):
            raise ValueError(f"label_mode must be 'known' or 'variable', got {self.label_mode!r}")

    def tv_for(self, input_shape) -> float:
        if self.tv_weight is not None:
            return self.tv_weight
        return 1e-4 if len(input_shape) == 3 else 0.0

    def lr_at(self, step: int) -> float:
        passed = sum(step >= int(m * self.steps) for m in self.lr_milestones)
        return self.lr * self.lr_decay ** passed


class Adam:
    def __init__(self, shape, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class SlotMetrics:
    mse: float  # root form: sqrt(||x - x'||^2 / dim)
    psnr: float
    truth_index: int


@dataclass
class RecoveryResult:
    features: np.ndarray  # [batch_count, *input_shape], within [0, 1]
    labels: np.ndarray  # [batch_count, C] soft labels used / recovered
    loss: float
    initial_loss: float
    cosine: float
    best_restart: int
    restart_losses: list
    trace: list = field(default_factory=list)  # (step, loss) of the chosen restart
    metrics: Optional[list] = None

    def to_record(self) -> dict:
        out = {
            "loss": self.loss,
            "initial_loss": self.initial_loss,
            "cosine": self.cosine,
            "best_restart": self.best_restart,
            "restart_losses": self.restart_losses,
            "recovered_labels": self.labels.argmax(axis=1).tolist(),
        }
        if self.metrics is not None:
            out["slots"] = [
                {"rmse": s.mse, "psnr": s.psnr, "truth_index": s.truth_index} for s in self.metrics
            ]
        return out


def _run_restart(model, target, y_known, cfg, restart, shape, num_classes, tv):
    rng = np.random.default_rng([cfg.seed, restart])
    b = cfg.batch_count
    x = rng.uniform(0.0, 1.0, size=(b, *shape))
    variable = cfg.label_mode == "variable"
    u = np.zeros((b, num_classes))  # softmax(0) is the uniform label
    opt_x = Adam(x.shape, cfg.beta1, cfg.beta2, cfg.eps)
    opt_u = Adam(u.shape, cfg.beta1, cfg.beta2, cfg.eps)
    best = None
    initial = None
    trace = []
    for step in range(cfg.steps + 1):
        y = softmax(u) if variable else y_known
        try:
            loss, gx, gy, cos = inversion_loss_grad(model, x, y, target, tv)
        except ZeroGradientError:
            break
        if initial is None:
            initial = loss
        if best is None or loss < best[0]:
            best = (loss, x.copy(), np.array(y), cos)
        if step % cfg.trace_every == 0 or step == cfg.steps:
            trace.append((step, loss))
        if step == cfg.steps:
            break
        lr = cfg.lr_at(step)
        x = np.clip(x - opt_x.step(gx, lr), 0.0, 1.0)
        if variable:
            gu = y * (gy - (gy * y).sum(axis=1, keepdims=True))
            u = u - opt_u.step(gu, lr)
    if best is None:
        return None
    return best, initial, trace


def invert(model: ModelState, grad_est, cfg: InversionConfig = InversionConfig(), labels=None,
           ground_truth=None, threads: int = 1) -> RecoveryResult:
    """Recover ``cfg.batch_count`` inputs whose gradient matches ``grad_est``.

    ``labels`` (class indices, one per slot) are required in ``known`` mode.
    The best iterate of every restart is kept and the restart with the lowest
    loss wins (ties go to the lowest restart index).
    """
    arch = model.arch
    target = _target(grad_est)
    if target.size != model.param_count:
        raise ShapeError("gradient estimate length differs from parameter count")
    c = arch.num_classes
    y_known = None
    if cfg.label_mode == "known":
        if labels is None:
            raise ValueError("known-label inversion needs labels")
        idx = np.broadcast_to(np.asarray(labels, dtype=np.int64).reshape(-1), (cfg.batch_count,))
        y_known = np.eye(c)[idx]
    tv = cfg.tv_for(arch.input_shape)

    def job(r):
        return _run_restart(model, target, y_known, cfg, r, arch.input_shape, c, tv)

    if threads > 1 and cfg.restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(job, range(cfg.restarts)))
    else:
        runs = [job(r) for r in range(cfg.restarts)]

    if all(r is None for r in runs):
        raise ZeroGradientError("every restart started from a zero dummy gradient")
    restart_losses = [None if r is None else r[0][0] for r in runs]
    chosen = min((i for i, r in enumerate(runs) if r is not None), key=lambda i: (runs[i][0][0], i))
    (loss, x, y, cos), initial, trace = runs[chosen]
    result = RecoveryResult(x, y, loss, initial, cos, chosen, restart_losses, trace)
    if ground_truth is not None:
        result.metrics = slot_metrics(x, ground_truth)
    return result


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def metric_mse(x, x_rec) -> float:
    """Root form ``sqrt(||x - x'||^2 / dim(x))``."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    return float(math.sqrt(((x - x_rec) ** 2).sum() / x.size))


def metric_psnr(x, x_rec) -> float:
    """``10 log10(1 / mean squared error)`` with peak 1; ``inf`` for identical inputs."""
    x = np.asarray(x, dtype=np.float64)
    x_rec = np.asarray(x_rec, dtype=np.float64)
    if x.shape != x_rec.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_rec.shape}")
    mse = ((x - x_rec) ** 2).mean()
    if mse == 0:
        return math.inf
    return float(10.0 * math.log10(1.0 / mse))


def slot_metrics(recovered, truth) -> list:
    """Per-slot metrics, pairing slots with ground-truth samples by minimum total RMSE."""
    recovered = np.asarray(recovered, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape == recovered.shape[1:]:
        truth = truth[None]
    cost = np.array([[metric_mse(t, r) for t in truth] for r in recovered])
    rows, cols = linear_sum_assignment(cost)
    out = [None] * len(recovered)
    for r, t in zip(rows, cols):
        out[r] = SlotMetrics(metric_mse(truth[t], recovered[r]), metric_psnr(truth[t], recovered[r]), int(t))
    return [m for m in out if m is not None]


# ---------------------------------------------------------------------------
# Image dumps
# ---------------------------------------------------------------------------


def write_pnm(path, image) -> None:
    """Plain-text PPM (3 channels, P3) or PGM (1 channel, P2), max value 255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"need a [1|3, h, w] image, got {img.shape}")
    ch, h, w = img.shape
    q = np.rint(np.clip(img, 0, 1) * 255).astype(int)
    lines = ["P3" if ch == 3 else "P2", f"{w} {h}", "255"]
    pix = q.transpose(1, 2, 0).reshape(h, w * ch)
    lines += [" ".join(str(v) for v in row) for row in pix]
    Path(path).write_text("\n".join(lines) + "\n")


def read_pnm(path) -> np.ndarray:
    tokens = Path(path).read_text().split()
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    ch = 3 if magic == "P3" else 1
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    return (vals.reshape(h, w, ch).transpose(2, 0, 1)) / maxval
