"""Float64 layer stack with first-order and mixed second-order derivatives.

Models are an :class:`ArchSpec` plus one flat parameter vector. Every layer
is bilinear in (parameters, input) or a fixed mask, so the input gradient of
``<grad_theta L(x, y), v>`` is computed exactly by pushing a parameter-space
tangent ``v`` through the forward and backward passes (forward-over-reverse)
with ReLU masks held constant.

Inputs may be a single sample of ``arch.input_shape`` or a batch with a leading
axis. Losses are always the mean cross-entropy over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Input or parameter shapes do not match the architecture."""


class LabelError(ValueError):
    """Label index out of range or soft label not on the simplex."""


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Linear:
    in_dim: int
    out_dim: int
    bias: bool = True

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise ShapeError(f"Linear expects ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def param_shapes(self, in_shape):
        shapes = [(self.out_dim, self.in_dim)]
        if self.bias:
            shapes.append((self.out_dim,))
        return shapes

    def to_text(self):
        return f"linear:{self.in_dim}:{self.out_dim}:{int(self.bias)}"

    def forward(self, p, a):
        out = a @ p[0].T
        if self.bias:
            out = out + p[1]
        return out, a

    def backward(self, p, a, g):
        grads = [g.T @ a]
        if self.bias:
            grads.append(g.sum(axis=0))
        return g @ p[0], grads

    def tangent(self, p, dp, a, da):
        out = a @ dp[0].T
        if self.bias:
            out = out + dp[1]
        if da is not None:
            out = out + da @ p[0].T
        return out

    def backward_tangent(self, p, dp, a, g, dg):
        return g @ dp[0] + dg @ p[0]


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape):
        return []

    def to_text(self):
        return "relu"

    def forward(self, p, a):
        # derivative at exactly 0 is 0
        mask = a > 0
        return np.where(mask, a, 0.0), mask

    def backward(self, p, mask, g):
        return np.where(mask, g, 0.0), []

    def tangent(self, p, dp, mask, da):
        return None if da is None else np.where(mask, da, 0.0)

    def backward_tangent(self, p, dp, mask, g, dg):
        return np.where(mask, dg, 0.0)


def _im2col(x, k, stride, pad):
    b, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * k * k)
    return cols, ho, wo


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeError(f"Conv2D expects ({self.in_ch}, h, w), got {tuple(in_shape)}")
        _, h, w = in_shape
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2D kernel {self.kernel} too large for {tuple(in_shape)}")
        return (self.out_ch, ho, wo)

    def param_shapes(self, in_shape):
        return [(self.out_ch, self.in_ch, self.kernel, self.kernel), (self.out_ch,)]

    def to_text(self):
        return f"conv2d:{self.in_ch}:{self.out_ch}:{self.kernel}:{self.stride}:{self.padding}"

    def _cols(self, a):
        return _im2col(a, self.kernel, self.stride, self.padding)

    def _apply(self, cols, ho, wo, weight):
        b = cols.shape[0]
        out = cols @ weight.reshape(self.out_ch, -1).T
        return out.reshape(b, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def forward(self, p, a):
        cols, ho, wo = self._cols(a)
        out = self._apply(cols, ho, wo, p[0]) + p[1][None, :, None, None]
        return out, (cols, a.shape)

    def _input_transpose(self, g, weight, in_shape):
        b, _, ho, wo = g.shape
        k, s, pad = self.kernel, self.stride, self.padding
        gm = g.transpose(0, 2, 3, 1).reshape(b, ho * wo, self.out_ch)
        gcols = (gm @ weight.reshape(self.out_ch, -1)).reshape(b, ho, wo, self.in_ch, k, k)
        h, w = in_shape[2], in_shape[3]
        gx = np.zeros((b, self.in_ch, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return gx[:, :, pad:pad + h, pad:pad + w]

    def backward(self, p, cache, g):
        cols, in_shape = cache
        b, _, ho, wo = g.shape
        gm = g.transpose(0, 2, 3, 1).reshape(b, ho * wo, self.out_ch)
        gw = np.einsum("bpo,bpk->ok", gm, cols).reshape(p[0].shape)
        gb = g.sum(axis=(0, 2, 3))
        return self._input_transpose(g, p[0], in_shape), [gw, gb]

    def tangent(self, p, dp, cache, da):
        cols, in_shape = cache
        _, ho, wo = self.output_shape(in_shape[1:])
        out = self._apply(cols, ho, wo, dp[0]) + dp[1][None, :, None, None]
        if da is not None:
            dcols, _, _ = self._cols(da)
            out = out + self._apply(dcols, ho, wo, p[0])
        return out

    def backward_tangent(self, p, dp, cache, g, dg):
        _, in_shape = cache
        return self._input_transpose(g, dp[0], in_shape) + self._input_transpose(dg, p[0], in_shape)


@dataclass(frozen=True)
class AvgPool2D:
    window: int

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"AvgPool2D expects (c, h, w), got {tuple(in_shape)}")
        c, h, w = in_shape
        if h % self.window or w % self.window:
            raise ShapeError(f"AvgPool2D window {self.window} does not divide {h}x{w}")
        return (c, h // self.window, w // self.window)

    def param_shapes(self, in_shape):
        return []

    def to_text(self):
        return f"avgpool2d:{self.window}"

    def _pool(self, a):
        b, c, h, w = a.shape
        k = self.window
        return a.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def _unpool(self, g):
        k = self.window
        return np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)

    def forward(self, p, a):
        return self._pool(a), None

    def backward(self, p, cache, g):
        return self._unpool(g), []

    def tangent(self, p, dp, cache, da):
        return None if da is None else self._pool(da)

    def backward_tangent(self, p, dp, cache, g, dg):
        return self._unpool(dg)


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def param_shapes(self, in_shape):
        return []

    def to_text(self):
        return "flatten"

    def forward(self, p, a):
        return a.reshape(a.shape[0], -1), a.shape

    def backward(self, p, shape, g):
        return g.reshape(shape), []

    def tangent(self, p, dp, shape, da):
        return None if da is None else da.reshape(da.shape[0], -1)

    def backward_tangent(self, p, dp, shape, g, dg):
        return dg.reshape(shape)


Layer = Union[Linear, ReLU, Conv2D, AvgPool2D, Flatten]


# ---------------------------------------------------------------------------
# Architecture and model state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.input_shape or any(d < 1 for d in self.input_shape):
            raise ShapeError(f"invalid input shape {self.input_shape}")
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.to_text()}): {exc}") from None
            shapes.append(shape)
        if len(shape) != 1 or shape[0] < 2:
            raise ShapeError(f"final layer must output C >= 2 logits, got {shape}")
        object.__setattr__(self, "_shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self._shapes[-1][0]

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_param_shapes(self):
        return [layer.param_shapes(s) for layer, s in zip(self.layers, self._shapes)]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for shapes in self.layer_param_shapes() for s in shapes)

    def to_text(self) -> str:
        """Canonical one-line descriptor, e.g. ``input:24|linear:24:32:1|relu|linear:32:4:1``."""
        head = "input:" + "x".join(str(d) for d in self.input_shape)
        return "|".join([head] + [layer.to_text() for layer in self.layers])

    @classmethod
    def from_text(cls, text: str) -> "ArchSpec":
        parts = text.strip().split("|")
        if not parts[0].startswith("input:"):
            raise ValueError(f"arch descriptor must start with 'input:', got {text!r}")
        input_shape = tuple(int(d) for d in parts[0][len("input:"):].split("x"))
        layers = []
        for part in parts[1:]:
            name, *args = part.split(":")
            vals = [int(a) for a in args]
            if name == "linear":
                layers.append(Linear(vals[0], vals[1], bool(vals[2]) if len(vals) > 2 else True))
            elif name == "relu":
                layers.append(ReLU())
            elif name == "conv2d":
                layers.append(Conv2D(*vals))
            elif name == "avgpool2d":
                layers.append(AvgPool2D(*vals))
            elif name == "flatten":
                layers.append(Flatten())
            else:
                raise ValueError(f"unknown layer {name!r} in arch descriptor")
        return cls(input_shape, tuple(layers))


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> ArchSpec:
    """Fully connected ReLU network ``input_dim -> hidden... -> num_classes``."""
    dims = [input_dim, *hidden, num_classes]
    layers = []
    for i in range(len(dims) - 1):
        layers.append(Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return ArchSpec((input_dim,), tuple(layers))


def convnet(input_shape, channels: Sequence[int], num_classes: int, kernel: int = 3) -> ArchSpec:
    """Blocks of conv -> ReLU -> 2x2 average pool, then a linear classifier."""
    c, h, w = input_shape
    layers = []
    for out_ch in channels:
        layers += [Conv2D(c, out_ch, kernel, 1, kernel // 2), ReLU(), AvgPool2D(2)]
        c, h, w = out_ch, h // 2, w // 2
    layers += [Flatten(), Linear(c * h * w, num_classes)]
    return ArchSpec(tuple(input_shape), tuple(layers))


@dataclass(frozen=True)
class ModelState:
    arch: ArchSpec
    params: np.ndarray

    def __post_init__(self):
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        if params.size != self.arch.param_count:
            raise ShapeError(
                f"arch needs {self.arch.param_count} parameters, got {params.size}"
            )
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @property
    def param_count(self) -> int:
        return self.params.size

    def with_params(self, params) -> "ModelState":
        return ModelState(self.arch, params)

    def layer_params(self, flat=None):
        """Split a flat vector (default: own params) into per-layer array views."""
        flat = self.params if flat is None else flat
        out, offset = [], 0
        for shapes in self.arch.layer_param_shapes():
            arrs = []
            for s in shapes:
                n = int(np.prod(s))
                arrs.append(flat[offset:offset + n].reshape(s))
                offset += n
            out.append(arrs)
        return out


def check_same_arch(a: ModelState, b: ModelState) -> None:
    if a.arch != b.arch:
        raise ShapeError(f"architecture mismatch: {a.arch.to_text()} vs {b.arch.to_text()}")


# ---------------------------------------------------------------------------
# Input / label normalisation
# ---------------------------------------------------------------------------


def _as_batch(arch: ArchSpec, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape == arch.input_shape:
        return x[None], True
    if x.ndim == len(arch.input_shape) + 1 and x.shape[1:] == arch.input_shape and x.shape[0] > 0:
        return x, False
    raise ShapeError(f"input shape {x.shape} does not match arch input {arch.input_shape}")


def soft_labels(y, batch: int, num_classes: int) -> np.ndarray:
    """Return labels as a ``[batch, C]`` matrix of probability vectors.

    Integer dtypes are class indices (a scalar broadcasts over the batch);
    float dtypes are soft labels.
    """
    arr = np.asarray(y)
    if arr.dtype.kind in "iu":
        idx = arr.astype(np.int64).reshape(-1)
        if idx.size == 1 and batch > 1:
            idx = np.repeat(idx, batch)
        if idx.size != batch:
            raise ShapeError(f"{idx.size} labels for a batch of {batch}")
        if np.any(idx < 0) or np.any(idx >= num_classes):
            raise LabelError(f"label index out of range [0, {num_classes}): {idx.tolist()}")
        out = np.zeros((batch, num_classes))
        out[np.arange(batch), idx] = 1.0
        return out
    soft = np.asarray(y, dtype=np.float64)
    if soft.ndim == 1:
        soft = np.broadcast_to(soft, (batch, soft.size))
    if soft.shape != (batch, num_classes):
        raise ShapeError(f"soft labels of shape {soft.shape}, expected ({batch}, {num_classes})")
    if np.any(soft < -1e-12) or np.any(np.abs(soft.sum(axis=1) - 1.0) > 1e-9):
        raise LabelError("soft label must be non-negative and sum to 1 (tolerance 1e-9)")
    return np.array(soft)


# ---------------------------------------------------------------------------
# Pure scalar/vector functions
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits, label) -> float:
    """Mean cross-entropy ``-sum_i y_i log softmax(z)_i`` over the batch.

    ``label`` is a class index (or index array) or a soft label vector/matrix.
    """
    z = np.asarray(logits, dtype=np.float64)
    z2 = z[None] if z.ndim == 1 else z
    y = soft_labels(label, z2.shape[0], z2.shape[1])
    return float(-(y * log_softmax(z2)).sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Forward / backward passes
# ---------------------------------------------------------------------------


def _forward(model: ModelState, xb):
    params = model.layer_params()
    caches = []
    a = xb
    for layer, p in zip(model.arch.layers, params):
        a, cache = layer.forward(p, a)
        caches.append(cache)
    return params, caches, a


def _backward(model, params, caches, g_logits):
    """Return (output-grads per layer, flat param grad, input grad)."""
    layers = model.arch.layers
    g_out = [None] * len(layers)
    grads = [None] * len(layers)
    g = g_logits
    for i in range(len(layers) - 1, -1, -1):
        g_out[i] = g
        g, grads[i] = layers[i].backward(params[i], caches[i], g)
    flat = np.concatenate([gp.reshape(-1) for gl in grads for gp in gl]) if model.param_count else np.zeros(0)
    return g_out, flat, g


def forward(model: ModelState, x) -> np.ndarray:
    """Pre-softmax logits for one sample (``[C]``) or a batch (``[B, C]``)."""
    xb, single = _as_batch(model.arch, x)
    logits = _forward(model, xb)[2]
    return logits[0] if single else logits


def predict_proba(model: ModelState, x) -> np.ndarray:
    return softmax(forward(model, x))


def loss_and_param_grad(model: ModelState, x, y):
    """Mean cross-entropy over the batch and its flat parameter gradient."""
    xb, _ = _as_batch(model.arch, x)
    yb = soft_labels(y, xb.shape[0], model.arch.num_classes)
    params, caches, z = _forward(model, xb)
    loss = float(-(yb * log_softmax(z)).sum(axis=1).mean())
    g_z = (softmax(z) - yb) / xb.shape[0]
    _, flat, _ = _backward(model, params, caches, g_z)
    return loss, flat


def param_grad(model: ModelState, x, y) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the flat parameters."""
    return loss_and_param_grad(model, x, y)[1]


def input_grad(model: ModelState, x, y) -> np.ndarray:
    """Gradient of the mean cross-entropy with respect to the input(s)."""
    xb, single = _as_batch(model.arch, x)
    yb = soft_labels(y, xb.shape[0], model.arch.num_classes)
    params, caches, z = _forward(model, xb)
    g_z = (softmax(z) - yb) / xb.shape[0]
    _, _, gx = _backward(model, params, caches, g_z)
    return gx[0] if single else gx


class GradPass:
    """Forward/backward state of one (x, y) pair, reusable for tangent queries.

    ``grad`` is the flat parameter gradient; :meth:`bilinear` gives the input
    and soft-label gradients of ``<grad, v>`` for any fixed ``v``.
    """

    def __init__(self, model: ModelState, x, y):
        self.model = model
        self.xb, self.single = _as_batch(model.arch, x)
        b = self.xb.shape[0]
        self.y = soft_labels(y, b, model.arch.num_classes)
        self.params, self.caches, self.logits = _forward(model, self.xb)
        self.probs = softmax(self.logits)
        self.loss = float(-(self.y * log_softmax(self.logits)).sum(axis=1).mean())
        g_z = (self.probs - self.y) / b
        self.g_out, self.grad, _ = _backward(model, self.params, self.caches, g_z)

    def bilinear(self, v):
        """Return ``(d/dx <grad, v>, d/dy <grad, v>)`` with masks held fixed."""
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.model.param_count:
            raise ShapeError(f"direction has {v.size} entries, model has {self.model.param_count}")
        layers = self.model.arch.layers
        dparams = self.model.layer_params(v)
        b = self.xb.shape[0]
        da = None
        for layer, p, dp, cache in zip(layers, self.params, dparams, self.caches):
            da = layer.tangent(p, dp, cache, da)
        dz = np.zeros_like(self.logits) if da is None else da
        p = self.probs
        dg = p * (dz - (p * dz).sum(axis=1, keepdims=True)) / b
        for i in range(len(layers) - 1, -1, -1):
            dg = layers[i].backward_tangent(self.params[i], dparams[i], self.caches[i], self.g_out[i], dg)
        dx = dg[0] if self.single else dg
        dy = -dz / b
        return dx, dy


def mixed_second_gradient(model: ModelState, x, y, v) -> np.ndarray:
    """Input gradient of ``<grad_theta L(x, y), v>`` for a constant ``v``."""
    return GradPass(model, x, y).bilinear(v)[0]
