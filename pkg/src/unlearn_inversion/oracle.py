"""Black-box prediction oracles.

The label-inference attack only ever sees objects satisfying
:class:`QueryInterface`; :class:`ModelOracle` is the in-process realisation
wrapping a local model.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np

from .tensor import ModelState, forward, softmax


class QueryInterface(Protocol):
    num_classes: int

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Probability vectors ``[B, C]`` for a batch of inputs ``[B, *shape]``."""
        ...


class ModelOracle:
    def __init__(self, model: ModelState):
        self._model = model
        self.num_classes = model.arch.num_classes
        self.input_shape = model.arch.input_shape

    def predict(self, x):
        return softmax(forward(self._model, np.asarray(x, dtype=np.float64).reshape(-1, *self.input_shape)))


class CountingOracle:
    """Wraps another oracle and counts submitted inputs."""

    def __init__(self, inner):
        self.inner = inner
        self.num_classes = inner.num_classes
        self.queries = 0
        self.calls = 0

    def predict(self, x):
        x = np.asarray(x)
        self.calls += 1
        self.queries += x.shape[0]
        return self.inner.predict(x)
