import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from unlearn_inversion.data import Dataset, synth_dataset
from unlearn_inversion.defenses import (
    ObfuscationConfig, finetune_defense, obfuscate_unlearn_gradient, prune_model, report, utility_ratio,
)
from unlearn_inversion.harness.config import DatasetConfig
from unlearn_inversion.tensor import ModelState, mlp

vectors = hnp.arrays(np.float64, st.integers(1, 40), elements=st.floats(-100, 100))


def _state(params):
    """Wrap an even-length vector as a 1-input linear model with ``n/2`` outputs."""
    params = np.asarray(params, dtype=np.float64)
    return ModelState(mlp(1, [], params.size // 2), params)


# ---------------------------------------------------------------------------
# Obfuscation
# ---------------------------------------------------------------------------


def test_obfuscation_config_defaults_and_checks():
    assert ObfuscationConfig().clip_norm == 1.2
    with pytest.raises(ValueError):
        ObfuscationConfig(clip_norm=0)
    with pytest.raises(ValueError):
        ObfuscationConfig(noise_sigma=-0.1)


def test_small_gradient_passes_unchanged():
    g = np.array([0.3, -0.4, 0.5])
    out = obfuscate_unlearn_gradient(g, ObfuscationConfig(1.2, 0.0))
    assert np.array_equal(out, g) and out is not g


def test_large_gradient_is_clipped_to_norm():
    g = np.array([3.0, 4.0])
    out = obfuscate_unlearn_gradient(g, ObfuscationConfig(1.2, 0.0))
    assert np.linalg.norm(out) == pytest.approx(1.2, abs=1e-9)
    assert np.allclose(out, g * 1.2 / 5)


@settings(max_examples=100, deadline=None)
@given(vectors, st.floats(0.01, 10))
def test_zero_noise_is_a_pure_clip(g, c):
    out = obfuscate_unlearn_gradient(g, ObfuscationConfig(c, 0.0))
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    n = np.linalg.norm(g)
    if n > c:
        assert np.allclose(out * n, g * np.linalg.norm(out), rtol=1e-9, atol=1e-9)
    else:
        assert np.array_equal(out, g)


def test_noise_is_seeded_gaussian_after_clipping():
    g = np.zeros(20000)
    a = obfuscate_unlearn_gradient(g, ObfuscationConfig(1.2, 0.01, seed=3))
    b = obfuscate_unlearn_gradient(g, ObfuscationConfig(1.2, 0.01, seed=3))
    c = obfuscate_unlearn_gradient(g, ObfuscationConfig(1.2, 0.01, seed=4))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.allclose(a, 0.01 * np.random.default_rng(3).standard_normal(20000))
    assert a.std() == pytest.approx(0.01, rel=0.03)


# ---------------------------------------------------------------------------
# Pruning
# ---------------------------------------------------------------------------


def test_prune_hand_example():
    m = _state([3.0, -1.0, 2.0, -4.0])
    # floor(0.5 * 4) = 2 zeros: the two smallest magnitudes are |-1| and |2|
    assert prune_model(m, 0.5).params.tolist() == [3.0, 0.0, 0.0, -4.0]
    assert prune_model(m, 0.25).params.tolist() == [3.0, 0.0, 2.0, -4.0]


def test_prune_ties_go_to_lower_index():
    m = _state([1.0, -1.0, 1.0, 5.0])
    assert prune_model(m, 0.5).params.tolist() == [0.0, 0.0, 1.0, 5.0]


def test_prune_zero_is_identity():
    m = ModelState(mlp(4, [5], 3), np.random.default_rng(0).standard_normal(mlp(4, [5], 3).param_count))
    out = prune_model(m, 0.0)
    assert out.params.tobytes() == m.params.tobytes()


def test_prune_range():
    m = _state([1.0, 2.0, 3.0, 4.0])
    for p in (-0.1, 1.0):
        with pytest.raises(ValueError):
            prune_model(m, p)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20).flatmap(lambda k: hnp.arrays(np.float64, 2 * k, elements=st.floats(0.5, 100) | st.floats(-100, -0.5))),
       st.floats(0, 0.999))
def test_prune_zero_count_idempotence_and_shrinkage(params, p):
    m = _state(params)
    out = prune_model(m, p)
    assert int((out.params == 0).sum()) == math.floor(p * params.size)
    assert np.all(np.abs(out.params) <= np.abs(m.params))
    assert np.array_equal(prune_model(out, p).params, out.params)
    kept = out.params != 0
    assert np.array_equal(out.params[kept], m.params[kept])
    if kept.any() and (~kept).any():
        assert np.abs(m.params[~kept]).max() <= np.abs(m.params[kept]).min()


# ---------------------------------------------------------------------------
# Fine-tuning defense and utility ratio
# ---------------------------------------------------------------------------


@pytest.fixture
def extra():
    return synth_dataset("tabular_blobs", 100, 3, 4, seed=0)


def test_finetune_zero_lr_identity_and_determinism(extra):
    arch = mlp(4, [5], 3)
    m = ModelState(arch, np.random.default_rng(1).standard_normal(arch.param_count))
    assert finetune_defense(m, extra, 0.0).params.tobytes() == m.params.tobytes()
    a = finetune_defense(m, extra, 0.01, seed=2)
    assert a.params.tobytes() == finetune_defense(m, extra, 0.01, seed=2).params.tobytes()
    assert not np.array_equal(a.params, m.params)
    with pytest.raises(ValueError):
        finetune_defense(m, extra.subset([]), 0.01)


def test_default_extra_size():
    assert DatasetConfig().extra_size == 100


def _constant(cls, c=2):
    """Linear model that predicts ``cls`` for every input."""
    arch = mlp(1, [], c)
    b = np.zeros(c)
    b[cls] = 5.0
    return ModelState(arch, np.r_[np.zeros(c), b])


def test_utility_ratio_examples():
    xs = np.array([[-1.0], [1.0]])
    val = Dataset(xs, [0, 1], 2)
    always0 = _constant(0)
    sign = ModelState(mlp(1, [], 2), np.array([-5.0, 5.0, 0.0, 0.0]))  # accuracy 1.0 on val
    assert utility_ratio(sign, sign, val) == 1.0
    assert utility_ratio(always0, sign, val) == 0.5
    assert utility_ratio(sign, always0, val) == 2.0
    with pytest.raises(ZeroDivisionError):
        utility_ratio(sign, _constant(1), Dataset(xs[:1], [0], 2))


def test_report_record():
    xs = np.array([[-1.0], [1.0]])
    sign = ModelState(mlp(1, [], 2), np.array([-5.0, 5.0, 0.0, 0.0]))
    r = report("prune", 0.7, _constant(0), sign, Dataset(xs, [0, 1], 2))
    rec = r.to_record()
    assert rec == {"defense": "prune", "parameter": 0.7, "accuracy_ratio": 0.5,
                   "defended_accuracy": 0.5, "undefended_accuracy": 1.0}
