import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearn_inversion.tensor import (
    ArchSpec, AvgPool2D, Conv2D, Flatten, LabelError, Linear, ModelState, ReLU, ShapeError,
    GradPass, convnet, cross_entropy, forward, input_grad, loss_and_param_grad, mixed_second_gradient,
    mlp, param_grad, softmax,
)

from conftest import central_diff, random_convnet, random_mlp, rel_err


def _mlp_oracle(model, x):
    """Plain matrix arithmetic for a Linear/ReLU stack."""
    a = np.asarray(x, dtype=np.float64)
    for layer, p in zip(model.arch.layers, model.layer_params()):
        if isinstance(layer, Linear):
            a = p[0] @ a + (p[1] if layer.bias else 0.0)
        else:
            a = np.maximum(a, 0.0)
    return a


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


def test_arch_shapes_compose():
    arch = convnet((3, 16, 16), [8], 6)
    assert arch.num_classes == 6
    assert arch.param_count == 8 * 3 * 9 + 8 + 6 * 8 * 8 * 8 + 6
    with pytest.raises(ShapeError):
        ArchSpec((4,), (Linear(5, 3),))
    with pytest.raises(ShapeError):
        ArchSpec((4,), (Linear(4, 1),))  # C >= 2


def test_arch_text_round_trip_covers_every_layer():
    arch = ArchSpec((2, 6, 6), (Conv2D(2, 3, 3, 2, 1), ReLU(), AvgPool2D(3), Flatten(), Linear(3, 4, False)))
    assert ArchSpec.from_text(arch.to_text()) == arch
    with pytest.raises(ValueError):
        ArchSpec.from_text("input:4|softplus")


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.lists(st.integers(1, 9), max_size=3), st.integers(2, 6))
def test_mlp_text_round_trip(d, hidden, c):
    arch = mlp(d, hidden, c)
    assert ArchSpec.from_text(arch.to_text()) == arch


def test_model_state_validates_and_is_read_only():
    arch = mlp(3, [], 2)
    with pytest.raises(ShapeError):
        ModelState(arch, np.zeros(5))
    m = ModelState(arch, np.zeros(arch.param_count))
    with pytest.raises(ValueError):
        m.params[0] = 1.0


# ---------------------------------------------------------------------------
# forward / softmax / cross-entropy
# ---------------------------------------------------------------------------


def test_zero_weight_linear_model_gives_zero_logits():
    arch = mlp(5, [4], 3)
    m = ModelState(arch, np.zeros(arch.param_count))
    assert np.all(forward(m, np.random.default_rng(0).uniform(size=5)) == 0.0)


def test_identity_like_linear():
    arch = ArchSpec((1,), (Linear(1, 2),))
    m = ModelState(arch, [1.0, 1.0, 0.0, 0.0])
    assert forward(m, [0.7]).tolist() == [0.7, 0.7]


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_matrix_oracle(seed):
    m = random_mlp(seed, (7, 9, 4))
    x = np.random.default_rng(100 + seed).uniform(size=7)
    assert np.max(np.abs(forward(m, x) - _mlp_oracle(m, x))) <= 1e-12


def test_forward_rejects_wrong_shape(small_mlp):
    with pytest.raises(ShapeError):
        forward(small_mlp, np.zeros(5))


def test_forward_is_pure(small_mlp):
    x = np.random.default_rng(1).uniform(size=(4, 6))
    assert forward(small_mlp, x).tobytes() == forward(small_mlp, x).tobytes()


def test_softmax_examples():
    assert softmax([0.0, 0.0]).tolist() == [0.5, 0.5]
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-300 + 1e-12
    getcontext().prec = 50
    exps = [Decimal(v).exp() for v in (1, 2, 3)]
    ref = [float(e / sum(exps)) for e in exps]
    assert np.max(np.abs(softmax([1.0, 2.0, 3.0]) - ref)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12))
def test_softmax_sums_to_one(z):
    p = softmax(np.array(z))
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_cross_entropy_examples():
    assert cross_entropy(np.zeros(10), 3) == pytest.approx(math.log(10), abs=1e-12)
    assert cross_entropy(np.array([50.0, 0.0, 0.0]), 0) < 1e-20
    z = np.array([0.3, -1.2, 2.0])
    y = np.array([0.2, 0.5, 0.3])
    getcontext().prec = 50
    ez = [Decimal(float(v)).exp() for v in z]
    lse = sum(ez).ln()
    ref = float(-sum(Decimal(float(yi)) * (Decimal(float(zi)) - lse) for yi, zi in zip(y, z)))
    assert cross_entropy(z, y) == pytest.approx(ref, abs=1e-12)


def test_cross_entropy_label_errors():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros(3), 3)
    with pytest.raises(LabelError):
        cross_entropy(np.zeros(3), np.array([0.5, 0.3, 0.1]))
    with pytest.raises(LabelError):
        cross_entropy(np.zeros(3), np.array([1.2, -0.2, 0.0]))


# ---------------------------------------------------------------------------
# First-order gradients
# ---------------------------------------------------------------------------


def _loss_at(model, params, x, y):
    return loss_and_param_grad(model.with_params(params), x, y)[0]


@pytest.mark.parametrize("seed", range(10))
def test_param_grad_matches_finite_differences(seed):
    m = random_mlp(seed, (6, 10, 10, 4))
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=(3, 6)), rng.integers(0, 4, size=3)
    fd = central_diff(lambda p: _loss_at(m, p, x, y), m.params)
    assert rel_err(param_grad(m, x, y), fd) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_input_grad_matches_finite_differences(seed):
    m = random_mlp(seed, (6, 10, 10, 4))
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=6), int(rng.integers(0, 4))
    fd = central_diff(lambda xx: cross_entropy(forward(m, xx), y), x)
    assert rel_err(input_grad(m, x, y), fd) <= 1e-5


def test_conv_gradients_match_finite_differences():
    m = random_convnet(3)
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(2, 2, 6, 6))
    y = np.array([0, 2])
    fd = central_diff(lambda p: _loss_at(m, p, x, y), m.params)
    assert rel_err(param_grad(m, x, y), fd) <= 1e-5
    fdx = central_diff(lambda xx: cross_entropy(forward(m, xx), y), x)
    assert rel_err(input_grad(m, x, y), fdx) <= 1e-5


def test_strided_padded_conv_gradients():
    arch = ArchSpec((2, 7, 7), (Conv2D(2, 3, 3, 2, 1), ReLU(), Flatten(), Linear(48, 3)))
    m = ModelState(arch, 0.4 * np.random.default_rng(5).standard_normal(arch.param_count))
    x = np.random.default_rng(6).uniform(size=(2, 7, 7))
    fd = central_diff(lambda p: _loss_at(m, p, x, 1), m.params)
    assert rel_err(param_grad(m, x, 1), fd) <= 1e-5


def test_frozen_parameter_has_zero_gradient():
    # a hidden unit whose outgoing weights are zero cannot affect the loss through its bias
    arch = mlp(3, [2], 2)
    m = random_mlp(0, (3, 2, 2))
    p = np.array(m.params)
    w2 = m.layer_params(p)[2][0]
    w2[:, 0] = 0.0
    m = m.with_params(p)
    g = m.layer_params(param_grad(m, np.array([0.2, 0.4, 0.9]), 1))
    assert g[0][1][0] == 0.0 and np.all(g[0][0][0] == 0.0)
    assert arch == m.arch


def test_duplicated_batch_equals_single_sample(small_mlp):
    x = np.random.default_rng(2).uniform(size=6)
    single = param_grad(small_mlp, x, 1)
    dup = param_grad(small_mlp, np.stack([x, x, x]), [1, 1, 1])
    assert np.max(np.abs(single - dup)) <= 1e-14


def test_input_grad_zero_when_final_layer_zero():
    m = random_mlp(1, (6, 8, 3))
    p = np.array(m.params)
    w, b = m.layer_params(p)[2]
    w[:] = 0.0
    b[:] = 0.3
    assert np.all(input_grad(m.with_params(p), np.full(6, 0.5), 2) == 0.0)


def test_hard_and_one_hot_labels_agree(small_mlp):
    x = np.random.default_rng(3).uniform(size=6)
    a = input_grad(small_mlp, x, 2)
    b = input_grad(small_mlp, x, np.eye(3)[2])
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# Mixed second-order gradient
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_mixed_second_gradient_matches_finite_differences(seed):
    m = random_mlp(seed, (5, 12, 3))
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(size=5), int(rng.integers(0, 3))
    v = rng.standard_normal(m.param_count)
    fd = central_diff(lambda xx: param_grad(m, xx, y) @ v, x)
    assert rel_err(mixed_second_gradient(m, x, y, v), fd) <= 1e-4


def test_mixed_second_gradient_on_convnet():
    m = random_convnet(7)
    rng = np.random.default_rng(7)
    x = rng.uniform(size=(2, 6, 6))
    v = rng.standard_normal(m.param_count)
    fd = central_diff(lambda xx: param_grad(m, xx, 1) @ v, x)
    assert rel_err(mixed_second_gradient(m, x, 1, v), fd) <= 1e-4


def test_mixed_second_gradient_linear_in_v(small_mlp):
    rng = np.random.default_rng(4)
    x = rng.uniform(size=6)
    v1, v2 = rng.standard_normal((2, small_mlp.param_count))
    assert np.all(mixed_second_gradient(small_mlp, x, 0, np.zeros(small_mlp.param_count)) == 0.0)
    lhs = mixed_second_gradient(small_mlp, x, 0, v1 + v2)
    rhs = mixed_second_gradient(small_mlp, x, 0, v1) + mixed_second_gradient(small_mlp, x, 0, v2)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10


def test_mixed_second_gradient_rejects_wrong_length(small_mlp):
    with pytest.raises(ShapeError):
        mixed_second_gradient(small_mlp, np.zeros(6), 0, np.zeros(3))


def test_soft_label_derivative_of_bilinear_form(small_mlp):
    rng = np.random.default_rng(8)
    x = rng.uniform(size=6)
    y = softmax(rng.standard_normal(3))
    v = rng.standard_normal(small_mlp.param_count)
    _, dy = GradPass(small_mlp, x, y).bilinear(v)
    h = 1e-5
    for _ in range(3):
        # zero-sum directions keep y on the simplex
        d = rng.standard_normal(3)
        d -= d.mean()
        d *= 0.1 / np.abs(d).max()
        fd = (param_grad(small_mlp, x, y + h * d) @ v - param_grad(small_mlp, x, y - h * d) @ v) / (2 * h)
        assert dy[0] @ d == pytest.approx(fd, rel=1e-6, abs=1e-12)
