import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mqmk.numerics import (
    AdamState,
    DegenerateVectorError,
    ShapeError,
    Tensor,
    adam_step,
    concat_tokens,
    cosine_similarity,
    cross_entropy,
    gelu,
    layer_norm,
    log_softmax,
    masked_fill,
    matmul,
    no_grad,
    softmax,
)
from mqmk.numerics.gradcheck import check_gradients, numeric_grad, relative_error

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def param(rng, *shape, name=None):
    return Tensor(rng.normal(size=shape), requires_grad=True, name=name)


# ------------------------------------------------------------ forward laws

def test_matmul_shape_law():
    out = matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert out.shape == (2, 4)


def test_matmul_shape_error_names_primitive():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 4\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 4))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_softmax_sums_to_one(v):
    assert abs(softmax(Tensor(v)).values.sum() - 1.0) < 1e-12


def test_layer_norm_constant_vector_is_zero():
    out = layer_norm(Tensor(np.full(8, 3.7)), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    assert np.all(out.values == 0.0)


def test_layer_norm_constant_row_gradient_is_finite():
    x = Tensor(np.full((2, 5), 1.5), requires_grad=True)
    layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5))).sum().backward()
    assert np.isfinite(x.grad).all()


def test_cosine_examples():
    v = Tensor([0.3, -1.2, 4.0])
    assert cosine_similarity(v, v).item() == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    assert cosine_similarity(Tensor([1.0, 1.0]), Tensor([1.0, 0.0])).item() == pytest.approx(math.sqrt(2) / 2, abs=1e-15)


def test_cosine_zero_norm_rejected():
    with pytest.raises(DegenerateVectorError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 4, elements=finite), arrays(np.float64, 4, elements=finite))
def test_cosine_in_range(a, b):
    if np.linalg.norm(a) <= 1e-6 or np.linalg.norm(b) <= 1e-6:
        return
    c = cosine_similarity(Tensor(a), Tensor(b)).item()
    assert -1.0 <= c <= 1.0


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 5, 17):
        assert cross_entropy(Tensor(np.zeros(c)), c - 1).item() == pytest.approx(math.log(c), abs=1e-15)


def test_cross_entropy_saturated():
    logits = np.zeros(4)
    logits[2] = 1000.0
    assert cross_entropy(Tensor(logits), 2).item() < 1e-300


def test_cross_entropy_matches_direct_formula():
    z = np.array([0.5, -0.3, 0.1])
    oracle = -(z[0] - math.log(sum(math.exp(v) for v in z)))
    assert abs(cross_entropy(Tensor(z), 0).item() - oracle) < 1e-12


def test_cross_entropy_out_of_range_label():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros(3)), 3)


# ------------------------------------------------------------ backprop

def test_backprop_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_backprop_dot_self():
    x = Tensor([1.0, 2.0], requires_grad=True)
    matmul(x, x).backward()
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backprop_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


def test_three_layer_network_gradcheck():
    rng = np.random.default_rng(3)
    w1, b1 = param(rng, 5, 7, name="w1"), param(rng, 7, name="b1")
    w2, b2 = param(rng, 7, 6, name="w2"), param(rng, 6, name="b2")
    w3 = param(rng, 6, 4, name="w3")
    g, bb = param(rng, 7, name="gain"), param(rng, 7, name="bias")
    x = Tensor(rng.normal(size=(3, 5)))
    labels = np.array([0, 3, 1])

    def loss():
        h = gelu(layer_norm(matmul(x, w1) + b1, g, bb))
        h = softmax(matmul(h, w2) + b2) * 3.0
        return cross_entropy(matmul(h, w3), labels)

    report = check_gradients(loss, [w1, b1, w2, b2, w3, g, bb])
    assert max(report.values()) < 1e-4, report


@pytest.mark.parametrize("case", ["concat", "cosine", "log_softmax", "mask", "slice", "attention", "mean"])
def test_primitive_gradcheck(case):
    rng = np.random.default_rng(11)
    a = param(rng, 2, 3, 4, name="a")
    b = param(rng, 2, 4, name="b")

    def loss():
        if case == "concat":
            y = concat_tokens([b, a])
            return (y * y).sum()
        if case == "cosine":
            return cosine_similarity(a, b[:, None]).sum() + cosine_similarity(a[0, 0], b[1]) * 2.0
        if case == "log_softmax":
            return log_softmax(a)[..., 1].sum()
        if case == "mask":
            keep = np.array([True, False, True, True])
            return cross_entropy(masked_fill(a[0], keep), [0, 2, 3]) + (b * b).mean()
        if case == "slice":
            return (a[:, 1:] * a[:, 1:]).sum() + (b[np.array([0, 0, 1])] * 3.0).sum()
        if case == "attention":
            q = a.transpose(0, 2, 1)
            att = softmax(matmul(a, q) * 0.5)
            return (matmul(att, a) * a).sum()
        if case == "mean":
            return (a.mean(axis=1) * b).sum() + a.reshape(6, 4).mean()
        raise AssertionError(case)

    report = check_gradients(loss, [a, b])
    assert max(report.values()) < 1e-4, report


def test_relative_error_definition():
    assert relative_error(np.array([1.0]), np.array([1.0 + 1e-6])) == pytest.approx(1e-6, rel=1e-3)
    assert relative_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)


def test_numeric_grad_restores_values():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    before = x.values.copy()
    numeric_grad(lambda: (x * x).sum(), x)
    assert np.array_equal(x.values, before)


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        w = param(rng, 4, 4)
        x = Tensor(rng.normal(size=(3, 4)))
        y = softmax(gelu(matmul(x, w)))
        y.sum().backward()
        return y.values.tobytes(), w.grad.tobytes()

    assert run() == run()


# ------------------------------------------------------------ Adam

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([0.3, -2.0]), requires_grad=True)
    st_ = AdamState()
    for _ in range(5):
        adam_step([p], [np.zeros(2)], st_)
    assert np.array_equal(p.values, [0.3, -2.0])
    assert st_.step == 5


def test_adam_first_step_magnitude():
    p = Tensor(np.zeros(3), requires_grad=True)
    adam_step([p], [np.array([0.7, -5.0, 1e-3])], AdamState(learning_rate=0.005))
    np.testing.assert_allclose(np.abs(p.values), 0.005, rtol=1e-4)


def test_adam_ten_steps_on_square():
    # scalar simulation oracle: w <- w - lr * mhat / (sqrt(vhat) + eps), grad 2w
    w_ref, m, v = 1.0, 0.0, 0.0
    for k in range(1, 11):
        g = 2 * w_ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w_ref -= 0.005 * (m / (1 - 0.9 ** k)) / (math.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    p = Tensor([1.0], requires_grad=True)
    state = AdamState(learning_rate=0.005)
    for _ in range(10):
        adam_step([p], [2 * p.values.copy()], state)
    assert abs(p.values[0]) < 1.0
    assert p.values[0] == pytest.approx(w_ref, abs=1e-15)


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(2)], AdamState())
