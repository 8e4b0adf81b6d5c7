"""
Test Suite for the Tensor Core
Conv oracle equivalence, per-op gradient checks and computation tape behaviour
"""

import numpy as np
import pytest

from errors import ContractError, DomainError, ShapeError
from tensor_core import (
    LOG_CLAMP,
    ComputationTape,
    Tensor,
    add,
    backward,
    clamp,
    concat,
    conv2d,
    exp,
    gather,
    global_mean_pool,
    gradcheck,
    l1norm,
    leaky_relu,
    linear,
    log,
    log_softmax,
    mean,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
    safe_log,
    scale,
    sigmoid,
    smooth_l1,
    softmax,
    square,
    sub,
    sum_all,
    transpose,
)

OP_TOLERANCE = 1e-4


def naive_conv(x, w, b, stride, padding):
    """Per-output-element reference cross-correlation"""
    c, h, wd = x.shape
    out_c, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((out_c, ho, wo))
    for o in range(out_c):
        for i in range(ho):
            for j in range(wo):
                window = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[o, i, j] = np.sum(window * w[o]) + b[o]
    return out


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)


def away_from(values, points, margin=0.05):
    """Push values at least `margin` away from non-differentiable points"""
    values = np.array(values, dtype=np.float64)
    for p in points:
        close = np.abs(values - p) < margin
        values[close] = p + margin * np.where(values[close] >= p, 2.0, -2.0)
    return values


def test_conv2d_matches_naive_oracle():
    """conv2d agrees with the per-element oracle over random configurations"""
    rng = np.random.default_rng(0)
    for _ in range(200):
        c, out_c = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        h = int(rng.integers(k, 8))
        w = int(rng.integers(k, 8))
        x = rng.normal(size=(c, h, w))
        kernel = rng.normal(size=(out_c, c, k, k))
        bias = rng.normal(size=out_c)
        got = conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=stride, padding=padding).data
        want = naive_conv(x, kernel, bias, stride, padding)
        assert got.shape == want.shape, f"shape {got.shape} != {want.shape}"
        assert np.max(np.abs(got - want)) <= 1e-6


def test_conv2d_batch_axis_matches_single_images():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 6, 5))
    kernel = Tensor(rng.normal(size=(4, 3, 3, 3)))
    batched = conv2d(Tensor(x), kernel, padding=1).data
    for n in range(2):
        single = conv2d(Tensor(x[n]), kernel, padding=1).data
        np.testing.assert_allclose(batched[n], single, atol=1e-12)


def test_conv2d_output_size_law():
    x = Tensor(np.zeros((1, 9, 7)))
    out = conv2d(x, Tensor(np.zeros((2, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 5, 4)


def test_conv2d_shape_errors():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("name, build", [
    ("conv2d", lambda rng: ((param(rng, 2, 5, 5), param(rng, 3, 2, 3, 3), param(rng, 3)),
                            lambda x, w, b: sum_all(square(conv2d(x, w, b, stride=2, padding=1))))),
    ("leaky_relu", lambda rng: ((Tensor(away_from(rng.normal(size=(3, 4)), [0.0]), requires_grad=True),),
                                lambda x: sum_all(square(leaky_relu(x, 0.2))))),
    ("sigmoid", lambda rng: ((param(rng, 3, 4),), lambda x: sum_all(square(sigmoid(x))))),
    ("exp", lambda rng: ((param(rng, 5),), lambda x: sum_all(exp(x)))),
    ("log", lambda rng: ((Tensor(rng.uniform(0.5, 2.0, size=6), requires_grad=True),),
                         lambda x: sum_all(square(log(x))))),
    ("clamp", lambda rng: ((Tensor(np.array([-1.7, -0.6, 0.3, 0.9, 1.4, -1.2]), requires_grad=True),),
                           lambda x: sum_all(square(clamp(x, -1.0, 1.0))))),
    ("smooth_l1", lambda rng: ((Tensor(away_from(rng.normal(size=8), [-0.5, 0.5]), requires_grad=True),),
                               lambda x: sum_all(smooth_l1(x, 0.5)))),
    ("add_sub_mul", lambda rng: ((param(rng, 2, 3), param(rng, 2, 3)),
                                 lambda a, b: sum_all(mul(add(a, b), sub(a, b))))),
    ("scale_scalar", lambda rng: ((param(rng, 4),), lambda a: sum_all(square(add(scale(a, 3.0), 0.5))))),
    ("mean", lambda rng: ((param(rng, 3, 3),), lambda x: square(mean(x)))),
    ("l1norm", lambda rng: ((Tensor(away_from(rng.normal(size=7), [0.0]), requires_grad=True),),
                            lambda x: l1norm(x))),
    ("global_mean_pool", lambda rng: ((param(rng, 2, 3, 4, 4),), lambda x: sum_all(square(global_mean_pool(x))))),
    ("pixel_shuffle", lambda rng: ((param(rng, 8, 2, 3), param(rng, 2, 4, 6)),
                                   lambda x, w: sum_all(mul(pixel_shuffle(x, 2), w)))),
    ("pixel_unshuffle", lambda rng: ((param(rng, 2, 4, 6), param(rng, 8, 2, 3)),
                                     lambda x, w: sum_all(mul(pixel_unshuffle(x, 2), w)))),
    ("concat", lambda rng: ((param(rng, 2, 3), param(rng, 1, 3), param(rng, 3, 3)),
                            lambda a, b, w: sum_all(mul(concat([a, b], axis=0), w)))),
    ("reshape_transpose", lambda rng: ((param(rng, 2, 3, 4), param(rng, 4, 6)),
                                       lambda x, w: sum_all(mul(reshape(transpose(x, (2, 0, 1)), (4, 6)), w)))),
    ("gather", lambda rng: ((param(rng, 4, 3), param(rng, 5, 3)),
                            lambda x, w: sum_all(mul(gather(x, [0, 2, 2, 3, 0]), w)))),
    ("linear", lambda rng: ((param(rng, 3, 4), param(rng, 2, 4), param(rng, 2)),
                            lambda x, w, b: sum_all(square(linear(x, w, b))))),
    ("log_softmax", lambda rng: ((param(rng, 3, 4), param(rng, 3, 4)),
                                 lambda x, w: sum_all(mul(log_softmax(x), w)))),
    ("softmax", lambda rng: ((param(rng, 3, 4), param(rng, 3, 4)),
                             lambda x, w: sum_all(mul(softmax(x), w)))),
])
def test_gradcheck_per_op(name, build):
    """Analytic gradients match central differences for every differentiable op"""
    inputs, fn = build(np.random.default_rng(42))
    error = gradcheck(fn, inputs, h=1e-4)
    assert error <= OP_TOLERANCE, f"{name}: relative error {error:.3e}"


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = square(x)
    assert not y.requires_grad, "inference outside a tape must not track gradients"


def test_fan_out_accumulates_gradients():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(mul(x, x))
    grads = backward(loss, tape)
    np.testing.assert_allclose(grads[x], 2.0 * x.data)
    assert tape.is_topologically_ordered()


def test_unreached_leaf_gets_zero_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_all(square(a))
        square(b)
    backward(loss, tape)
    assert np.array_equal(b.grad, np.zeros(2)), "a leaf the loss ignores gets a zero gradient"
    np.testing.assert_allclose(a.grad, [2.0, 2.0])


def test_backward_requires_scalar_on_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with ComputationTape() as tape:
        y = square(x)
    with pytest.raises(ContractError):
        backward(y, tape)
    with pytest.raises(ContractError):
        backward(sum_all(Tensor(np.ones(2))), tape)


def test_tensor_buffers_are_read_only():
    t = Tensor(np.zeros(3))
    with pytest.raises(ValueError):
        t.data[0] = 1.0
    t.assign(np.ones(3))
    assert t.data.sum() == 3.0
    with pytest.raises(ShapeError):
        t.assign(np.ones(4))


def test_log_of_non_positive_names_index():
    with pytest.raises(DomainError) as info:
        log(Tensor(np.array([[1.0, 2.0], [0.0, 3.0]])))
    assert info.value.index == (1, 0)


def test_safe_log_clamps_zero():
    value = safe_log(Tensor(np.array([0.0]), dtype=np.float64)).item()
    assert value == pytest.approx(np.log(LOG_CLAMP))


def test_first_non_finite_names_op():
    x = Tensor(np.array([1.0, 1000.0]), requires_grad=True)
    with np.errstate(over="ignore"):
        with ComputationTape() as tape:
            y = scale(x, 2.0)
            exp(y)
    assert tape.first_non_finite() == "exp#1"


def test_scalar_tensors_stay_zero_dimensional():
    p = Tensor(np.array(2.0), requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        loss = square(p)
        total = add(mean(Tensor(np.ones(3))), loss)
    assert loss.shape == () and total.shape == ()
    backward(total, tape)
    assert p.grad.shape == p.shape == ()
    assert p.grad == pytest.approx(4.0)


def test_nan_passes_through_log_to_the_finiteness_scan():
    x = Tensor(np.array([1.0, np.nan]), requires_grad=True)
    with np.errstate(invalid="ignore"):
        with ComputationTape() as tape:
            y = mul(x, x)
            safe_log(y)
    assert tape.first_non_finite() == "mul#0"
    with pytest.raises(DomainError):
        log(Tensor(np.array([np.nan, -1.0])))


def test_pixel_shuffle_layout_and_inverse():
    x = Tensor(np.arange(4.0).reshape(4, 1, 1))
    out = pixel_shuffle(x, 2).data
    assert out.shape == (1, 2, 2)
    np.testing.assert_array_equal(out[0], [[0.0, 1.0], [2.0, 3.0]])
    rng = np.random.default_rng(3)
    y = Tensor(rng.normal(size=(2, 12, 3, 5)))
    assert np.array_equal(pixel_unshuffle(pixel_shuffle(y, 2), 2).data, y.data)


def test_arith_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones(2)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        gather(Tensor(np.ones((2, 2))), [2])
