import numpy as np
import pytest

from patchzero_lab.errors import DomainError, ShapeError, TapeError
from patchzero_lab.tensor import (
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    conv2d,
    exp,
    log,
    matmul,
    pool_avg2x,
    precision,
    reduce,
    relu,
    reshape,
    sigmoid,
    sign,
    straight_through,
    tensor_new,
    transpose,
    upsample_nearest2x,
    window_min,
)

ROW_SCALE = np.random.default_rng(42).normal(size=(1, 4)) + 2.0
COLUMN_DIVISOR = np.full((3, 1), 2.5)
PROJECTION = np.arange(12.0).reshape(4, 3) / 10


def weighted(out: Tensor, seed: int = 0) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * w).sum()


def test_tensor_new_checks_shape():
    t = tensor_new([2, 3], list(range(6)))
    assert t.shape == (2, 3)
    with pytest.raises(ShapeError):
        tensor_new([2, 3], [1.0, 2.0])
    with pytest.raises(ShapeError):
        tensor_new([0, 3], [])


def test_broadcast_mismatch_is_a_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@pytest.mark.parametrize(
    "fn, shape",
    [
        (lambda t: weighted(t * ROW_SCALE), (3, 4)),
        (lambda t: weighted(t / COLUMN_DIVISOR - t * t), (3, 4)),
        (lambda t: weighted(sigmoid(t)), (2, 5)),
        (lambda t: weighted(exp(t * 0.5)), (2, 5)),
        (lambda t: weighted(log(t * t + 1.0)), (2, 5)),
        (lambda t: weighted(relu(t)), (3, 3)),
        (lambda t: weighted(reduce(t, "mean", axis=1)), (3, 4)),
        (lambda t: weighted(reduce(t, "max", axis=0)), (3, 4)),
        (lambda t: weighted(transpose(t)), (2, 3)),
        (lambda t: weighted(reshape(t, (3, 2))), (2, 3)),
        (lambda t: weighted(concat([t, t * 2.0], axis=1)), (2, 3)),
        (lambda t: weighted(matmul(t, PROJECTION)), (2, 4)),
        (lambda t: weighted(pool_avg2x(t)), (1, 2, 4, 4)),
        (lambda t: weighted(upsample_nearest2x(t)), (1, 2, 2, 3)),
        (lambda t: weighted(clip(t, -0.5, 0.5)), (3, 3)),
        (lambda t: weighted(window_min(t, 1)), (2, 4, 5)),
    ],
)
def test_gradients_match_central_differences(fn, shape, numeric_grad, analytic_grad, rel_error):
    x = np.random.default_rng(7).normal(size=shape)
    assert rel_error(analytic_grad(fn, x), numeric_grad(fn, x)) <= 1e-6


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients(stride, padding, numeric_grad, analytic_grad, rel_error):
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 2, 5, 5))
    kernel = rng.normal(size=(3, 2, 3, 3))
    bias = rng.normal(size=3)

    def wrt_input(t: Tensor) -> Tensor:
        return weighted(conv2d(t, Tensor(kernel), Tensor(bias), stride=stride, padding=padding))

    def wrt_kernel(t: Tensor) -> Tensor:
        return weighted(conv2d(Tensor(x), t, Tensor(bias), stride=stride, padding=padding))

    assert rel_error(analytic_grad(wrt_input, x), numeric_grad(wrt_input, x)) <= 1e-6
    assert rel_error(analytic_grad(wrt_kernel, kernel), numeric_grad(wrt_kernel, kernel)) <= 1e-6


def test_conv2d_matches_direct_summation():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(2, 3, 6, 6))
    kernel = rng.normal(size=(4, 3, 3, 3))
    bias = rng.normal(size=4)
    with precision("float64"):
        out = conv2d(Tensor(x), Tensor(kernel), Tensor(bias), stride=1, padding=1).data

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((2, 4, 6, 6))
    for n in range(2):
        for f in range(4):
            for i in range(6):
                for j in range(6):
                    expected[n, f, i, j] = np.sum(padded[n, :, i : i + 3, j : j + 3] * kernel[f]) + bias[f]
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_conv2d_rejects_non_integral_output():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), stride=2)


def test_max_routes_gradient_to_first_maximum():
    with precision("float64"):
        a = Tensor([1.0, 3.0, 3.0], requires_grad=True)
        with Tape():
            backward(reduce(a, "max"))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


def test_sign_is_gradient_opaque():
    a = Tensor([-2.0, 0.5, 3.0], requires_grad=True)
    with Tape():
        backward((sign(a) * a).sum())
    np.testing.assert_array_equal(a.grad, np.sign(a.data))


def test_gradients_accumulate_across_backward_calls():
    a = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            backward((a * 3.0).sum())
    np.testing.assert_array_equal(a.grad, [6.0, 6.0])


def test_backward_needs_scalar_loss_under_a_tape():
    a = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        backward(a.sum())
    with Tape():
        out = a * 2.0
        with pytest.raises(ShapeError):
            backward(out)


def test_no_recording_outside_a_tape():
    a = Tensor([1.0], requires_grad=True)
    out = a * 2.0
    assert out.tape_node is None
    assert not out.requires_grad


def test_checked_log_rejects_non_positive():
    with precision("float64", checked=True):
        with pytest.raises(DomainError):
            log(Tensor([1.0, 0.0]))


def test_clip_rejects_inverted_bounds():
    with pytest.raises(DomainError):
        clip(Tensor([0.5]), 1.0, 0.0)


@pytest.mark.parametrize("lo, hi", [(0.0, 1.0), (-0.25, 0.25), (0.5, 0.5)])
def test_clip_is_idempotent(lo, hi):
    x = Tensor(np.random.default_rng(3).normal(size=(4, 5)))
    once = clip(x, lo, hi)
    np.testing.assert_array_equal(clip(once, lo, hi).data, once.data)
    assert once.data.min() >= lo and once.data.max() <= hi


def test_straight_through_forward_hard_backward_identity():
    soft = Tensor([0.2, 0.7, 0.9], requires_grad=True)
    hard = np.array([0.0, 1.0, 1.0])
    with Tape():
        out = straight_through(hard, soft)
        np.testing.assert_array_equal(out.data, hard)
        backward((out * Tensor([1.0, 2.0, 3.0])).sum())
    np.testing.assert_allclose(soft.grad, [1.0, 2.0, 3.0])


def test_window_min_ignores_out_of_bounds_cells():
    x = np.array([[[3.0, 1.0, 4.0], [1.0, 5.0, 9.0], [2.0, 6.0, 5.0]]])
    out = window_min(Tensor(x), 1).data
    expected = np.array([[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 5.0]]])
    np.testing.assert_array_equal(out, expected)
    with pytest.raises(DomainError):
        window_min(Tensor(x), -1)


def test_pool_needs_even_dims():
    with pytest.raises(ShapeError):
        pool_avg2x(Tensor(np.ones((1, 1, 3, 4))))
