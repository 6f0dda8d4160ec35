import numpy as np
import pytest

from patchzero_lab.errors import DomainError, ShapeError, TrainingDivergedError
from patchzero_lab.nn import (
    AdamState,
    Classifier,
    Detector,
    adam_step,
    classifier_forward,
    cross_entropy,
    downsample_mask,
    init_params,
    loss_and_step,
    params_digest,
    pixel_bce,
)
from patchzero_lab.tensor import Tensor, precision


def test_init_is_seeded_and_shaped():
    a = init_params("classifier", 3, image_size=8, num_classes=4)
    b = init_params("classifier", 3, image_size=8, num_classes=4)
    c = init_params("classifier", 4, image_size=8, num_classes=4)
    assert params_digest(a) == params_digest(b) != params_digest(c)
    assert a["conv1.weight"].shape == (16, 3, 3, 3)
    assert a["fc.weight"].shape == (4, 32 * 2 * 2)
    np.testing.assert_array_equal(a["fc.bias"].data, np.zeros(4))


def test_classifier_rejects_image_size_not_divisible_by_four():
    with pytest.raises(ShapeError):
        init_params("classifier", 0, image_size=10)


def test_forward_shapes(tiny_classifier, tiny_detector):
    x = Tensor(np.random.default_rng(0).uniform(size=(5, 3, 8, 8)))
    assert Classifier(tiny_classifier)(x).shape == (5, 4)
    p, aux = Detector(tiny_detector).forward_with_aux(x)
    assert p.shape == (5, 8, 8)
    assert aux.shape == (5, 4, 4)
    assert np.all((p.data > 0) & (p.data < 1))


def test_detector_without_aux_head():
    detector = init_params("detector", 0, with_aux=False)
    _, aux = Detector(detector).forward_with_aux(Tensor(np.zeros((1, 3, 4, 4))))
    assert aux is None


def test_predictions_are_independent_of_batch_composition(tiny_classifier):
    images = np.random.default_rng(1).uniform(size=(6, 3, 8, 8)).astype(np.float32)
    together = Classifier(tiny_classifier).predict(images)
    alone = np.concatenate([Classifier(tiny_classifier).predict(images[i : i + 1]) for i in range(6)])
    np.testing.assert_array_equal(together, alone)


def test_cross_entropy_matches_log_softmax_formula():
    logits = np.array([[2.0, 0.5, -1.0], [0.1, 0.2, 0.3]])
    y = np.array([0, 2])
    with precision("float64"):
        losses = cross_entropy(Tensor(logits), y, reduction="none").data
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    np.testing.assert_allclose(losses, -log_probs[np.arange(2), y], rtol=1e-12)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(DomainError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_pixel_bce_and_aux_target():
    mask = np.ones((1, 4, 4), dtype=np.uint8)
    mask[0, 0, 0] = 0
    np.testing.assert_array_equal(downsample_mask(mask)[0], [[0, 1], [1, 1]])
    with precision("float64"):
        p = Tensor(np.full((1, 4, 4), 0.8))
        loss = pixel_bce(p, mask).item()
    expected = -(15 * np.log(0.8) + np.log(0.2)) / 16
    assert loss == pytest.approx(expected, rel=1e-12)
    with pytest.raises(ShapeError):
        pixel_bce(Tensor(np.full((1, 4, 4), 0.5)), np.ones((1, 2, 2)))


def test_classifier_parameter_gradient(numeric_grad, analytic_grad, rel_error):
    with precision("float64"):
        params = init_params("classifier", 0, image_size=4, num_classes=3)
    x = np.random.default_rng(2).uniform(size=(2, 3, 4, 4))
    y = np.array([0, 2])
    bias = params["fc.bias"].data.copy()

    def loss(b: Tensor) -> Tensor:
        params.tensors["fc.bias"] = b
        return cross_entropy(classifier_forward(params, Tensor(x)), y)

    assert rel_error(analytic_grad(loss, bias), numeric_grad(loss, bias)) <= 1e-6


def test_first_adam_step_moves_by_lr():
    params = init_params("detector", 0)
    before = {name: t.data.copy() for name, t in params.items()}
    grads = {name: np.ones_like(t.data) for name, t in params.items()}
    adam_step(params, grads, AdamState.for_params(params), lr=1e-3)
    assert params.version == 1
    for name, tensor in params.items():
        np.testing.assert_allclose(before[name] - tensor.data, 1e-3, rtol=1e-3)


def test_adam_step_descends_a_quadratic():
    params = init_params("detector", 0)
    bias = params["head.bias"]
    goal = bias.data + 1.0

    def quadratic() -> Tensor:
        diff = bias - goal
        return (diff * diff).sum()

    state = AdamState.for_params(params)
    before = loss_and_step(params, state, 1e-2, quadratic)
    after = loss_and_step(params, state, 1e-2, quadratic)
    assert after < before
    assert quadratic().item() < after


def test_non_finite_gradients_leave_params_untouched():
    params = init_params("detector", 0)
    digest = params_digest(params)
    grads = {name: np.full_like(t.data, np.nan) for name, t in params.items()}
    with pytest.raises(TrainingDivergedError):
        adam_step(params, grads, AdamState.for_params(params), lr=1e-3)
    assert params_digest(params) == digest
    assert params.version == 0


def test_non_finite_loss_is_divergence():
    params = init_params("detector", 0)
    state = AdamState.for_params(params)
    with pytest.raises(TrainingDivergedError):
        loss_and_step(params, state, 1e-3, lambda: params["head.bias"].sum() * np.nan)


def test_frozen_params_share_storage_without_gradients(tiny_detector):
    frozen = tiny_detector.frozen()
    assert frozen["head.weight"].data is tiny_detector["head.weight"].data
    assert not frozen["head.weight"].requires_grad
    copied = tiny_detector.copy()
    copied["head.bias"].data += 1.0
    assert params_digest(copied) != params_digest(tiny_detector)
