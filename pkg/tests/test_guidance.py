import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latentopt.errors import InvalidArgumentError, NumericalFailureError
from latentopt.guidance import (
    ClassTargetLoss,
    ScalarTargetLoss,
    SphericalDistanceLoss,
    classifier_guided_ddim,
    loss_eval,
    loss_grad,
    spherical_distance,
    target_probability,
)
from latentopt.models import (
    ClassifierModel,
    ScoreModel,
    classifier_forward,
    embed,
    init_classifier,
    init_embedding,
    init_score,
    zeros_mlp,
)
from latentopt.numerics import Rng, gaussian_sample
from latentopt.sampling import ddim_generate
from latentopt.schedule import make_schedule


def central_diff(f, x, h=1e-6):
    return np.array([(f(x + h * e) - f(x - h * e)) / (2 * h) for e in np.eye(len(x))])


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def constant_score(value, low=1.0, high=10.0):
    mlp = zeros_mlp([2, 1])
    mlp.biases[0][0] = math.log((value - low) / (high - value))
    return ScoreModel(mlp, 2, low, high)


def constant_classifier(logits):
    mlp = zeros_mlp([2, len(logits)])
    mlp.biases[0][:] = logits
    return ClassifierModel(mlp, 2, len(logits))


unit_angles = st.floats(0, 2 * math.pi)


def test_spherical_distance_examples():
    e = np.eye(3)
    assert spherical_distance(e[0], e[0]) == 0.0
    # closed forms: 2*sqrt(pi/4) and 2*sqrt(pi/2)
    assert spherical_distance(e[0], e[1]) == pytest.approx(1.7724538509055159, abs=1e-12)
    assert spherical_distance(e[0], -e[0]) == pytest.approx(2.5066282746310002, abs=1e-12)


def test_spherical_distance_clamps_roundoff():
    x = np.array([1.0, 0.0])
    assert np.isfinite(spherical_distance(x * (1 + 1e-15), -x * (1 + 1e-15)))


@given(unit_angles, unit_angles)
def test_spherical_distance_symmetric_and_monotone(a, b):
    u = np.array([math.cos(a), math.sin(a)])
    v = np.array([math.cos(b), math.sin(b)])
    assert spherical_distance(u, v) == pytest.approx(spherical_distance(v, u), abs=1e-12)
    # monotone in the angle between them
    ang = abs(math.remainder(a - b, 2 * math.pi))
    closer = np.array([math.cos(a + 0.5 * (b - a)), math.sin(a + 0.5 * (b - a))]) if ang > 1e-6 else u
    if abs(math.remainder(b - a, 2 * math.pi)) == abs(b - a):
        assert spherical_distance(u, closer) <= spherical_distance(u, v) + 1e-12


def test_spherical_distance_zero_iff_equal():
    u = np.array([0.6, 0.8])
    assert spherical_distance(u, u) == 0
    assert spherical_distance(u, np.array([0.8, 0.6])) > 0


def test_scalar_target_examples():
    L = ScalarTargetLoss(constant_score(3.0), 10.0)
    assert loss_eval(L, np.zeros(2)) == pytest.approx(7.0, abs=1e-12)
    at = ScalarTargetLoss(constant_score(10.0 - 1e-9), 10.0 - 1e-9)
    assert loss_eval(at, np.zeros(2)) == pytest.approx(0.0, abs=1e-12)


def test_scalar_target_zero_grad_at_kink():
    head = init_score(2, Rng(3))
    x = np.array([0.2, 0.1])
    from latentopt.models import score

    L = ScalarTargetLoss(head, float(score(head, x)))
    np.testing.assert_array_equal(loss_grad(L, x), np.zeros(2))


def test_class_target_zero_at_certain_point():
    clf = constant_classifier([1000.0, -1000.0, -1000.0])
    for form in ("cross_entropy", "bce"):
        assert loss_eval(ClassTargetLoss(0, clf, form), np.zeros(2)) == 0.0


def test_loss_validation():
    clf = init_classifier(2, 3, Rng(0))
    with pytest.raises(InvalidArgumentError):
        ClassTargetLoss(3, clf)
    with pytest.raises(InvalidArgumentError):
        ClassTargetLoss(0, clf, weight=0.0)
    with pytest.raises(InvalidArgumentError):
        ClassTargetLoss(0, clf, form="hinge")
    with pytest.raises(InvalidArgumentError):
        SphericalDistanceLoss(np.array([1.0, 1.0]), init_embedding(2, 2, Rng(0)))
    with pytest.raises(InvalidArgumentError):
        loss_eval(ClassTargetLoss(0, clf), np.zeros(3))


def make_losses(seed):
    rng = Rng(seed)
    em = init_embedding(2, 4, rng)
    target = embed(em, gaussian_sample(rng, (2,)))
    clf = init_classifier(2, 5, rng, hidden=(16,))
    head = init_score(2, rng)
    return [
        SphericalDistanceLoss(target, em, 0.7),
        ClassTargetLoss(2, clf, "cross_entropy", 1.3),
        ClassTargetLoss(4, clf, "bce", 0.4),
        ScalarTargetLoss(head, 10.0, 2.0),
    ]


@given(st.integers(0, 2**32))
def test_loss_grads_match_finite_differences(seed):
    x = gaussian_sample(Rng(seed ^ 0xABCDEF), (2,))
    for L in make_losses(seed):
        if isinstance(L, ScalarTargetLoss) and abs(L.value(x) / L.weight) < 1e-6:
            continue
        if isinstance(L, SphericalDistanceLoss) and L.value(x) < 1e-3:
            continue  # cusp of the square root
        fd = central_diff(lambda z: float(L.value(z)), x)
        assert rel_err(loss_grad(L, x), fd) < 1e-6, type(L).__name__


def test_weight_doubles_gradient():
    x = np.array([0.3, -0.6])
    for L in make_losses(7):
        doubled = type(L)(**{**L.__dict__, "weight": 2 * L.weight})
        np.testing.assert_array_equal(loss_grad(doubled, x), 2 * loss_grad(L, x))


def test_batched_grad_is_row_wise():
    L = make_losses(1)[1]
    X = gaussian_sample(Rng(2), (5, 2))
    rows = np.stack([loss_grad(L, x) for x in X])
    np.testing.assert_allclose(loss_grad(L, X), rows, rtol=1e-12, atol=1e-15)


def test_guidance_off_is_plain_ddim(rand_model):
    s = make_schedule(20)
    L = make_losses(0)[1]
    z = gaussian_sample(Rng(4), (8, 2))
    np.testing.assert_array_equal(classifier_guided_ddim(rand_model, L, z, s, None, 0.0), ddim_generate(rand_model, z, s))


def test_constant_loss_is_unguided(rand_model):
    s = make_schedule(20)
    # zero weights: logits do not depend on the input, so the gradient is zero
    L = ClassTargetLoss(0, constant_classifier([0.3, -0.2]))
    z = gaussian_sample(Rng(4), (8, 2))
    np.testing.assert_array_equal(classifier_guided_ddim(rand_model, L, z, s, None, 5.0), ddim_generate(rand_model, z, s))


def test_negative_scale_rejected(rand_model):
    with pytest.raises(InvalidArgumentError):
        classifier_guided_ddim(rand_model, make_losses(0)[1], np.zeros(2), make_schedule(3), None, -1.0)


def test_non_finite_guidance_names_step(rand_model):
    L = ClassTargetLoss(0, constant_classifier([np.nan, 0.0]))
    with pytest.raises(NumericalFailureError) as err:
        classifier_guided_ddim(rand_model, L, np.ones(2), make_schedule(7), None, 1.0)
    assert err.value.step == 7


def test_guidance_gradient_matches_finite_differences(rand_model):
    """The per-step gradient w.r.t. x_t, through the x0 estimate and the
    denoiser, against central differences of the loss at the estimate."""
    from latentopt.models import denoiser_vjp
    from latentopt.sampling import one_step_x0

    s = make_schedule(10)
    L = make_losses(3)[1]
    x, t = np.array([0.4, -0.9]), 6
    ab = s.alpha_bar[t]
    k = math.sqrt(1 - ab)
    x0 = one_step_x0(rand_model, x, t, s)
    g0 = loss_grad(L, x0)
    g = (g0 - k * denoiser_vjp(rand_model, x, t, None, g0)) / math.sqrt(ab)
    fd = central_diff(lambda z: float(L.value(one_step_x0(rand_model, z, t, s))), x)
    assert rel_err(g, fd) < 1e-6


def target_rate(clf, x, j):
    return np.mean(np.argmax(classifier_forward(clf, x), axis=-1) == j)


def test_some_grid_scale_beats_unguided(trained_denoiser, trained_classifier):
    s = make_schedule(50)
    L = ClassTargetLoss(0, trained_classifier, "bce")
    z = gaussian_sample(Rng(31), (64, 2))
    base = target_rate(trained_classifier, ddim_generate(trained_denoiser, z, s), 0)
    rates = [target_rate(trained_classifier, classifier_guided_ddim(trained_denoiser, L, z, s, None, sc), 0)
             for sc in (1.0, 5.0, 30.0)]
    # only s = 30 gets there; s = 1 and s = 5 overshoot at the first step
    assert max(rates) > base
