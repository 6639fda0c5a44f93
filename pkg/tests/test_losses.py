import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_grads
from usi.losses import (
    INF,
    LOG_FLOOR,
    KDWeights,
    cross_entropy,
    cross_entropy_from_logits,
    kl_distill_loss,
    softmax_temperature,
    usi_loss,
)
from usi.tensor import DomainError, ShapeError, Tensor, backward


def soft_labels(rng, b, k):
    y = rng.uniform(size=(b, k))
    return y / y.sum(axis=1, keepdims=True)


def test_temperature_softmax_limits(rng):
    z = rng.normal(size=(3, 6))
    p = softmax_temperature(Tensor(z), 1e-3).data
    np.testing.assert_allclose(p, np.eye(6)[z.argmax(axis=1)], atol=1e-12)
    flat = softmax_temperature(Tensor(z), 1e6).data
    np.testing.assert_allclose(flat, 1 / 6, atol=1e-5)
    with pytest.raises(DomainError):
        softmax_temperature(Tensor(z), 0.0)


def test_cross_entropy_one_hot_value():
    p = Tensor(np.array([[0.25, 0.75], [0.5, 0.5]]))
    y = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert cross_entropy(p, y).item() == pytest.approx(-(math.log(0.75) + math.log(0.5)) / 2)


def test_cross_entropy_zero_probability_is_finite():
    p = Tensor(np.array([[0.0, 1.0]]), requires_grad=True)
    val = cross_entropy(p, np.array([[1.0, 0.0]]))
    assert val.item() == pytest.approx(-math.log(LOG_FLOOR))
    backward(val)
    assert np.all(np.isfinite(p.grad))


def test_cross_entropy_shape_error():
    with pytest.raises(ShapeError):
        cross_entropy(Tensor(np.full((2, 3), 1 / 3)), np.zeros((2, 4)))


def test_ce_logits_matches_ce_of_softmax(rng):
    z = rng.normal(size=(4, 5))
    y = soft_labels(rng, 4, 5)
    a = cross_entropy_from_logits(Tensor(z), y).item()
    b = cross_entropy(softmax_temperature(Tensor(z), 1.0), y).item()
    assert a == pytest.approx(b, rel=1e-12)


def test_ce_gradient():
    y = soft_labels(np.random.default_rng(0), 3, 4)
    check_grads(lambda z: cross_entropy_from_logits(z, y), [(3, 4)])
    check_grads(lambda p: cross_entropy(p, y), [(3, 4)], positive=True)


@pytest.mark.parametrize("tau", [0.1, 1.0, 2.0, 5.0, 10.0])
def test_kl_gradient(tau):
    zt = np.random.default_rng(1).normal(size=(3, 4))
    check_grads(lambda z: kl_distill_loss(z, zt, tau), [(3, 4)])


@pytest.mark.parametrize("tau", [0.1, 1.0, 2.0, 5.0, 10.0])
def test_kl_closed_form_gradient(tau, rng):
    b, k = 6, 5
    zs, zt = rng.normal(size=(b, k)) * 3, rng.normal(size=(b, k)) * 3
    s = Tensor(zs, requires_grad=True)
    backward(kl_distill_loss(s, zt, tau))
    ps = softmax_temperature(Tensor(zs), tau).data
    pt = softmax_temperature(Tensor(zt), tau).data
    np.testing.assert_allclose(s.grad, tau * (ps - pt) / b, rtol=0, atol=1e-10)


def test_kl_is_zero_for_identical_logits_and_nonnegative(rng):
    z = rng.normal(size=(4, 3))
    assert abs(kl_distill_loss(Tensor(z), z, 2.0).item()) < 1e-14
    assert kl_distill_loss(Tensor(z), rng.normal(size=(4, 3)), 2.0).item() > 0


def test_kl_teacher_receives_no_gradient(rng):
    t = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    s = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    backward(kl_distill_loss(s, t, 1.0))
    assert t.grad is None and s.grad is not None


@pytest.mark.parametrize("alpha", [0.0, 1.0, 5.0, INF])
def test_combined_loss_gradient(alpha):
    rng = np.random.default_rng(2)
    zt, y = rng.normal(size=(3, 4)), soft_labels(rng, 3, 4)
    check_grads(lambda z: usi_loss(z, zt, y, KDWeights(alpha, 2.0)).total, [(3, 4)])


def test_combined_loss_decomposition(rng):
    zs, zt, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), soft_labels(rng, 4, 3)
    parts = usi_loss(Tensor(zs), zt, y, KDWeights(5.0, 1.0))
    assert parts.total.item() == pytest.approx(parts.ce + 5.0 * parts.kl, rel=1e-12)
    ce_only = usi_loss(Tensor(zs), zt, y, KDWeights(0.0))
    assert ce_only.kl is None and ce_only.total.item() == pytest.approx(parts.ce)
    kl_only = usi_loss(Tensor(zs), zt, y, KDWeights(INF))
    assert kl_only.ce is None and kl_only.total.item() == pytest.approx(parts.kl)


def test_inf_alpha_gradient_ignores_labels(rng):
    zs, zt = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    grads = []
    for y in (np.eye(3)[[0, 1, 2, 0]], np.eye(3)[[2, 2, 1, 0]]):
        s = Tensor(zs, requires_grad=True)
        backward(usi_loss(s, zt, y, KDWeights(INF)).total)
        grads.append(s.grad)
    np.testing.assert_array_equal(*grads)


def test_weights_validation():
    with pytest.raises(ValueError):
        KDWeights(-1.0)
    with pytest.raises(ValueError):
        KDWeights(float("nan"))
    with pytest.raises(DomainError):
        KDWeights(1.0, 0.0)
    assert KDWeights(INF).kl_only and not KDWeights(1e12).kl_only


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 20.0), st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31))
def test_kl_closed_form_property(tau, b, k, seed):
    rng = np.random.default_rng(seed)
    zs, zt = rng.normal(size=(b, k)), rng.normal(size=(b, k))
    s = Tensor(zs, requires_grad=True)
    backward(kl_distill_loss(s, zt, tau))
    ps = softmax_temperature(Tensor(zs), tau).data
    pt = softmax_temperature(Tensor(zt), tau).data
    np.testing.assert_allclose(s.grad, tau * (ps - pt) / b, atol=1e-10)
