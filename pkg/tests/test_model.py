"""
Tests for model losses and their derivatives, checked against central differences.
"""
import numpy as np
import pytest

from src.core import LabelQualityParams, ModelSpec, TaskKind, ValidationEnsemble, WeakDataset, identity_params
from src.model import (
    check_task,
    grad_theta,
    hvp_theta,
    member_gradients,
    member_losses,
    mixed_q_vjp,
    mixed_w_vjp,
    per_class_loss,
    predict,
    validation_loss,
    weighted_train_loss,
)

H = 1e-6


def _problem(family, seed=0, n=8, dim=3, k=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    if family == "linear_regression":
        task = TaskKind.regression()
        d = WeakDataset(X, rng.normal(size=n), task)
        Q = rng.normal(0.0, 0.3, size=n)
    else:
        task = TaskKind.classification(k)
        d = WeakDataset(X, rng.integers(0, k, size=n), task)
        Q = rng.dirichlet(np.ones(k), size=n)
    spec = ModelSpec.for_task(family, task, dim, hidden_units=4 if family == "two_layer_mlp" else None,
                              l2_reg=0.05)
    p = LabelQualityParams(rng.uniform(0.2, 1.0, size=n), Q, np.zeros(n, dtype=bool))
    theta = rng.normal(0.0, 0.5, size=spec.n_params)
    return spec, d, p, theta, rng


FAMILIES = ["linear_regression", "softmax_regression", "two_layer_mlp"]


def _central(f, x, h=H):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("family", FAMILIES)
def test_grad_matches_finite_differences(family):
    """Test the analytic gradient of the training loss."""
    spec, d, p, theta, _ = _problem(family)
    numeric = _central(lambda t: weighted_train_loss(spec, t, d, p), theta)
    np.testing.assert_allclose(grad_theta(spec, theta, d, p), numeric, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("family", FAMILIES)
def test_hvp_matches_finite_differences(family):
    """Test Hessian-vector products against differences of the gradient."""
    spec, d, p, theta, rng = _problem(family, seed=1)
    v = rng.normal(size=theta.size)
    numeric = (grad_theta(spec, theta + H * v, d, p) - grad_theta(spec, theta - H * v, d, p)) / (2 * H)
    np.testing.assert_allclose(hvp_theta(spec, theta, d, p, v), numeric, rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("family", FAMILIES)
def test_mixed_products_match_finite_differences(family):
    """Test vᵀ∂²L/∂θ∂w and vᵀ∂²L/∂θ∂Q against differences of vᵀ∇_θL."""
    spec, d, p, theta, rng = _problem(family, seed=2)
    v = rng.normal(size=theta.size)

    def directional(w, Q):
        shifted = LabelQualityParams(w, Q, p.frozen, strict=False)
        return float(v @ grad_theta(spec, theta, d, shifted))

    numeric_w = _central(lambda w: directional(w, p.Q), np.array(p.w))
    numeric_q = _central(lambda Q: directional(p.w, Q), np.array(p.Q))
    np.testing.assert_allclose(mixed_w_vjp(spec, theta, d, p, v), numeric_w, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(mixed_q_vjp(spec, theta, d, p, v), numeric_q, rtol=1e-5, atol=1e-8)


def test_ridge_hessian_at_zero_weight_is_regularizer():
    """Test that with all weights zero only the l2 term curves the loss."""
    spec, d, p, theta, rng = _problem("linear_regression")
    zero = LabelQualityParams(np.zeros(d.n), p.Q, p.frozen)
    v = rng.normal(size=theta.size)
    np.testing.assert_allclose(hvp_theta(spec, theta, d, zero, v), spec.reg * v)


def test_predict_outputs():
    """Test probability rows and regression shape."""
    spec, d, _, theta, _ = _problem("softmax_regression")
    probs = predict(spec, theta, d.features)
    assert probs.shape == (d.n, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    spec_r, d_r, _, theta_r, _ = _problem("linear_regression")
    assert predict(spec_r, theta_r, d_r.features).shape == (d_r.n,)


def test_predict_dimension_mismatch():
    """Test that wrong feature counts are rejected."""
    spec, _, _, theta, _ = _problem("softmax_regression")
    with pytest.raises(ValueError, match="dimension mismatch"):
        predict(spec, theta, np.zeros((2, 5)))


def test_per_class_loss_is_floored():
    """Test that a hopeless class costs at most -log(1e-12)."""
    spec = ModelSpec.for_task("softmax_regression", TaskKind.classification(2), 1)
    theta = np.array([[1000.0, -1000.0], [0.0, 0.0]]).ravel()
    assert per_class_loss(spec, theta, np.array([1.0]), 1) == pytest.approx(-np.log(1e-12))
    assert per_class_loss(spec, theta, np.array([1.0]), 0) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        per_class_loss(spec, theta, np.array([1.0]), 2)


def test_recovery_point_reduces_to_plain_loss():
    """Test that w = 1 and one-hot Q give the mean cross-entropy plus the ridge term."""
    spec, d, _, theta, _ = _problem("softmax_regression", seed=3)
    p = identity_params(d)
    probs = predict(spec, theta, d.features)
    expected = -np.mean(np.log(probs[np.arange(d.n), d.labels])) + 0.5 * spec.reg * theta @ theta
    assert weighted_train_loss(spec, theta, d, p) == pytest.approx(expected)


def test_member_losses_and_gradients():
    """Test per-member validation losses and their gradients."""
    spec, d, _, theta, _ = _problem("softmax_regression", seed=4)
    ensemble = ValidationEnsemble(d, ([0, 0, 1, 2, 3, 4, 5, 7], list(range(8))))
    losses = member_losses(spec, theta, ensemble)
    for i, member in enumerate(ensemble.member_indices):
        assert losses[i] == pytest.approx(validation_loss(spec, theta, d, member))
    numeric = _central(lambda t: member_losses(spec, t, ensemble)[0], theta)
    np.testing.assert_allclose(member_gradients(spec, theta, ensemble)[0], numeric, rtol=1e-5, atol=1e-8)


def test_check_task_mismatch():
    """Test that a regression model cannot serve a classification task."""
    spec = ModelSpec.for_task("linear_regression", TaskKind.regression(), 2)
    with pytest.raises(ValueError):
        check_task(spec, TaskKind.classification(2))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
