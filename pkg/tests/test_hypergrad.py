"""
Tests for the hypergradient paths and the upper objective.
"""
from unittest.mock import patch

import numpy as np
import pytest

from src.core import (
    LabelQualityParams,
    ModelParams,
    ModelSpec,
    PgsConfig,
    SafenessMode,
    TaskKind,
    ValidationEnsemble,
    WeakDataset,
)
from src.exceptions import BudgetExceededError, CgBreakdownError
from src.harness import gradcheck_instance
from src.hypergrad import (
    HyperGrad,
    HypergradPath,
    check_agreement,
    hypergrad_fd,
    hypergrad_implicit,
    hypergrad_reverse,
    relative_error,
    replay_adjoints,
    upper_grad_theta,
    upper_objective,
)
from src.lower_solver import stable_step, train_convex_with, train_unrolled
from src.model import member_gradients, member_losses

TOLERANCE = 1e-3
GRADCHECK_CONFIG = PgsConfig(newton_tol=1e-11)


@pytest.fixture
def softmax_instance():
    """Seeded three-class instance with (w, Q) inside the feasible region."""
    return gradcheck_instance("softmax_regression", 1, GRADCHECK_CONFIG)


def _with_baseline(spec, theta, ensemble, shift):
    return ensemble.with_baseline(member_losses(spec, theta, ensemble) + shift)


def test_hinge_and_literal_modes(softmax_instance):
    """Test that the hinge drops negative gaps while the literal penalty keeps them."""
    inst = softmax_instance
    theta = np.zeros(inst.spec.n_params)
    ensemble = _with_baseline(inst.spec, theta, inst.ensemble, 0.2)
    hinge = upper_objective(inst.spec, theta, ensemble, PgsConfig(lam=2.0))
    literal = upper_objective(inst.spec, theta, ensemble,
                              PgsConfig(lam=2.0, safeness_mode=SafenessMode.LITERAL))
    assert hinge.safeness == 0.0
    assert hinge.value == pytest.approx(hinge.mean_loss)
    assert literal.safeness == pytest.approx(-0.2)
    assert literal.value == pytest.approx(literal.mean_loss - 0.4)
    np.testing.assert_allclose(hinge.gaps, -0.2)


def test_inactive_hinge_gradient_is_mean_loss_gradient(softmax_instance):
    """Test that an inactive hinge contributes no gradient."""
    inst = softmax_instance
    theta = np.zeros(inst.spec.n_params)
    ensemble = _with_baseline(inst.spec, theta, inst.ensemble, 0.5)
    expected = member_gradients(inst.spec, theta, ensemble).mean(axis=0)
    np.testing.assert_allclose(upper_grad_theta(inst.spec, theta, ensemble, PgsConfig(lam=5.0)), expected)


def test_tied_members_share_the_penalty_gradient():
    """Test that identical worst members split the max gradient equally."""
    rng = np.random.default_rng(0)
    val = WeakDataset(rng.normal(size=(6, 2)), rng.integers(0, 2, size=6), TaskKind.classification(2))
    spec = ModelSpec.for_task("softmax_regression", val.task, 2)
    ensemble = ValidationEnsemble(val, ([0, 1, 2, 3], [0, 1, 2, 3]))
    theta = rng.normal(size=spec.n_params)
    ensemble = _with_baseline(spec, theta, ensemble, -0.1)
    grads = member_gradients(spec, theta, ensemble)
    lam = 3.0
    np.testing.assert_allclose(upper_grad_theta(spec, theta, ensemble, PgsConfig(lam=lam)), (1 + lam) * grads[0])
    assert upper_objective(spec, theta, ensemble, PgsConfig(lam=lam)).safeness == pytest.approx(0.1)


def test_upper_objective_needs_baseline(softmax_instance):
    """Test that a missing baseline is reported."""
    inst = softmax_instance
    bare = ValidationEnsemble(inst.ensemble.base_set, inst.ensemble.member_indices)
    with pytest.raises(ValueError, match="baseline"):
        upper_objective(inst.spec, np.zeros(inst.spec.n_params), bare, PgsConfig())


@pytest.mark.parametrize("family", ["linear_regression", "softmax_regression"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_convex_paths_agree(family, seed):
    """Test implicit, reverse and finite-difference hypergradients against each other."""
    inst = gradcheck_instance(family, seed, GRADCHECK_CONFIG)
    errors = check_agreement(inst.spec, inst.train, inst.params, inst.ensemble, GRADCHECK_CONFIG)
    assert set(errors) == {"implicit_vs_reverse", "implicit_vs_fd", "reverse_vs_fd"}
    for name, error in errors.items():
        assert error < TOLERANCE, name


@pytest.mark.slow
def test_network_reverse_matches_finite_differences():
    """Test the reverse path of the tanh network against differences of the unrolled pipeline."""
    config = GRADCHECK_CONFIG.model_copy(update={"lower_iters": 50})
    inst = gradcheck_instance("two_layer_mlp", 0, config)
    errors = check_agreement(inst.spec, inst.train, inst.params, inst.ensemble, config)
    assert list(errors) == ["reverse_vs_fd"]
    assert errors["reverse_vs_fd"] < TOLERANCE


def test_single_step_reverse_is_exact(softmax_instance):
    """Test a one-step unroll against finite differences of the same unroll."""
    inst = softmax_instance
    config = PgsConfig(lower_iters=1, lower_step=0.1)
    theta0 = ModelParams.zeros(inst.spec)
    _, tape = train_unrolled(inst.spec, inst.train, inst.params, theta0, 0.1, 1)
    reverse = hypergrad_reverse(inst.spec, tape, inst.train, inst.params, inst.ensemble, config)
    fd = hypergrad_fd(inst.spec, inst.train, inst.params, inst.ensemble, config, solver="unrolled", theta0=theta0)
    assert relative_error(reverse, fd) < 1e-5


def _unroll_errors(inst, config, horizons):
    """Relative error of the reverse hypergradient against the implicit one for each unroll length."""
    theta_star = train_convex_with(inst.spec, inst.train, inst.params, config)
    implicit = hypergrad_implicit(inst.spec, theta_star, inst.train, inst.params, inst.ensemble, config)
    theta0 = ModelParams.zeros(inst.spec)
    eta = stable_step(inst.spec, inst.train, inst.params, [theta0.theta, theta_star.theta])
    errors = []
    for T in horizons:
        _, tape = train_unrolled(inst.spec, inst.train, inst.params, theta0, eta, T)
        reverse = hypergrad_reverse(inst.spec, tape, inst.train, inst.params, inst.ensemble, config)
        errors.append(relative_error(reverse, implicit))
    return errors


def test_reverse_approaches_implicit_as_unroll_grows(softmax_instance):
    """Test that longer unrolls bring the reverse hypergradient closer to the implicit one."""
    e10, e250, e1000 = _unroll_errors(softmax_instance, GRADCHECK_CONFIG, [10, 250, 1000])
    assert e250 < e10
    assert e1000 <= e250 + 1e-12
    assert e1000 < TOLERANCE


@pytest.mark.slow
@pytest.mark.parametrize("family", ["linear_regression", "softmax_regression"])
@pytest.mark.parametrize("seed", range(25))
def test_convex_paths_agree_on_many_instances(family, seed):
    """Test pairwise agreement of the three hypergradients over 50 seeded instances."""
    inst = gradcheck_instance(family, seed, GRADCHECK_CONFIG)
    errors = check_agreement(inst.spec, inst.train, inst.params, inst.ensemble, GRADCHECK_CONFIG)
    assert max(errors.values()) < TOLERANCE, errors


@pytest.mark.slow
@pytest.mark.parametrize("family", ["linear_regression", "softmax_regression"])
@pytest.mark.parametrize("seed", range(5))
def test_unroll_error_shrinks_over_horizons(family, seed):
    """Test the reverse-to-implicit gap over T = 10, 50, 250 and 1000 on strictly convex instances."""
    inst = gradcheck_instance(family, seed, GRADCHECK_CONFIG)
    e10, e50, e250, e1000 = _unroll_errors(inst, GRADCHECK_CONFIG, [10, 50, 250, 1000])
    assert e50 < e10
    assert e250 <= e50 + 1e-12
    assert e1000 <= e250 + 1e-12
    assert e1000 < TOLERANCE


def test_keep_adjoints(softmax_instance):
    """Test that the recursion keeps one adjoint per step, starting from ∇_θ F(θ_T)."""
    inst = softmax_instance
    config = PgsConfig()
    _, tape = train_unrolled(inst.spec, inst.train, inst.params, ModelParams.zeros(inst.spec), 0.1, 6)
    reverse = replay_adjoints(inst.spec, tape, inst.train, inst.params, inst.ensemble, config, keep_adjoints=True)
    assert len(reverse.adjoints) == 6
    np.testing.assert_allclose(reverse.adjoints[0], upper_grad_theta(inst.spec, tape.final, inst.ensemble, config))
    assert replay_adjoints(inst.spec, tape, inst.train, inst.params, inst.ensemble, config).adjoints == []


def test_frozen_instances_get_zero_gradient(softmax_instance):
    """Test that frozen rows are masked on every path."""
    inst = softmax_instance
    frozen = np.zeros(inst.params.n, dtype=bool)
    frozen[:4] = True
    p = LabelQualityParams(inst.params.w, inst.params.Q, frozen)
    theta_star = train_convex_with(inst.spec, inst.train, p, GRADCHECK_CONFIG)
    implicit = hypergrad_implicit(inst.spec, theta_star, inst.train, p, inst.ensemble, GRADCHECK_CONFIG)
    fd = hypergrad_fd(inst.spec, inst.train, p, inst.ensemble, GRADCHECK_CONFIG)
    for grad in (implicit, fd):
        assert not grad.d_w[:4].any()
        assert not grad.d_Q[:4].any()
    assert relative_error(implicit, fd) < TOLERANCE


def test_cg_failure_raises_breakdown(softmax_instance):
    """Test that a CG failure flag surfaces as CgBreakdownError."""
    inst = softmax_instance
    theta_star = train_convex_with(inst.spec, inst.train, inst.params, GRADCHECK_CONFIG)
    with patch("src.hypergrad.cg", return_value=(np.zeros(inst.spec.n_params), 1)):
        with pytest.raises(CgBreakdownError):
            hypergrad_implicit(inst.spec, theta_star, inst.train, inst.params, inst.ensemble, GRADCHECK_CONFIG)


def test_finite_difference_preconditions(softmax_instance):
    """Test the step and coordinate budget checks."""
    inst = softmax_instance
    with pytest.raises(ValueError):
        hypergrad_fd(inst.spec, inst.train, inst.params, inst.ensemble, GRADCHECK_CONFIG, step=0.0)
    with pytest.raises(BudgetExceededError):
        hypergrad_fd(inst.spec, inst.train, inst.params, inst.ensemble, GRADCHECK_CONFIG, max_coordinates=5)


def test_relative_error():
    """Test the normalized max-norm distance."""
    a = HyperGrad(np.array([1.0, 0.0]), np.zeros(2), HypergradPath.IMPLICIT)
    b = HyperGrad(np.array([0.5, 0.0]), np.zeros(2), HypergradPath.REVERSE)
    assert relative_error(a, b) == pytest.approx(0.5)
    zero = HyperGrad(np.zeros(2), np.zeros(2), HypergradPath.FINITE_DIFF)
    assert relative_error(zero, zero) == 0.0
    with pytest.raises(ValueError):
        HyperGrad(np.array([np.nan]), np.zeros(1), HypergradPath.IMPLICIT)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
