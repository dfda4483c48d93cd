"""
Tests for the outer optimization loop.
"""
from unittest.mock import patch

import numpy as np
import pytest

from src.core import (
    FeasibleRegion,
    LabelQualityParams,
    ModelSpec,
    PgsConfig,
    TaskKind,
    SafenessMode,
    UpperOptimizerSettings,
    WeakDataset,
    identity_params,
)
from src.exceptions import NonFiniteObjectiveError
from src.harness import make_ensemble
from src.hypergrad import UpperValue
from src.lower_solver import stable_step, train
from src.model import member_losses
from src.pgs import (
    compute_baseline,
    extract_corrections,
    pgs_convex,
    pgs_nonconvex,
    ssl_freeze,
    starting_point,
)


def _ridge_toy(seed, n=40, n_v=30, dim=3):
    """Linear data whose training labels are half corrupted by large Gaussian noise."""
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=dim)
    X, X_v = rng.normal(size=(n, dim)), rng.normal(size=(n_v, dim))
    y = X @ beta
    noisy = rng.choice(n, size=n // 2, replace=False)
    y[noisy] += rng.normal(0.0, 1.5, size=noisy.size)
    train_set = WeakDataset(X, y, TaskKind.regression())
    val = WeakDataset(X_v, X_v @ beta + 0.1 * rng.normal(size=n_v), TaskKind.regression())
    spec = ModelSpec.for_task("linear_regression", train_set.task, dim, l2_reg=0.1)
    return spec, train_set, make_ensemble(val, 3, seed)


def _softmax_toy(seed, n=30, n_v=20):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n + n_v, 2))
    labels = (X[:, 0] + 0.3 * rng.normal(size=n + n_v) > 0).astype(int)
    train_set = WeakDataset(X[:n], labels[:n], TaskKind.classification(2))
    val = WeakDataset(X[n:], labels[n:], TaskKind.classification(2))
    spec = ModelSpec.for_task("softmax_regression", train_set.task, 2, l2_reg=0.01)
    return spec, train_set, make_ensemble(val, 3, seed)


@pytest.fixture
def ridge_setup():
    spec, d, ensemble = _ridge_toy(0)
    config = PgsConfig(upper_iters=5)
    _, ensemble = compute_baseline(spec, d, ensemble, config)
    region = FeasibleRegion.default_for(d, identity_params(d))
    return spec, d, ensemble, config, region


def test_compute_baseline_is_plain_training():
    """Test that the baseline is training at the recovery point with one loss per member."""
    spec, d, ensemble = _ridge_toy(1)
    config = PgsConfig()
    theta, with_baseline = compute_baseline(spec, d, ensemble, config)
    np.testing.assert_array_equal(theta.theta, train(spec, d, identity_params(d), config).theta)
    assert with_baseline.baseline_losses.shape == (3,)
    np.testing.assert_array_equal(with_baseline.baseline_losses, member_losses(spec, theta.theta, ensemble))
    again, _ = compute_baseline(spec, d, ensemble, config)
    np.testing.assert_array_equal(again.theta, theta.theta)


def test_ssl_freeze():
    """Test frozen labeled rows and initialized unlabeled rows."""
    mask = np.array([True, False, True, False])
    d = WeakDataset(np.zeros((4, 1)), np.array([1, 0, 2, 0]), TaskKind.classification(3), mask)
    p = ssl_freeze(d)
    np.testing.assert_array_equal(p.frozen, mask)
    assert p.frozen.sum() == mask.sum()
    np.testing.assert_array_equal(p.w, [1.0, 0.5, 1.0, 0.5])
    np.testing.assert_allclose(p.Q[1], [1 / 3, 1 / 3, 1 / 3])
    np.testing.assert_allclose(p.Q.sum(axis=1), 1.0)
    np.testing.assert_array_equal(p.Q[2], [0.0, 0.0, 1.0])


def test_ssl_freeze_all_labeled():
    """Test that a fully labeled dataset is frozen throughout."""
    d = WeakDataset(np.zeros((3, 1)), np.array([0.1, 0.2, 0.3]), TaskKind.regression())
    assert ssl_freeze(d).frozen.all()
    assert not starting_point(d).frozen.any()


def test_extract_corrections():
    """Test argmax proposals, the tie rule and distrust flags."""
    d = WeakDataset(np.zeros((3, 1)), np.array([0, 0, 1]), TaskKind.classification(2))
    Q = np.array([[0.2, 0.8], [0.5, 0.5], [0.0, 1.0]])
    p = LabelQualityParams(np.array([0.9, 0.3, 1.0]), Q, np.zeros(3, dtype=bool))
    corrections = extract_corrections(p, d)
    np.testing.assert_array_equal(corrections.proposed_labels, [1, 0, 1])
    np.testing.assert_array_equal(corrections.is_correction, [True, False, False])
    np.testing.assert_array_equal(corrections.is_distrusted, [False, True, False])
    assert corrections.n_corrections == 1


def test_extract_corrections_rejects_regression():
    """Test that regression has no corrections."""
    d = WeakDataset(np.zeros((2, 1)), np.array([0.0, 1.0]), TaskKind.regression())
    with pytest.raises(ValueError):
        extract_corrections(identity_params(d), d)


def test_zero_outer_iterations_return_start(ridge_setup):
    """Test that L = 0 returns the recovery point and the baseline model."""
    spec, d, ensemble, config, region = ridge_setup
    report = pgs_convex(spec, d, ensemble, config.model_copy(update={"upper_iters": 0}), region)
    np.testing.assert_array_equal(report.w, np.ones(d.n))
    np.testing.assert_array_equal(report.Q, np.zeros(d.n))
    np.testing.assert_allclose(report.val_losses_after, ensemble.baseline_losses)
    assert len(report.trace) == 1
    assert not report.unsafe


def test_all_frozen_never_moves(ridge_setup):
    """Test that frozen instances keep their values."""
    spec, d, ensemble, config, _ = ridge_setup
    p0 = identity_params(d, ssl=True)
    report = pgs_convex(spec, d, ensemble, config, FeasibleRegion(eps1=0.0, eps2=1.0), p0=p0)
    np.testing.assert_array_equal(report.w, p0.w)
    np.testing.assert_array_equal(report.Q, p0.Q)


def test_zero_learning_rate_is_identity(ridge_setup):
    """Test that one outer step with lr = 0 leaves (w, Q) at the start."""
    spec, d, ensemble, _, region = ridge_setup
    config = PgsConfig(upper_iters=1, lower_iters=20, upper_optimizer=UpperOptimizerSettings(lr=0.0))
    report = pgs_nonconvex(spec, d, ensemble, config, region)
    np.testing.assert_array_equal(report.w, np.ones(d.n))
    np.testing.assert_array_equal(report.Q, np.zeros(d.n))


def test_iterates_stay_feasible(ridge_setup):
    """Test that the final (w, Q) lies in the region and the trace covers every iterate."""
    spec, d, ensemble, config, region = ridge_setup
    report = pgs_convex(spec, d, ensemble, config, region)
    p = LabelQualityParams(report.w, report.Q, np.zeros(d.n, dtype=bool))
    assert region.contains(p, d)
    assert [r["iteration"] for r in report.trace] == list(range(config.upper_iters + 1))
    assert report.diagnostics["hypergrad_path"] == "implicit"
    assert report.config["lambda"] == config.lam


def test_infeasible_start_is_projected(ridge_setup):
    """Test that a starting point outside the region is projected first."""
    spec, d, ensemble, config, _ = ridge_setup
    region = FeasibleRegion(eps1=0.5 * d.n, eps2=0.5)
    p0 = LabelQualityParams(np.ones(d.n), np.full(d.n, 1.0), np.zeros(d.n, dtype=bool))
    report = pgs_convex(spec, d, ensemble, config.model_copy(update={"upper_iters": 0}), region, p0=p0)
    assert np.linalg.norm(report.Q) == pytest.approx(0.5)


def test_unsafe_flag_follows_gaps(ridge_setup):
    """Test that a gap above the slack marks the run unsafe."""
    spec, d, ensemble, config, region = ridge_setup
    lowered = ensemble.with_baseline(ensemble.baseline_losses - 1.0)
    report = pgs_convex(spec, d, lowered, config.model_copy(update={"upper_iters": 0}), region)
    assert report.unsafe
    np.testing.assert_allclose(report.gaps, 1.0)


def test_literal_mode_is_never_flagged_unsafe(ridge_setup):
    """Test that the unsafe flag only applies to the hinge penalty."""
    spec, d, ensemble, config, region = ridge_setup
    lowered = ensemble.with_baseline(ensemble.baseline_losses - 1.0)
    literal = config.model_copy(update={"upper_iters": 0, "safeness_mode": SafenessMode.LITERAL})
    report = pgs_convex(spec, d, lowered, literal, region)
    assert not report.unsafe
    np.testing.assert_allclose(report.gaps, 1.0)


def test_best_safe_iterate_is_returned(ridge_setup):
    """Test that the report carries the lowest-objective iterate within the slack."""
    spec, d, ensemble, config, region = ridge_setup
    config = config.model_copy(update={"upper_optimizer": UpperOptimizerSettings(lr=0.1)})
    report = pgs_convex(spec, d, ensemble, config, region)
    safe = [r for r in report.trace if max(r["gaps"]) <= config.safety_slack]
    best = min(r["objective"] for r in safe)
    selected = report.diagnostics["selected_iteration"]
    assert report.trace[selected]["objective"] == best
    assert report.diagnostics["final_objective"] == best
    assert best <= report.trace[0]["objective"]
    assert not report.unsafe


def test_last_iterate_without_selection(ridge_setup):
    """Test that keep_best=False returns the final retrained iterate."""
    spec, d, ensemble, config, region = ridge_setup
    report = pgs_convex(spec, d, ensemble, config.model_copy(update={"keep_best": False}), region)
    assert report.diagnostics["selected_iteration"] == config.upper_iters
    assert report.diagnostics["final_objective"] == report.trace[-1]["objective"]


def test_pgs_convex_rejects_network(ridge_setup):
    """Test the convex path precondition."""
    _, d, ensemble, config, region = ridge_setup
    mlp = ModelSpec.for_task("two_layer_mlp", d.task, d.d, hidden_units=2)
    with pytest.raises(ValueError, match="convex"):
        pgs_convex(mlp, d, ensemble, config, region)


def test_non_finite_objective_aborts(ridge_setup):
    """Test that a non-finite objective stops the loop with its history."""
    spec, d, ensemble, config, region = ridge_setup
    broken = UpperValue(float("nan"), float("nan"), 0.0, np.zeros(3), np.zeros(3))
    with patch("src.pgs.upper_objective", return_value=broken):
        with pytest.raises(NonFiniteObjectiveError) as excinfo:
            pgs_convex(spec, d, ensemble, config, region)
    assert len(excinfo.value.history) == 1


def test_runs_are_deterministic():
    """Test that identical inputs give identical reports."""
    spec, d, ensemble = _softmax_toy(2)
    config = PgsConfig(upper_iters=3)
    _, ensemble = compute_baseline(spec, d, ensemble, config)
    region = FeasibleRegion.default_for(d, identity_params(d))
    first = pgs_convex(spec, d, ensemble, config, region).to_dict()
    second = pgs_convex(spec, d, ensemble, config, region).to_dict()
    assert first == second


@pytest.mark.slow
def test_convex_path_descends_on_most_toys():
    """Test that the hinge objective does not rise on at least 9 of 10 seeded ridge toys."""
    descended = 0
    for seed in range(10):
        spec, d, ensemble = _ridge_toy(seed)
        config = PgsConfig()
        _, ensemble = compute_baseline(spec, d, ensemble, config)
        region = FeasibleRegion.default_for(d, identity_params(d))
        report = pgs_convex(spec, d, ensemble, config, region)
        descended += report.diagnostics["final_objective"] <= report.diagnostics["initial_objective"]
    assert descended >= 9


@pytest.mark.slow
def test_unrolled_path_tracks_convex_path():
    """Test that long unrolls reproduce the convex path's final (w, Q)."""
    spec, d, ensemble = _ridge_toy(3)
    config = PgsConfig(upper_iters=10, newton_tol=1e-10)
    _, ensemble = compute_baseline(spec, d, ensemble, config)
    region = FeasibleRegion.default_for(d, identity_params(d))
    eta = stable_step(spec, d, identity_params(d), [np.zeros(spec.n_params)])
    config = config.model_copy(update={"keep_best": False})
    unrolled = config.model_copy(update={"lower_iters": 1500, "lower_step": eta})
    exact = pgs_convex(spec, d, ensemble, config, region)
    approx = pgs_nonconvex(spec, d, ensemble, unrolled, region)
    assert np.max(np.abs(exact.w - approx.w)) <= 0.05
    assert np.max(np.abs(exact.Q - approx.Q)) <= 0.05


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
