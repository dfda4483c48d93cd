"""
Lower-level solvers: θ = argmin L_train(θ, w, Q).

Convex families are solved to KKT tolerance (normal equations for linear regression,
trust-region Newton-CG for softmax regression). Every family can also be trained by
plain full-batch gradient descent whose trajectory is recorded for reverse-mode replay.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.sparse.linalg import LinearOperator, cg

from .core import LabelQualityParams, ModelFamily, ModelParams, ModelSpec, PgsConfig, WeakDataset
from .exceptions import ConvergenceError, DivergenceError
from .logging_config import get_logger
from .model import TrainingObjective, augment, grad_theta

logger = get_logger(__name__)

DEFAULT_LINEAR_TOL = 1e-8
DEFAULT_NEWTON_TOL = 1e-6
DEFAULT_NEWTON_MAX_ITERS = 200
REFINEMENT_STEPS = 3
POLISH_STEPS = 5
POLISH_CG_RTOL = 1e-12


@dataclass(frozen=True)
class UnrollTape:
    """θ₀ … θ_T of one gradient-descent run with step ``eta``."""

    theta_trajectory: tuple
    eta: float
    iterations: int

    def __post_init__(self):
        if len(self.theta_trajectory) != self.iterations + 1:
            raise ValueError(
                f"tape holds {len(self.theta_trajectory)} states, expected {self.iterations + 1}"
            )

    @property
    def final(self) -> np.ndarray:
        return self.theta_trajectory[-1]


def kkt_residual(spec: ModelSpec, theta, d: WeakDataset, p: LabelQualityParams) -> float:
    """‖∇_θ L_train‖∞ at θ."""
    return float(np.max(np.abs(grad_theta(spec, theta, d, p))))


def _solve_linear(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, tol: float) -> np.ndarray:
    Xa = augment(spec, d.features)
    targets = d.labels + p.Q
    H = (2.0 / d.n) * (Xa.T * p.w) @ Xa + spec.reg * np.eye(Xa.shape[1])
    b = (2.0 / d.n) * Xa.T @ (p.w * targets)
    try:
        theta = np.linalg.solve(H, b)
    except np.linalg.LinAlgError as e:
        raise ConvergenceError("normal equations are singular", float("inf"), 0) from e
    # iterative refinement against rounding in ill-conditioned systems
    for _ in range(REFINEMENT_STEPS):
        residual = H @ theta - b
        if np.max(np.abs(residual)) <= tol:
            break
        theta = theta - np.linalg.solve(H, residual)
    return theta


def _newton_polish(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, theta: np.ndarray,
                   tol: float) -> tuple[np.ndarray, int]:
    """Undamped Newton-CG steps near the minimizer; a step is kept only if it lowers the KKT residual."""
    best = np.asarray(theta, dtype=np.float64)
    best_residual = kkt_residual(spec, best, d, p)
    dim = spec.n_params
    steps = 0
    for _ in range(POLISH_STEPS):
        if best_residual <= tol:
            break
        objective = TrainingObjective(spec, best, d, p)
        operator = LinearOperator((dim, dim), matvec=lambda v: objective.hvp(np.ravel(v)), dtype=np.float64)
        direction, _ = cg(operator, -objective.grad(), rtol=POLISH_CG_RTOL, atol=0.0, maxiter=2 * dim)
        candidate = best + direction
        residual = kkt_residual(spec, candidate, d, p)
        if not np.isfinite(residual) or residual >= best_residual:
            break
        best, best_residual = candidate, residual
        steps += 1
    return best, steps


def _solve_softmax(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, tol: float,
                   max_iters: int) -> tuple[np.ndarray, int]:
    def fun(theta):
        objective = TrainingObjective(spec, theta, d, p)
        return objective.loss(), objective.grad()

    def hessp(theta, v):
        return TrainingObjective(spec, theta, d, p).hvp(v)

    result = minimize(
        fun,
        np.zeros(spec.n_params),
        jac=True,
        hessp=hessp,
        method="trust-ncg",
        options={"gtol": tol, "maxiter": max_iters},
    )
    if result.status != 0:
        logger.debug("trust-ncg stopped with status %d: %s", result.status, result.message)
    theta, polished = _newton_polish(spec, d, p, result.x, tol)
    return theta, int(result.nit) + polished


def train_convex(
    spec: ModelSpec,
    d: WeakDataset,
    p: LabelQualityParams,
    tol: Optional[float] = None,
    max_iters: int = DEFAULT_NEWTON_MAX_ITERS,
) -> ModelParams:
    """
    Solve the lower-level problem exactly for a convex family.

    Args:
        spec: LinearRegression or SoftmaxRegression model
        d: Training set
        p: Instance weights and label transitions
        tol: KKT tolerance (default 1e-8 linear, 1e-6 softmax)
        max_iters: Newton iteration cap (softmax only)

    Returns:
        θ with ‖∇_θ L_train(θ)‖∞ ≤ tol

    Raises:
        ValueError: If the family is not convex
        ConvergenceError: If the tolerance is not reached
    """
    if not spec.is_convex:
        raise ValueError(f"train_convex requires a convex family, got {spec.family.value}")

    iterations = 1
    if spec.family == ModelFamily.LINEAR_REGRESSION:
        tol = DEFAULT_LINEAR_TOL if tol is None else tol
        theta = _solve_linear(spec, d, p, tol)
    else:
        if spec.reg <= 0:
            raise ValueError("softmax regression needs l2_reg > 0 to be strictly convex")
        tol = DEFAULT_NEWTON_TOL if tol is None else tol
        theta, iterations = _solve_softmax(spec, d, p, tol, max_iters)

    residual = kkt_residual(spec, theta, d, p)
    logger.debug("train_convex %s: residual=%.3e after %d iterations", spec.family.value, residual, iterations)
    if not np.isfinite(residual) or residual > tol:
        raise ConvergenceError(f"{spec.family.value} did not reach KKT tolerance {tol:.1e}", residual, iterations)
    return ModelParams(theta)


def train_convex_with(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, config: PgsConfig) -> ModelParams:
    """train_convex with the tolerances carried by a PgsConfig."""
    tol = config.linear_tol if spec.family == ModelFamily.LINEAR_REGRESSION else config.newton_tol
    return train_convex(spec, d, p, tol=tol, max_iters=config.newton_max_iters)


def train_unrolled(
    spec: ModelSpec,
    d: WeakDataset,
    p: LabelQualityParams,
    theta0: ModelParams,
    eta: float,
    T: int,
) -> tuple[ModelParams, UnrollTape]:
    """
    Run T steps of full-batch gradient descent and record the trajectory.

    Args:
        spec: Model description
        d: Training set
        p: Instance weights and label transitions
        theta0: Fixed starting point
        eta: Step size (> 0)
        T: Number of steps (>= 1)

    Returns:
        (θ_T, tape holding θ₀ … θ_T)

    Raises:
        ValueError: If eta or T are invalid
        DivergenceError: If an iterate becomes non-finite
    """
    if eta <= 0:
        raise ValueError("Step size eta must be positive")
    if T < 1:
        raise ValueError("Unroll length T must be at least 1")

    theta = np.array(theta0.check(spec).theta, dtype=np.float64)
    trajectory = [theta.copy()]
    for t in range(1, T + 1):
        theta = theta - eta * grad_theta(spec, theta, d, p)
        if not np.isfinite(theta).all():
            raise DivergenceError("gradient descent diverged", t)
        trajectory.append(theta.copy())
    for state in trajectory:
        state.setflags(write=False)
    return ModelParams(theta), UnrollTape(tuple(trajectory), float(eta), int(T))


def default_theta0(spec: ModelSpec, seed: int = 0, init_scale: float = 0.1) -> ModelParams:
    """
    Fixed starting point for unrolled training.

    All zeros for convex families; a seeded Gaussian draw for the tanh network, whose
    all-zeros point is a stationary saddle.
    """
    if spec.family != ModelFamily.TWO_LAYER_MLP:
        return ModelParams.zeros(spec)
    rng = np.random.default_rng(seed)
    return ModelParams(rng.normal(0.0, init_scale, size=spec.n_params))


def train(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, config: PgsConfig,
          theta0: Optional[ModelParams] = None) -> ModelParams:
    """Train with the family's own path: exact for convex families, unrolled otherwise."""
    if spec.is_convex:
        return train_convex_with(spec, d, p, config)
    start = theta0 if theta0 is not None else default_theta0(spec, config.seed, config.init_scale)
    theta, _ = train_unrolled(spec, d, p, start, config.lower_step, config.lower_iters)
    return theta


def dense_hessian(spec: ModelSpec, theta, d: WeakDataset, p: LabelQualityParams) -> np.ndarray:
    """Assemble ∂²L_train/∂θ∂θᵀ column by column (small models only)."""
    objective = TrainingObjective(spec, theta, d, p)
    H = np.column_stack([objective.hvp(e) for e in np.eye(spec.n_params)])
    return 0.5 * (H + H.T)


def stable_step(spec: ModelSpec, d: WeakDataset, p: LabelQualityParams, thetas: list) -> float:
    """1 / (largest Hessian eigenvalue over the given points): a step gradient descent cannot overshoot."""
    curvature = max(float(np.linalg.eigvalsh(dense_hessian(spec, t, d, p))[-1]) for t in thetas)
    if curvature <= 0:
        raise ValueError("training objective has no positive curvature at the given points")
    return 1.0 / curvature
