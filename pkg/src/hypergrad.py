"""
Hypergradients of the upper objective with respect to (w, Q).

Three independent paths:

* implicit: KKT stationarity at a converged θ*, a conjugate-gradient solve H u = ∇_θ F
  over Hessian-vector products, then -uᵀ ∂²L/∂θ∂(w, Q)ᵀ;
* reverse: adjoint recursion over a recorded gradient-descent trajectory;
* finite differences of the whole retrain-then-evaluate pipeline (test oracle).

The upper objective is F(θ) = mean_i L_val_i(θ) + λ·S(θ), where S is the worst member gap
max_i (L_val_i − c_i), hinged at zero in HINGE mode.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .core import (
    LabelQualityParams,
    ModelParams,
    ModelSpec,
    PgsConfig,
    SafenessMode,
    ValidationEnsemble,
    WeakDataset,
)
from .exceptions import BudgetExceededError, CgBreakdownError, DivergenceError
from .logging_config import get_logger
from .lower_solver import (
    UnrollTape,
    default_theta0,
    kkt_residual,
    stable_step,
    train_convex_with,
    train_unrolled,
)
from .model import TrainingObjective, member_gradients, member_losses

logger = get_logger(__name__)

TIE_TOLERANCE = 1e-12
DEFAULT_FD_STEP = 1e-5
DEFAULT_FD_BUDGET = 256


class HypergradPath(str, Enum):
    IMPLICIT = "implicit"
    REVERSE = "reverse"
    FINITE_DIFF = "finite_diff"


@dataclass(frozen=True)
class HyperGrad:
    """∂F/∂w and ∂F/∂Q, zero on frozen instances."""

    d_w: np.ndarray
    d_Q: np.ndarray
    path: HypergradPath

    def __post_init__(self):
        if not (np.isfinite(self.d_w).all() and np.isfinite(self.d_Q).all()):
            raise ValueError(f"{self.path.value} hypergradient is not finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.d_w.ravel(), self.d_Q.ravel()])

    @classmethod
    def zeros(cls, p: LabelQualityParams, path: HypergradPath) -> "HyperGrad":
        return cls(np.zeros_like(p.w), np.zeros_like(p.Q), path)


def relative_error(a: HyperGrad, b: HyperGrad, floor: float = 1e-12) -> float:
    """‖a − b‖∞ / max(‖a‖∞, ‖b‖∞); zero when both vanish."""
    va, vb = a.as_vector(), b.as_vector()
    scale = max(np.max(np.abs(va)), np.max(np.abs(vb)), floor)
    return float(np.max(np.abs(va - vb)) / scale)


def _masked(d_w: np.ndarray, d_Q: np.ndarray, frozen: np.ndarray, path: HypergradPath) -> HyperGrad:
    d_w = np.where(frozen, 0.0, d_w)
    d_Q = d_Q.copy()
    d_Q[frozen] = 0.0
    return HyperGrad(d_w, d_Q, path)


# --------------------------------------------------------------------------------------
# Upper objective
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class UpperValue:
    value: float
    mean_loss: float
    safeness: float
    losses: np.ndarray
    gaps: np.ndarray


def _safeness_term(gaps: np.ndarray, mode: SafenessMode) -> tuple[float, np.ndarray]:
    """Penalty value and the member weights of its (sub)gradient."""
    worst = float(np.max(gaps))
    if mode == SafenessMode.HINGE and worst <= 0.0:
        return 0.0, np.zeros_like(gaps)
    tied = gaps >= worst - TIE_TOLERANCE
    return worst, tied / tied.sum()


def _baseline(ensemble: ValidationEnsemble) -> np.ndarray:
    if not ensemble.has_baseline:
        raise ValueError("ensemble baseline losses are not populated; run compute_baseline first")
    return ensemble.baseline_losses


def upper_objective(spec: ModelSpec, theta, ensemble: ValidationEnsemble, config: PgsConfig) -> UpperValue:
    """Evaluate mean_i L_val_i(θ) + λ·S(θ) with its parts."""
    losses = member_losses(spec, theta, ensemble)
    gaps = losses - _baseline(ensemble)
    safeness, _ = _safeness_term(gaps, config.safeness_mode)
    mean_loss = float(np.mean(losses))
    return UpperValue(mean_loss + config.lam * safeness, mean_loss, safeness, losses, gaps)


def upper_grad_theta(spec: ModelSpec, theta, ensemble: ValidationEnsemble, config: PgsConfig) -> np.ndarray:
    """
    Gradient of the upper objective in θ.

    The max is differentiated through its argmax member; tied members share the
    gradient equally, and an inactive hinge contributes nothing.
    """
    losses = member_losses(spec, theta, ensemble)
    gaps = losses - _baseline(ensemble)
    _, penalty_weights = _safeness_term(gaps, config.safeness_mode)
    weights = np.full(ensemble.m, 1.0 / ensemble.m) + config.lam * penalty_weights
    return weights @ member_gradients(spec, theta, ensemble)


# --------------------------------------------------------------------------------------
# Implicit path
# --------------------------------------------------------------------------------------


def hypergrad_implicit(
    spec: ModelSpec,
    theta_star: ModelParams,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
) -> HyperGrad:
    """
    Hypergradient through the implicit function θ*(w, Q).

    Args:
        spec: Convex model description (l2_reg > 0)
        theta_star: Lower-level solution satisfying the KKT condition
        d: Training set
        p: Current (w, Q)
        ensemble: Validation ensemble with baseline losses
        config: Optimizer settings (safeness, CG tolerances)

    Returns:
        HyperGrad tagged IMPLICIT

    Raises:
        CgBreakdownError: If CG fails or meets non-positive curvature
    """
    residual = kkt_residual(spec, theta_star, d, p)
    if residual > 10 * max(config.newton_tol, config.linear_tol):
        logger.warning("implicit hypergradient at a point with KKT residual %.3e", residual)

    b = upper_grad_theta(spec, theta_star, ensemble, config)
    if not np.any(b):
        return HyperGrad.zeros(p, HypergradPath.IMPLICIT)

    objective = TrainingObjective(spec, theta_star, d, p)
    dim = spec.n_params
    operator = LinearOperator((dim, dim), matvec=lambda v: objective.hvp(np.ravel(v)), dtype=np.float64)
    max_iters = config.cg.max_iters or 2 * dim
    iterations = [0]

    def count(_):
        iterations[0] += 1

    u, info = cg(operator, b, rtol=config.cg.tol, atol=0.0, maxiter=max_iters, callback=count)
    final = float(np.linalg.norm(objective.hvp(u) - b) / np.linalg.norm(b))
    if info != 0 or not np.isfinite(u).all():
        raise CgBreakdownError("conjugate gradient did not converge", final, iterations[0])
    if float(u @ objective.hvp(u)) <= 0.0:
        raise CgBreakdownError("non-positive curvature: the inner Hessian is not positive definite",
                               final, iterations[0])
    logger.debug("CG solved in %d iterations (relative residual %.2e)", iterations[0], final)

    return _masked(-objective.mixed_w_vjp(u), -objective.mixed_q_vjp(u), p.frozen, HypergradPath.IMPLICIT)


# --------------------------------------------------------------------------------------
# Reverse path
# --------------------------------------------------------------------------------------


@dataclass
class ReverseTape:
    """Adjoints α_T, …, α_1 (when kept) and the accumulated g_w, g_Q."""

    g_w: np.ndarray
    g_Q: np.ndarray
    adjoints: list[np.ndarray]


def replay_adjoints(
    spec: ModelSpec,
    tape: UnrollTape,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    keep_adjoints: bool = False,
) -> ReverseTape:
    """
    Run the adjoint recursion backwards over a recorded trajectory.

    α_T = ∇_θ F(θ_T); for each step t+1 (state θ_t), g_w += B_{t+1}(α_{t+1}),
    g_Q += C_{t+1}(α_{t+1}) and α_t = A_{t+1}(α_{t+1}), with
    A(v) = v − η·H v, B(v) = −η·vᵀ∂²L/∂θ∂wᵀ, C(v) = −η·vᵀ∂²L/∂θ∂Qᵀ all evaluated at θ_t.
    The sum runs over every step, including the first one taken from θ₀.
    """
    eta = tape.eta
    alpha = upper_grad_theta(spec, tape.final, ensemble, config)
    g_w = np.zeros_like(p.w)
    g_Q = np.zeros_like(p.Q)
    adjoints = [alpha.copy()] if keep_adjoints else []

    for t in range(tape.iterations - 1, -1, -1):
        objective = TrainingObjective(spec, tape.theta_trajectory[t], d, p)
        if t == 0:
            g_w -= eta * objective.mixed_w_vjp(alpha)
            g_Q -= eta * objective.mixed_q_vjp(alpha)
            break
        hv, mixed_w, mixed_q = objective.second_order_products(alpha)
        g_w -= eta * mixed_w
        g_Q -= eta * mixed_q
        alpha = alpha - eta * hv
        if not np.isfinite(alpha).all():
            raise DivergenceError("adjoint became non-finite", t)
        if keep_adjoints:
            adjoints.append(alpha.copy())

    if not (np.isfinite(g_w).all() and np.isfinite(g_Q).all()):
        raise DivergenceError("hypergradient accumulator became non-finite", 0)
    return ReverseTape(g_w, g_Q, adjoints)


def hypergrad_reverse(
    spec: ModelSpec,
    tape: UnrollTape,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
) -> HyperGrad:
    """
    Hypergradient of F(θ_T) through T unrolled gradient-descent steps.

    Replays the stored trajectory; the forward pass is never recomputed.

    Raises:
        DivergenceError: If an adjoint becomes non-finite (names the step)
    """
    reverse = replay_adjoints(spec, tape, d, p, ensemble, config)
    return _masked(reverse.g_w, reverse.g_Q, p.frozen, HypergradPath.REVERSE)


# --------------------------------------------------------------------------------------
# Finite-difference oracle
# --------------------------------------------------------------------------------------


def pipeline_value(
    spec: ModelSpec,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    solver: str = "convex",
    theta0: Optional[ModelParams] = None,
) -> float:
    """Retrain at (w, Q) and evaluate the upper objective."""
    if solver == "convex":
        theta = train_convex_with(spec, d, p, config)
    elif solver == "unrolled":
        start = theta0 if theta0 is not None else default_theta0(spec, config.seed, config.init_scale)
        theta, _ = train_unrolled(spec, d, p, start, config.lower_step, config.lower_iters)
    else:
        raise ValueError(f"Unknown solver: {solver}")
    return upper_objective(spec, theta, ensemble, config).value


def hypergrad_fd(
    spec: ModelSpec,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    step: float = DEFAULT_FD_STEP,
    solver: Optional[str] = None,
    theta0: Optional[ModelParams] = None,
    max_coordinates: int = DEFAULT_FD_BUDGET,
) -> HyperGrad:
    """
    Central finite differences of the full retrain-then-evaluate pipeline.

    Args:
        spec: Model description
        d: Training set
        p: Point at which to differentiate (may lie outside Λ)
        ensemble: Validation ensemble with baseline losses
        config: Optimizer settings
        step: Perturbation size h (> 0)
        solver: "convex" or "unrolled"; defaults to the family's natural path
        theta0: Starting point of unrolled retraining
        max_coordinates: Budget of perturbed coordinates

    Returns:
        HyperGrad tagged FINITE_DIFF (frozen coordinates are never perturbed)

    Raises:
        ValueError: If step is not positive
        BudgetExceededError: If more than ``max_coordinates`` coordinates are free
    """
    if step <= 0:
        raise ValueError("Finite-difference step must be positive")
    solver = solver or ("convex" if spec.is_convex else "unrolled")
    free = np.flatnonzero(p.free)
    q_cols = p.Q.shape[1] if p.Q.ndim == 2 else 1
    budget = free.size * (1 + q_cols)
    if budget > max_coordinates:
        raise BudgetExceededError(
            f"finite differences over {budget} coordinates exceed the budget of {max_coordinates}"
        )

    def value(w: np.ndarray, Q: np.ndarray) -> float:
        shifted = LabelQualityParams(w, Q, p.frozen, strict=False)
        return pipeline_value(spec, d, shifted, ensemble, config, solver, theta0)

    base_w = np.array(p.w)
    base_Q = np.array(p.Q)
    d_w = np.zeros_like(base_w)
    d_Q = np.zeros_like(base_Q)

    for i in free:
        plus, minus = base_w.copy(), base_w.copy()
        plus[i] += step
        minus[i] -= step
        d_w[i] = (value(plus, base_Q) - value(minus, base_Q)) / (2 * step)

        for j in range(q_cols):
            index = (i, j) if base_Q.ndim == 2 else (i,)
            plus_q, minus_q = base_Q.copy(), base_Q.copy()
            plus_q[index] += step
            minus_q[index] -= step
            d_Q[index] = (value(base_w, plus_q) - value(base_w, minus_q)) / (2 * step)

    logger.debug("finite differences evaluated %d coordinates", budget)
    return HyperGrad(d_w, d_Q, HypergradPath.FINITE_DIFF)


# --------------------------------------------------------------------------------------
# Agreement check
# --------------------------------------------------------------------------------------


def check_agreement(
    spec: ModelSpec,
    d: WeakDataset,
    p: LabelQualityParams,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    unroll_iters: int = 1000,
    step: float = DEFAULT_FD_STEP,
    max_coordinates: int = DEFAULT_FD_BUDGET,
) -> dict[str, float]:
    """
    Pairwise relative errors between the hypergradient paths at one point.

    Convex families compare implicit, reverse (``unroll_iters`` steps from zero with a step
    below the inverse curvature) and finite differences of exact retraining. The network
    compares reverse against finite differences of the same unrolled pipeline.
    """
    if not spec.is_convex:
        theta0 = default_theta0(spec, config.seed, config.init_scale)
        _, tape = train_unrolled(spec, d, p, theta0, config.lower_step, config.lower_iters)
        reverse = hypergrad_reverse(spec, tape, d, p, ensemble, config)
        fd = hypergrad_fd(spec, d, p, ensemble, config, step, "unrolled", theta0, max_coordinates)
        return {"reverse_vs_fd": relative_error(reverse, fd)}

    theta_star = train_convex_with(spec, d, p, config)
    implicit = hypergrad_implicit(spec, theta_star, d, p, ensemble, config)
    theta0 = ModelParams.zeros(spec)
    eta = stable_step(spec, d, p, [theta0.theta, theta_star.theta])
    _, tape = train_unrolled(spec, d, p, theta0, eta, unroll_iters)
    reverse = hypergrad_reverse(spec, tape, d, p, ensemble, config)
    fd = hypergrad_fd(spec, d, p, ensemble, config, step, "convex", None, max_coordinates)
    return {
        "implicit_vs_reverse": relative_error(implicit, reverse),
        "implicit_vs_fd": relative_error(implicit, fd),
        "reverse_vs_fd": relative_error(reverse, fd),
    }
