"""
The outer optimization loop.

Both paths alternate retraining the model at the current (w, Q), differentiating the
upper objective through that retraining, taking one upper-optimizer step and projecting
back onto Λ. The convex path retrains exactly and uses the implicit hypergradient; the
non-convex path unrolls T gradient-descent steps from a fixed θ₀ and replays them in
reverse.
"""
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (
    FeasibleRegion,
    LabelQualityParams,
    ModelParams,
    ModelSpec,
    PgsConfig,
    RunReport,
    SafenessMode,
    ValidationEnsemble,
    WeakDataset,
    baseline_params,
    identity_params,
)
from .exceptions import InfeasibleRegionError, NonFiniteObjectiveError
from .hypergrad import HyperGrad, HypergradPath, hypergrad_implicit, hypergrad_reverse, upper_objective
from .logging_config import get_logger
from .lower_solver import default_theta0, train, train_convex_with, train_unrolled
from .model import member_losses
from .optim import make_upper_optimizer
from .projection import project

logger = get_logger(__name__)

UNLABELED_WEIGHT = 0.5

Monitor = Callable[[np.ndarray], float]


def compute_baseline(
    spec: ModelSpec,
    d: WeakDataset,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    theta0: Optional[ModelParams] = None,
) -> tuple[ModelParams, ValidationEnsemble]:
    """
    Train the supervised baseline θ₀ and cache its member losses c_i.

    Args:
        spec: Model description
        d: Training set with raw labels (unlabeled instances get weight 0)
        ensemble: Validation ensemble
        config: Solver settings
        theta0: Starting point of unrolled training (non-convex families)

    Returns:
        (θ₀, ensemble with baseline_losses populated)
    """
    theta = train(spec, d, baseline_params(d), config, theta0)
    losses = member_losses(spec, theta.theta, ensemble)
    logger.info("Baseline validation losses: %s", np.array2string(losses, precision=5))
    return theta, ensemble.with_baseline(losses)


def ssl_freeze(d: WeakDataset, p: Optional[LabelQualityParams] = None) -> LabelQualityParams:
    """
    Freeze labeled instances at the recovery point and initialize the rest.

    Labeled rows get w = 1 and Q at the observed label. Unlabeled rows take their values
    from ``p`` when given, otherwise w = 0.5 and a uniform Q row (zero shift in regression).
    """
    recovery = identity_params(d)
    labeled = d.labeled_mask
    unlabeled = ~labeled

    w = np.array(recovery.w)
    Q = np.array(recovery.Q)
    if p is not None:
        w[unlabeled] = p.w[unlabeled]
        Q[unlabeled] = p.Q[unlabeled]
    else:
        w[unlabeled] = UNLABELED_WEIGHT
        if d.task.is_classification:
            Q[unlabeled] = 1.0 / d.k
        else:
            Q[unlabeled] = 0.0
    return LabelQualityParams(w, Q, labeled.copy())


def starting_point(d: WeakDataset) -> LabelQualityParams:
    """Recovery point for fully labeled data, the SSL initialization otherwise."""
    return identity_params(d) if d.is_fully_labeled else ssl_freeze(d)


@dataclass(frozen=True)
class Corrections:
    """Per-instance relabeling proposals read off a learned Q."""

    proposed_labels: np.ndarray
    is_correction: np.ndarray
    is_distrusted: np.ndarray

    @property
    def n_corrections(self) -> int:
        return int(self.is_correction.sum())


def extract_corrections(p: LabelQualityParams, d: WeakDataset, w_threshold: float = 0.5) -> Corrections:
    """
    Propose ŷ_i = argmax_j Q_ij (ties go to the smallest class index).

    Raises:
        ValueError: If the task is not classification
    """
    if not d.task.is_classification:
        raise ValueError("Corrections are only defined for classification")
    proposed = np.argmax(p.Q, axis=1)
    return Corrections(
        proposed_labels=proposed,
        is_correction=proposed != d.labels,
        is_distrusted=p.w < w_threshold,
    )


# --------------------------------------------------------------------------------------
# Outer loop
# --------------------------------------------------------------------------------------


def _trace_record(iteration: int, spec: ModelSpec, theta: np.ndarray, ensemble: ValidationEnsemble,
                  config: PgsConfig, monitor: Optional[Monitor]) -> dict:
    value = upper_objective(spec, theta, ensemble, config)
    record = {
        "iteration": iteration,
        "objective": value.value,
        "mean_loss": value.mean_loss,
        "safeness": value.safeness,
        "gaps": value.gaps.tolist(),
    }
    if monitor is not None:
        record["monitor"] = float(monitor(theta))
    return record


def _select_iterate(trace: list[dict], config: PgsConfig) -> int:
    """Lowest-objective iterate whose gaps all stay within the slack; the last one if none does."""
    safe = [i for i, record in enumerate(trace) if max(record["gaps"], default=0.0) <= config.safety_slack]
    if not safe:
        return len(trace) - 1
    return min(safe, key=lambda i: (trace[i]["objective"], -i))


def _outer_loop(
    method: str,
    path: HypergradPath,
    spec: ModelSpec,
    d: WeakDataset,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    region: FeasibleRegion,
    p0: LabelQualityParams,
    retrain: Callable[[LabelQualityParams], np.ndarray],
    hypergrad: Callable[[LabelQualityParams], tuple[np.ndarray, HyperGrad]],
    monitor: Optional[Monitor],
) -> RunReport:
    if not ensemble.has_baseline:
        raise ValueError("ensemble baseline losses are not populated; run compute_baseline first")
    region.check(d.n, d.task)
    p = p0 if region.contains(p0, d) else project(p0.w, p0.Q, d, p0.frozen, region)
    optimizer = make_upper_optimizer(config.upper_optimizer)
    trace: list[dict] = []
    iterates: list[tuple[LabelQualityParams, np.ndarray]] = []

    for iteration in range(config.upper_iters):
        theta, grad = hypergrad(p)
        record = _trace_record(iteration, spec, theta, ensemble, config, monitor)
        trace.append(record)
        iterates.append((p, theta))
        if not np.isfinite(record["objective"]):
            raise NonFiniteObjectiveError(f"upper objective became non-finite at iteration {iteration}", trace)
        logger.info(
            "%s iteration %d: objective=%.6f mean_loss=%.6f worst_gap=%.3e",
            method, iteration, record["objective"], record["mean_loss"], max(record["gaps"]),
        )

        w, Q = optimizer.step(p.w, p.Q, grad.d_w, grad.d_Q)
        w = np.where(p.frozen, p.w, w)
        Q[p.frozen] = p.Q[p.frozen]
        p = project(w, Q, d, p.frozen, region)
        problems = region.violations(p, d)
        if problems:
            raise InfeasibleRegionError(f"projection left the feasible region: {'; '.join(problems)}")

    theta = retrain(p)
    final = _trace_record(config.upper_iters, spec, theta, ensemble, config, monitor)
    trace.append(final)
    iterates.append((p, theta))
    if not np.isfinite(final["objective"]):
        raise NonFiniteObjectiveError("upper objective is non-finite at the final iterate", trace)

    selected = _select_iterate(trace, config) if config.keep_best else len(trace) - 1
    p, theta = iterates[selected]
    if selected != len(trace) - 1:
        logger.info("%s keeps iterate %d (objective %.6f) over the last one (objective %.6f)",
                    method, selected, trace[selected]["objective"], trace[-1]["objective"])

    losses_after = member_losses(spec, theta, ensemble)
    gaps = losses_after - ensemble.baseline_losses
    # Only HINGE bounds the validation losses from above.
    unsafe = config.safeness_mode == SafenessMode.HINGE and bool(np.any(gaps > config.safety_slack))
    if unsafe:
        logger.warning("%s flagged unsafe: worst validation gap %.3e > %.1e",
                       method, float(np.max(gaps)), config.safety_slack)
    if trace[selected]["objective"] > trace[0]["objective"]:
        logger.warning("%s did not descend: %.6f -> %.6f", method, trace[0]["objective"], trace[selected]["objective"])

    return RunReport(
        method=method,
        seed=config.seed,
        w=np.array(p.w),
        Q=np.array(p.Q),
        theta=np.array(theta),
        val_losses_before=np.array(ensemble.baseline_losses),
        val_losses_after=losses_after,
        unsafe=unsafe,
        diagnostics={
            "hypergrad_path": path.value,
            "upper_iters": config.upper_iters,
            "selected_iteration": selected,
            "initial_objective": trace[0]["objective"],
            "final_objective": trace[selected]["objective"],
            "last_objective": trace[-1]["objective"],
            "n_free": int(p.free.sum()),
            "w_l1": float(p.w.sum()),
            "eps1": region.eps1,
            "eps2": region.eps2,
        },
        trace=trace,
        config=config.model_dump(mode="json", by_alias=True),
    )


def pgs_convex(
    spec: ModelSpec,
    d: WeakDataset,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    region: FeasibleRegion,
    p0: Optional[LabelQualityParams] = None,
    monitor: Optional[Monitor] = None,
) -> RunReport:
    """
    Outer loop for convex families: exact retraining plus implicit hypergradients.

    Args:
        spec: LinearRegression or SoftmaxRegression model
        d: Weakly labeled training set
        ensemble: Validation ensemble with baseline losses
        config: Optimizer settings
        region: Feasible region Λ
        p0: Starting point (default: recovery point, or SSL initialization)
        monitor: Called with θ at every iterate; its value is stored in the trace

    Returns:
        RunReport for the selected iterate (the best safe one, or the last with keep_best off)

    Raises:
        ValueError: If the family is not convex
        NonFiniteObjectiveError: If the upper objective stops being finite
    """
    if not spec.is_convex:
        raise ValueError(f"pgs_convex requires a convex family, got {spec.family.value}")

    def retrain(p: LabelQualityParams) -> np.ndarray:
        return train_convex_with(spec, d, p, config).theta

    def step(p: LabelQualityParams) -> tuple[np.ndarray, HyperGrad]:
        theta = train_convex_with(spec, d, p, config)
        return theta.theta, hypergrad_implicit(spec, theta, d, p, ensemble, config)

    return _outer_loop("pgs_convex", HypergradPath.IMPLICIT, spec, d, ensemble, config, region,
                       p0 or starting_point(d), retrain, step, monitor)


def pgs_nonconvex(
    spec: ModelSpec,
    d: WeakDataset,
    ensemble: ValidationEnsemble,
    config: PgsConfig,
    region: FeasibleRegion,
    p0: Optional[LabelQualityParams] = None,
    monitor: Optional[Monitor] = None,
    theta0: Optional[ModelParams] = None,
) -> RunReport:
    """
    Outer loop for any family: cold-start unrolled training plus reverse-mode hypergradients.

    Every outer iteration restarts from the same θ₀ and unrolls ``config.lower_iters`` steps.
    """
    start = theta0 if theta0 is not None else default_theta0(spec, config.seed, config.init_scale)

    def retrain(p: LabelQualityParams) -> np.ndarray:
        theta, _ = train_unrolled(spec, d, p, start, config.lower_step, config.lower_iters)
        return theta.theta

    def step(p: LabelQualityParams) -> tuple[np.ndarray, HyperGrad]:
        theta, tape = train_unrolled(spec, d, p, start, config.lower_step, config.lower_iters)
        return theta.theta, hypergrad_reverse(spec, tape, d, p, ensemble, config)

    return _outer_loop("pgs_nonconvex", HypergradPath.REVERSE, spec, d, ensemble, config, region,
                       p0 or starting_point(d), retrain, step, monitor)
