"""
Domain types shared by every other module.

Array-carrying types are frozen dataclasses whose arrays are copied to float64/int64 and
made read-only on construction. Pure configuration types are frozen pydantic models so
they validate, hash, and serialize the same way the rest of the configuration does.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .exceptions import DatasetValidationError, InfeasibleRegionError

ROW_SUM_TOLERANCE = 1e-8
BOX_TOLERANCE = 1e-9


def _frozen_array(values: Any, dtype: Any) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


def _first_bad(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


# --------------------------------------------------------------------------------------
# Task and data
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskKind:
    """Classification with ``n_classes`` classes, or regression (``n_classes`` = 0)."""

    kind: Literal["classification", "regression"]
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in ("classification", "regression"):
            raise ValueError(f"Unknown task kind: {self.kind}")
        if self.kind == "classification" and self.n_classes < 2:
            raise ValueError("Classification needs at least 2 classes")
        if self.kind == "regression" and self.n_classes != 0:
            raise ValueError("Regression tasks carry no class count")

    @classmethod
    def classification(cls, k: int) -> "TaskKind":
        return cls("classification", int(k))

    @classmethod
    def regression(cls) -> "TaskKind":
        return cls("regression", 0)

    @property
    def is_classification(self) -> bool:
        return self.kind == "classification"

    @property
    def output_dim(self) -> int:
        """Model output arity: k for classification, 1 for regression."""
        return self.n_classes if self.is_classification else 1


@dataclass(frozen=True)
class WeakDataset:
    """Features plus possibly noisy or missing labels."""

    features: np.ndarray
    labels: np.ndarray
    task: TaskKind
    labeled_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DatasetValidationError(f"features must be a matrix, got {features.ndim} dims")
        n = features.shape[0]
        if n < 1:
            raise DatasetValidationError("dataset needs at least one instance")

        if self.task.is_classification:
            raw = np.asarray(self.labels)
            if raw.shape != (n,):
                raise DatasetValidationError(
                    f"dimension mismatch: {raw.shape[0] if raw.ndim else 0} labels for {n} instances"
                )
            labels = raw.astype(np.int64)
            if not np.array_equal(labels, raw):
                raise DatasetValidationError("non-integer label", _first_bad(labels != raw))
            bad = (labels < 0) | (labels >= self.task.n_classes)
            if bad.any():
                raise DatasetValidationError("label out of range", _first_bad(bad))
        else:
            labels = np.asarray(self.labels, dtype=np.float64)
            if labels.shape != (n,):
                raise DatasetValidationError(
                    f"dimension mismatch: {labels.size} labels for {n} instances"
                )
            if not np.isfinite(labels).all():
                raise DatasetValidationError("non-finite label", _first_bad(~np.isfinite(labels)))

        bad_rows = ~np.isfinite(features).all(axis=1)
        if bad_rows.any():
            raise DatasetValidationError("non-finite feature", _first_bad(bad_rows))

        mask = np.ones(n, dtype=bool) if self.labeled_mask is None else np.asarray(self.labeled_mask)
        if mask.shape != (n,):
            raise DatasetValidationError(f"dimension mismatch: labeled_mask has length {mask.size}, expected {n}")

        object.__setattr__(self, "features", _frozen_array(features, np.float64))
        object.__setattr__(self, "labels", _frozen_array(labels, labels.dtype))
        object.__setattr__(self, "labeled_mask", _frozen_array(mask, bool))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @property
    def k(self) -> int:
        return self.task.n_classes

    @property
    def is_fully_labeled(self) -> bool:
        return bool(self.labeled_mask.all())

    def subset(self, indices: Sequence[int]) -> "WeakDataset":
        """Return the instances at ``indices`` (duplicates allowed)."""
        idx = np.asarray(indices, dtype=np.int64)
        return WeakDataset(self.features[idx], self.labels[idx], self.task, self.labeled_mask[idx])

    def with_labels(self, labels: np.ndarray, labeled_mask: Optional[np.ndarray] = None) -> "WeakDataset":
        mask = self.labeled_mask if labeled_mask is None else labeled_mask
        return WeakDataset(self.features, labels, self.task, mask)

    def concat(self, other: "WeakDataset") -> "WeakDataset":
        if other.task != self.task:
            raise DatasetValidationError("cannot concatenate datasets of different tasks")
        return WeakDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.task,
            np.concatenate([self.labeled_mask, other.labeled_mask]),
        )


def validate_dataset(d: WeakDataset) -> WeakDataset:
    """
    Re-check every WeakDataset invariant and return the dataset.

    Args:
        d: Dataset to check

    Returns:
        The same dataset when all invariants hold

    Raises:
        DatasetValidationError: On dimension mismatch, out-of-range label or non-finite value
    """
    return WeakDataset(d.features, d.labels, d.task, d.labeled_mask)


@dataclass(frozen=True)
class PlantedTruth:
    """Clean labels and which instances were corrupted or hidden."""

    true_labels: np.ndarray
    corruption_mask: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.true_labels)
        mask = np.asarray(self.corruption_mask, dtype=bool)
        if labels.shape != mask.shape or labels.ndim != 1:
            raise DatasetValidationError("true_labels and corruption_mask must have the same length")
        object.__setattr__(self, "true_labels", _frozen_array(labels, labels.dtype))
        object.__setattr__(self, "corruption_mask", _frozen_array(mask, bool))

    @property
    def n(self) -> int:
        return int(self.true_labels.size)

    def restore(self, d: WeakDataset) -> WeakDataset:
        """Undo the recorded corruption, returning the clean, fully labeled dataset."""
        if d.n != self.n:
            raise DatasetValidationError("truth does not match dataset size")
        return WeakDataset(d.features, self.true_labels, d.task, np.ones(d.n, dtype=bool))


# --------------------------------------------------------------------------------------
# Decision variables and their feasible set
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelQualityParams:
    """Instance weights ``w``, label transition quantities ``Q`` and the freeze mask.

    ``strict=False`` skips the box/simplex checks; it is meant for points the optimizer
    visits outside the feasible region (finite-difference evaluations, pre-projection iterates).
    """

    w: np.ndarray
    Q: np.ndarray
    frozen: np.ndarray
    strict: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        Q = np.asarray(self.Q, dtype=np.float64)
        frozen = np.asarray(self.frozen, dtype=bool)
        n = w.size
        if w.ndim != 1 or frozen.shape != (n,) or Q.shape[0] != n or Q.ndim not in (1, 2):
            raise DatasetValidationError("dimension mismatch between w, Q and frozen")
        if not np.isfinite(w).all():
            raise DatasetValidationError("non-finite weight", _first_bad(~np.isfinite(w)))
        bad_q = ~np.isfinite(Q) if Q.ndim == 1 else ~np.isfinite(Q).all(axis=1)
        if bad_q.any():
            raise DatasetValidationError("non-finite transition quantity", _first_bad(bad_q))
        if self.strict:
            bad_w = (w < -BOX_TOLERANCE) | (w > 1 + BOX_TOLERANCE)
            if bad_w.any():
                raise DatasetValidationError("weight outside [0, 1]", _first_bad(bad_w))
            if Q.ndim == 2:
                negative = (Q < -BOX_TOLERANCE).any(axis=1)
                if negative.any():
                    raise DatasetValidationError("negative transition quantity", _first_bad(negative))
                off = np.abs(Q.sum(axis=1) - 1.0) > ROW_SUM_TOLERANCE
                if off.any():
                    raise DatasetValidationError("transition row does not sum to 1", _first_bad(off))
        object.__setattr__(self, "w", _frozen_array(w, np.float64))
        object.__setattr__(self, "Q", _frozen_array(Q, np.float64))
        object.__setattr__(self, "frozen", _frozen_array(frozen, bool))

    @property
    def n(self) -> int:
        return int(self.w.size)

    @property
    def free(self) -> np.ndarray:
        return ~self.frozen

    def updated(self, w: np.ndarray, Q: np.ndarray, strict: bool = True) -> "LabelQualityParams":
        return LabelQualityParams(w, Q, self.frozen, strict=strict)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    """Row-wise one-hot encoding of integer ``labels`` with ``k`` columns."""
    E = np.zeros((labels.size, k), dtype=np.float64)
    E[np.arange(labels.size), labels] = 1.0
    return E


def identity_params(d: WeakDataset, ssl: bool = False) -> LabelQualityParams:
    """
    Recovery point at which weighted training reproduces plain supervised training.

    Args:
        d: Dataset
        ssl: Semi-supervised mode; labeled instances are frozen

    Returns:
        w = 1, Q one-hot at y (classification) or zero (regression)
    """
    w = np.ones(d.n)
    Q = one_hot(d.labels, d.k) if d.task.is_classification else np.zeros(d.n)
    frozen = d.labeled_mask.copy() if ssl else np.zeros(d.n, dtype=bool)
    return LabelQualityParams(w, Q, frozen)


def baseline_params(d: WeakDataset) -> LabelQualityParams:
    """Recovery point restricted to labeled instances (unlabeled instances get w = 0)."""
    p = identity_params(d)
    return p.updated(np.where(d.labeled_mask, 1.0, 0.0), p.Q)


class FeasibleRegion(BaseModel):
    """The set Λ of admissible (w, Q)."""

    model_config = ConfigDict(frozen=True)

    eps1: float = Field(ge=0.0, description="Floor on ||w||_1")
    eps2: float = Field(ge=0.0, description="Cap on mean label distance (classification) or ||Q||_2 (regression)")

    def check(self, n: int, task: TaskKind) -> "FeasibleRegion":
        if self.eps1 > n:
            raise InfeasibleRegionError(f"eps1={self.eps1} exceeds n={n}")
        if task.is_classification and self.eps2 > 1.0:
            raise InfeasibleRegionError(f"classification eps2 must lie in [0, 1], got {self.eps2}")
        return self

    @classmethod
    def default_for(cls, d: WeakDataset, p: LabelQualityParams) -> "FeasibleRegion":
        """eps1 = half the free instances; eps2 = 0.6 or 0.5*sqrt(n)*label-scale."""
        eps1 = 0.5 * float(p.free.sum())
        if d.task.is_classification:
            eps2 = 0.6
        else:
            scale = float(np.std(d.labels)) or 1.0
            eps2 = 0.5 * float(np.sqrt(d.n)) * scale
        return cls(eps1=eps1, eps2=eps2)

    def violations(self, p: LabelQualityParams, d: WeakDataset, tol: float = 1e-9) -> list[str]:
        """List the constraints of Λ that ``p`` violates (empty when feasible)."""
        problems = []
        if (p.w < -tol).any() or (p.w > 1 + tol).any():
            problems.append("w outside [0, 1]")
        if p.w.sum() < self.eps1 - tol:
            problems.append(f"||w||_1={p.w.sum():.6g} below eps1={self.eps1:.6g}")
        capped = p.free & d.labeled_mask
        if d.task.is_classification:
            if (p.Q < -tol).any() or (np.abs(p.Q.sum(axis=1) - 1) > max(tol, ROW_SUM_TOLERANCE)).any():
                problems.append("Q rows off the simplex")
            if capped.any():
                distance = float(np.mean(1.0 - p.Q[capped, d.labels[capped]]))
                if distance > self.eps2 + tol:
                    problems.append(f"mean label distance {distance:.6g} above eps2={self.eps2:.6g}")
        else:
            norm = float(np.linalg.norm(p.Q[p.free]))
            if norm > self.eps2 + tol:
                problems.append(f"||Q||_2={norm:.6g} above eps2={self.eps2:.6g}")
        return problems

    def contains(self, p: LabelQualityParams, d: WeakDataset, tol: float = 1e-9) -> bool:
        return not self.violations(p, d, tol)


# --------------------------------------------------------------------------------------
# Validation ensemble
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationEnsemble:
    """m bootstrap members over a clean validation set, with cached baseline losses c_i."""

    base_set: WeakDataset
    member_indices: tuple
    baseline_losses: Optional[np.ndarray] = None

    def __post_init__(self):
        members = tuple(_frozen_array(np.asarray(m, dtype=np.int64), np.int64) for m in self.member_indices)
        if len(members) < 1:
            raise DatasetValidationError("ensemble needs at least one member")
        n_v = self.base_set.n
        for i, member in enumerate(members):
            if member.ndim != 1 or member.size < 1:
                raise DatasetValidationError("empty ensemble member", i)
            if ((member < 0) | (member >= n_v)).any():
                raise DatasetValidationError("member index out of range", i)
        object.__setattr__(self, "member_indices", members)
        if self.baseline_losses is not None:
            c = np.asarray(self.baseline_losses, dtype=np.float64)
            if c.shape != (len(members),):
                raise DatasetValidationError("baseline_losses length must equal the member count")
            if not np.isfinite(c).all():
                raise DatasetValidationError("non-finite baseline loss", _first_bad(~np.isfinite(c)))
            object.__setattr__(self, "baseline_losses", _frozen_array(c, np.float64))

    @property
    def m(self) -> int:
        return len(self.member_indices)

    @property
    def has_baseline(self) -> bool:
        return self.baseline_losses is not None

    def member_counts(self) -> np.ndarray:
        """(m, n_v) matrix: how often each base instance appears in each member."""
        counts = np.zeros((self.m, self.base_set.n))
        for i, member in enumerate(self.member_indices):
            counts[i] = np.bincount(member, minlength=self.base_set.n)
        return counts

    def with_baseline(self, losses: np.ndarray) -> "ValidationEnsemble":
        return replace(self, baseline_losses=np.asarray(losses, dtype=np.float64))


# --------------------------------------------------------------------------------------
# Model description and parameters
# --------------------------------------------------------------------------------------


class ModelFamily(str, Enum):
    LINEAR_REGRESSION = "linear_regression"
    SOFTMAX_REGRESSION = "softmax_regression"
    TWO_LAYER_MLP = "two_layer_mlp"


CONVEX_FAMILIES = (ModelFamily.LINEAR_REGRESSION, ModelFamily.SOFTMAX_REGRESSION)
DEFAULT_CONVEX_L2 = 1e-4


class ModelSpec(BaseModel):
    """A member of the small differentiable model family."""

    model_config = ConfigDict(frozen=True)

    family: ModelFamily
    input_dim: int = Field(ge=1)
    output_dim: int = Field(ge=1)
    hidden_units: Optional[int] = None
    l2_reg: Optional[float] = Field(default=None, ge=0.0)
    fit_intercept: bool = True

    @model_validator(mode="after")
    def _check_family(self) -> "ModelSpec":
        if self.family == ModelFamily.TWO_LAYER_MLP and (self.hidden_units is None or self.hidden_units < 1):
            raise ValueError("TwoLayerMlp needs hidden_units >= 1")
        if self.family == ModelFamily.LINEAR_REGRESSION and self.output_dim != 1:
            raise ValueError("LinearRegression has a single output")
        if self.family == ModelFamily.SOFTMAX_REGRESSION and self.output_dim < 2:
            raise ValueError("SoftmaxRegression needs at least 2 classes")
        return self

    @classmethod
    def for_task(cls, family: str, task: TaskKind, input_dim: int, **kwargs) -> "ModelSpec":
        return cls(family=family, input_dim=input_dim, output_dim=task.output_dim, **kwargs)

    @property
    def is_convex(self) -> bool:
        return self.family in CONVEX_FAMILIES

    @property
    def reg(self) -> float:
        """Effective l2 coefficient (1e-4 for convex families, 0 for the MLP when unset)."""
        if self.l2_reg is not None:
            return float(self.l2_reg)
        return DEFAULT_CONVEX_L2 if self.is_convex else 0.0

    @property
    def augmented_dim(self) -> int:
        return self.input_dim + (1 if self.fit_intercept else 0)

    @property
    def n_params(self) -> int:
        if self.family == ModelFamily.TWO_LAYER_MLP:
            h = int(self.hidden_units)
            return self.augmented_dim * h + (h + 1) * self.output_dim
        return self.augmented_dim * self.output_dim


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector θ."""

    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if not np.isfinite(theta).all():
            raise DatasetValidationError("non-finite parameter", _first_bad(~np.isfinite(theta)))
        object.__setattr__(self, "theta", _frozen_array(theta, np.float64))

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ModelParams":
        return cls(np.zeros(spec.n_params))

    def check(self, spec: ModelSpec) -> "ModelParams":
        if self.theta.size != spec.n_params:
            raise DatasetValidationError(
                f"dimension mismatch: theta has {self.theta.size} entries, model needs {spec.n_params}"
            )
        return self


# --------------------------------------------------------------------------------------
# Optimizer configuration
# --------------------------------------------------------------------------------------


class SafenessMode(str, Enum):
    HINGE = "hinge"
    LITERAL = "literal"


class CgSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_iters: Optional[int] = Field(default=None, ge=1, description="None means 2*dim(theta)")
    tol: float = Field(default=1e-8, gt=0.0)


class UpperOptimizerSettings(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: Literal["adam", "sgd"] = "adam"
    lr: float = Field(default=0.01, ge=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)


class PgsConfig(BaseModel):
    """Knobs of the bi-level optimizer."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    lam: float = Field(default=1.0, ge=0.0, alias="lambda", description="Safeness penalty weight")
    safeness_mode: SafenessMode = SafenessMode.HINGE
    lower_iters: int = Field(default=500, ge=1, description="T")
    upper_iters: int = Field(default=20, ge=0, description="L (0 returns the starting point)")
    lower_step: float = Field(default=0.1, gt=0.0, description="eta")
    upper_optimizer: UpperOptimizerSettings = UpperOptimizerSettings()
    cg: CgSettings = CgSettings()
    linear_tol: float = Field(default=1e-8, gt=0.0)
    newton_tol: float = Field(default=1e-6, gt=0.0)
    newton_max_iters: int = Field(default=200, ge=1)
    safety_slack: float = Field(default=1e-3, ge=0.0)
    keep_best: bool = Field(default=True, description="Return the best safe iterate instead of the last one")
    w_threshold: float = Field(default=0.5, ge=0.0, le=1.0)
    init_scale: float = Field(default=0.1, gt=0.0)
    seed: int = 0


# --------------------------------------------------------------------------------------
# Run report
# --------------------------------------------------------------------------------------


def _plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _all_finite(value: Any) -> bool:
    if isinstance(value, float):
        return bool(np.isfinite(value))
    if isinstance(value, dict):
        return all(_all_finite(v) for v in value.values())
    if isinstance(value, list):
        return all(_all_finite(v) for v in value)
    return True


@dataclass
class RunReport:
    """Metrics, learned parameters and diagnostics of one run."""

    method: str
    seed: int
    w: np.ndarray
    Q: np.ndarray
    theta: np.ndarray
    val_losses_before: np.ndarray
    val_losses_after: np.ndarray
    unsafe: bool
    test_metrics: dict[str, float] = field(default_factory=dict)
    baseline_metrics: dict[str, float] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    trace: list[dict[str, Any]] = field(default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)
    wall_clock: float = 0.0

    def __post_init__(self):
        if self.w.shape[0] != self.Q.shape[0]:
            raise ValueError("w and Q lengths differ")
        if self.val_losses_before.shape != self.val_losses_after.shape:
            raise ValueError("validation loss vectors differ in length")

    @property
    def gaps(self) -> np.ndarray:
        return np.asarray(self.val_losses_after) - np.asarray(self.val_losses_before)

    def to_dict(self) -> dict[str, Any]:
        """Serializable view without the wall clock (kept apart so reports replay byte for byte)."""
        payload = {
            "method": self.method,
            "seed": self.seed,
            "unsafe": bool(self.unsafe),
            "test_metrics": self.test_metrics,
            "baseline_metrics": self.baseline_metrics,
            "val_losses_before": self.val_losses_before,
            "val_losses_after": self.val_losses_after,
            "gaps": self.gaps,
            "w": self.w,
            "Q": self.Q,
            "theta": self.theta,
            "diagnostics": self.diagnostics,
            "trace": self.trace,
            "config": self.config,
        }
        plain = _plain(payload)
        if not _all_finite(plain):
            raise ValueError(f"Report for {self.method} (seed {self.seed}) contains non-finite numbers")
        return plain

    @classmethod
    def from_dict(cls, payload: dict[str, Any], wall_clock: float = 0.0) -> "RunReport":
        return cls(
            method=payload["method"],
            seed=int(payload["seed"]),
            w=np.asarray(payload["w"], dtype=np.float64),
            Q=np.asarray(payload["Q"], dtype=np.float64),
            theta=np.asarray(payload["theta"], dtype=np.float64),
            val_losses_before=np.asarray(payload["val_losses_before"], dtype=np.float64),
            val_losses_after=np.asarray(payload["val_losses_after"], dtype=np.float64),
            unsafe=bool(payload["unsafe"]),
            test_metrics=dict(payload.get("test_metrics", {})),
            baseline_metrics=dict(payload.get("baseline_metrics", {})),
            diagnostics=dict(payload.get("diagnostics", {})),
            trace=list(payload.get("trace", [])),
            config=dict(payload.get("config", {})),
            wall_clock=wall_clock,
        )
