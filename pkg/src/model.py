"""
Differentiable losses for the supported model families.

All derivatives are hand-derived. Each family exposes the logit map z(θ) through a
forward pass, its Jacobian-vector product, its vector-Jacobian product and the second-order
backward term needed for exact Hessian-vector products (forward-over-reverse for the
tanh network). Output-space losses are cross-entropy for classification and squared error
for regression.
"""
import functools
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.special import log_softmax, softmax

from .core import (
    LabelQualityParams,
    ModelFamily,
    ModelParams,
    ModelSpec,
    TaskKind,
    ValidationEnsemble,
    WeakDataset,
)

PROB_FLOOR = 1e-12
LOG_FLOOR = float(np.log(PROB_FLOOR))

ThetaLike = Union[ModelParams, np.ndarray]


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    SQUARED_ERROR = "squared_error"


def loss_kind(spec: ModelSpec) -> LossKind:
    """Cross-entropy for multi-output models, squared error for single-output ones."""
    return LossKind.SQUARED_ERROR if spec.output_dim == 1 else LossKind.CROSS_ENTROPY


def check_task(spec: ModelSpec, task: TaskKind) -> None:
    """Raise ValueError when the model's loss does not match the task."""
    expected = LossKind.CROSS_ENTROPY if task.is_classification else LossKind.SQUARED_ERROR
    if loss_kind(spec) != expected or spec.output_dim != task.output_dim:
        raise ValueError(f"{spec.family.value} with {spec.output_dim} outputs does not fit a {task.kind} task")


def _theta(theta: ThetaLike) -> np.ndarray:
    return theta.theta if isinstance(theta, ModelParams) else np.asarray(theta, dtype=np.float64)


def _check_dims(spec: ModelSpec, theta: np.ndarray, X: np.ndarray) -> None:
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ValueError(f"dimension mismatch: features have shape {X.shape}, model expects {spec.input_dim} columns")
    if theta.size != spec.n_params:
        raise ValueError(f"dimension mismatch: theta has {theta.size} entries, model needs {spec.n_params}")


def augment(spec: ModelSpec, X: np.ndarray) -> np.ndarray:
    if not spec.fit_intercept:
        return X
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass
class _Forward:
    Xa: np.ndarray
    z: np.ndarray
    hidden: Optional[np.ndarray] = None


class _SingleLayer:
    """z = [X, 1] W for linear and softmax regression."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.shape = (spec.augmented_dim, spec.output_dim)

    def forward(self, theta: np.ndarray, X: np.ndarray) -> _Forward:
        Xa = augment(self.spec, X)
        return _Forward(Xa, Xa @ theta.reshape(self.shape))

    def jvp(self, theta: np.ndarray, fw: _Forward, v: np.ndarray) -> np.ndarray:
        return fw.Xa @ v.reshape(self.shape)

    def vjp(self, theta: np.ndarray, fw: _Forward, G: np.ndarray) -> np.ndarray:
        return (fw.Xa.T @ G).ravel()

    def second_order(self, theta, fw, G, G_dot, v) -> np.ndarray:
        # z is linear in θ, so only the output curvature contributes
        return (fw.Xa.T @ G_dot).ravel()


class _TwoLayerTanh:
    """z = [tanh([X, 1] W1), 1] W2."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.h = int(spec.hidden_units)
        self.split = spec.augmented_dim * self.h
        self.shape1 = (spec.augmented_dim, self.h)
        self.shape2 = (self.h + 1, spec.output_dim)

    def unpack(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return flat[:self.split].reshape(self.shape1), flat[self.split:].reshape(self.shape2)

    def forward(self, theta: np.ndarray, X: np.ndarray) -> _Forward:
        W1, W2 = self.unpack(theta)
        Xa = augment(self.spec, X)
        hidden = np.tanh(Xa @ W1)
        return _Forward(Xa, hidden @ W2[:self.h] + W2[self.h], hidden)

    def jvp(self, theta: np.ndarray, fw: _Forward, v: np.ndarray) -> np.ndarray:
        _, W2 = self.unpack(theta)
        V1, V2 = self.unpack(v)
        hidden_dot = (1.0 - fw.hidden ** 2) * (fw.Xa @ V1)
        return hidden_dot @ W2[:self.h] + fw.hidden @ V2[:self.h] + V2[self.h]

    def vjp(self, theta: np.ndarray, fw: _Forward, G: np.ndarray) -> np.ndarray:
        _, W2 = self.unpack(theta)
        g_W2 = np.vstack([fw.hidden.T @ G, G.sum(axis=0)])
        delta = (G @ W2[:self.h].T) * (1.0 - fw.hidden ** 2)
        g_W1 = fw.Xa.T @ delta
        return np.concatenate([g_W1.ravel(), g_W2.ravel()])

    def second_order(self, theta, fw, G, G_dot, v) -> np.ndarray:
        _, W2 = self.unpack(theta)
        V1, V2 = self.unpack(v)
        slope = 1.0 - fw.hidden ** 2
        hidden_dot = slope * (fw.Xa @ V1)
        g_W2_dot = np.vstack([hidden_dot.T @ G + fw.hidden.T @ G_dot, G_dot.sum(axis=0)])
        back = G @ W2[:self.h].T
        back_dot = G_dot @ W2[:self.h].T + G @ V2[:self.h].T
        delta_dot = back_dot * slope - 2.0 * fw.hidden * hidden_dot * back
        g_W1_dot = fw.Xa.T @ delta_dot
        return np.concatenate([g_W1_dot.ravel(), g_W2_dot.ravel()])


@functools.lru_cache(maxsize=None)
def _network(spec: ModelSpec):
    if spec.family == ModelFamily.TWO_LAYER_MLP:
        return _TwoLayerTanh(spec)
    return _SingleLayer(spec)


class TrainingObjective:
    """
    The weighted, relabeled training loss at one (θ, w, Q), with all its derivatives.

    One forward pass is shared by the loss, gradient, Hessian-vector product and mixed
    partial products, which is what the reverse recursion evaluates at every tape step.
    """

    def __init__(self, spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams):
        self.spec = spec
        self.theta = _theta(theta)
        _check_dims(spec, self.theta, d.features)
        self.d = d
        self.p = p
        self.net = _network(spec)
        self.fw = self.net.forward(self.theta, d.features)
        self.coef = p.w / d.n
        self.classification = loss_kind(spec) == LossKind.CROSS_ENTROPY
        if self.classification:
            self.log_probs = log_softmax(self.fw.z, axis=1)
            self.probs = np.exp(self.log_probs)
            self.mass = p.Q.sum(axis=1)
        else:
            self.residual = self.fw.z[:, 0] - (d.labels + p.Q)

    def loss(self) -> float:
        if self.classification:
            per_class = -np.maximum(self.log_probs, LOG_FLOOR)
            data_term = float(np.sum(self.coef * np.sum(self.p.Q * per_class, axis=1)))
        else:
            data_term = float(np.sum(self.coef * self.residual ** 2))
        return data_term + 0.5 * self.spec.reg * float(self.theta @ self.theta)

    def _output_grad(self) -> np.ndarray:
        if self.classification:
            return self.coef[:, None] * (self.mass[:, None] * self.probs - self.p.Q)
        return (2.0 * self.coef * self.residual)[:, None]

    def grad(self) -> np.ndarray:
        return self.net.vjp(self.theta, self.fw, self._output_grad()) + self.spec.reg * self.theta

    def hvp(self, v: np.ndarray) -> np.ndarray:
        z_dot = self.net.jvp(self.theta, self.fw, v)
        if self.classification:
            weight = (self.coef * self.mass)[:, None]
            pz = self.probs * z_dot
            G_dot = weight * (pz - self.probs * pz.sum(axis=1, keepdims=True))
        else:
            G_dot = 2.0 * self.coef[:, None] * z_dot
        return self.net.second_order(self.theta, self.fw, self._output_grad(), G_dot, v) + self.spec.reg * v

    def _per_class_directional(self, z_dot: np.ndarray) -> np.ndarray:
        # entry (i, j) = <v, grad_theta l(x_i, j, theta)> = <p_i, z_dot_i> - z_dot_ij
        return (self.probs * z_dot).sum(axis=1, keepdims=True) - z_dot

    def mixed_w_vjp(self, v: np.ndarray) -> np.ndarray:
        z_dot = self.net.jvp(self.theta, self.fw, v)
        if self.classification:
            return np.sum(self.p.Q * self._per_class_directional(z_dot), axis=1) / self.d.n
        return 2.0 * self.residual * z_dot[:, 0] / self.d.n

    def mixed_q_vjp(self, v: np.ndarray) -> np.ndarray:
        z_dot = self.net.jvp(self.theta, self.fw, v)
        if self.classification:
            return self.coef[:, None] * self._per_class_directional(z_dot)
        return -2.0 * self.coef * z_dot[:, 0]

    def second_order_products(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(H v, vᵀ ∂²L/∂θ∂wᵀ, vᵀ ∂²L/∂θ∂Qᵀ) sharing one Jacobian-vector product."""
        z_dot = self.net.jvp(self.theta, self.fw, v)
        G = self._output_grad()
        if self.classification:
            weight = (self.coef * self.mass)[:, None]
            pz = self.probs * z_dot
            G_dot = weight * (pz - self.probs * pz.sum(axis=1, keepdims=True))
            directional = self._per_class_directional(z_dot)
            mixed_w = np.sum(self.p.Q * directional, axis=1) / self.d.n
            mixed_q = self.coef[:, None] * directional
        else:
            G_dot = 2.0 * self.coef[:, None] * z_dot
            mixed_w = 2.0 * self.residual * z_dot[:, 0] / self.d.n
            mixed_q = -2.0 * self.coef * z_dot[:, 0]
        hv = self.net.second_order(self.theta, self.fw, G, G_dot, v) + self.spec.reg * v
        return hv, mixed_w, mixed_q


# --------------------------------------------------------------------------------------
# Module-level operations
# --------------------------------------------------------------------------------------


def predict(spec: ModelSpec, theta: ThetaLike, X: np.ndarray) -> np.ndarray:
    """
    Model predictions.

    Args:
        spec: Model description
        theta: Parameters
        X: Feature matrix (n x d)

    Returns:
        Class probabilities (n x k, rows sum to 1) or real predictions (n,)

    Raises:
        ValueError: On dimension mismatch
    """
    flat = _theta(theta)
    X = np.asarray(X, dtype=np.float64)
    _check_dims(spec, flat, X)
    z = _network(spec).forward(flat, X).z
    if loss_kind(spec) == LossKind.CROSS_ENTROPY:
        return softmax(z, axis=1)
    return z[:, 0]


def per_class_loss(spec: ModelSpec, theta: ThetaLike, x_i: np.ndarray, j: int) -> float:
    """Cross-entropy ℓ(x_i, j, θ) = -log p_j, with p_j floored at 1e-12."""
    if loss_kind(spec) != LossKind.CROSS_ENTROPY:
        raise ValueError("per_class_loss is defined for classification models only")
    if not 0 <= j < spec.output_dim:
        raise ValueError(f"class index {j} out of range [0, {spec.output_dim})")
    flat = _theta(theta)
    X = np.asarray(x_i, dtype=np.float64).reshape(1, -1)
    _check_dims(spec, flat, X)
    log_probs = log_softmax(_network(spec).forward(flat, X).z, axis=1)
    return float(-max(log_probs[0, j], LOG_FLOOR))


def per_instance_losses(spec: ModelSpec, theta: ThetaLike, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Clean (unweighted) loss of every instance at its given label."""
    flat = _theta(theta)
    _check_dims(spec, flat, X)
    z = _network(spec).forward(flat, X).z
    if loss_kind(spec) == LossKind.CROSS_ENTROPY:
        log_probs = log_softmax(z, axis=1)
        return -np.maximum(log_probs[np.arange(len(y)), y.astype(np.int64)], LOG_FLOOR)
    return (z[:, 0] - y) ** 2


def weighted_train_loss(spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams) -> float:
    """(1/n) Σ w_i Σ_j Q_ij ℓ(x_i, j, θ) (or ℓ(x_i, y_i + Q_i, θ)) + l2_reg·‖θ‖²/2."""
    return TrainingObjective(spec, theta, d, p).loss()


def grad_theta(spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams) -> np.ndarray:
    """Exact gradient of weighted_train_loss in θ."""
    return TrainingObjective(spec, theta, d, p).grad()


def hvp_theta(spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams,
              v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product (∂²L_train/∂θ∂θᵀ) v."""
    return TrainingObjective(spec, theta, d, p).hvp(np.asarray(v, dtype=np.float64))


def mixed_w_vjp(spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams,
                v: np.ndarray) -> np.ndarray:
    """vᵀ (∂²L_train/∂θ∂wᵀ), an n-vector."""
    return TrainingObjective(spec, theta, d, p).mixed_w_vjp(np.asarray(v, dtype=np.float64))


def mixed_q_vjp(spec: ModelSpec, theta: ThetaLike, d: WeakDataset, p: LabelQualityParams,
                v: np.ndarray) -> np.ndarray:
    """vᵀ (∂²L_train/∂θ∂Qᵀ), shaped like Q."""
    return TrainingObjective(spec, theta, d, p).mixed_q_vjp(np.asarray(v, dtype=np.float64))


def validation_loss(spec: ModelSpec, theta: ThetaLike, base_set: WeakDataset, member: np.ndarray) -> float:
    """Mean clean loss over a bootstrap member (duplicated indices count repeatedly)."""
    member = np.asarray(member, dtype=np.int64)
    losses = per_instance_losses(spec, theta, base_set.features, base_set.labels)
    return float(np.mean(losses[member]))


def member_losses(spec: ModelSpec, theta: ThetaLike, ensemble: ValidationEnsemble) -> np.ndarray:
    """Validation loss of every ensemble member from a single forward pass."""
    base = ensemble.base_set
    losses = per_instance_losses(spec, theta, base.features, base.labels)
    return np.array([float(np.mean(losses[member])) for member in ensemble.member_indices])


def member_gradients(spec: ModelSpec, theta: ThetaLike, ensemble: ValidationEnsemble) -> np.ndarray:
    """(m x dim θ) matrix whose rows are ∇_θ of each member's validation loss."""
    flat = _theta(theta)
    base = ensemble.base_set
    _check_dims(spec, flat, base.features)
    net = _network(spec)
    fw = net.forward(flat, base.features)
    if loss_kind(spec) == LossKind.CROSS_ENTROPY:
        probs = softmax(fw.z, axis=1)
        probs[np.arange(base.n), base.labels] -= 1.0
        per_instance = probs
    else:
        per_instance = 2.0 * (fw.z - base.labels[:, None])
    counts = ensemble.member_counts()
    sizes = counts.sum(axis=1)
    return np.vstack([
        net.vjp(flat, fw, (counts[i] / sizes[i])[:, None] * per_instance) for i in range(ensemble.m)
    ])
