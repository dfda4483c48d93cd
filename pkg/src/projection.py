"""
Euclidean projections of (w, Q) onto the feasible region Λ.

Λ is a product set, so w and Q are projected independently. The classification Q set
couples a per-row simplex with a cap on the mean label distance. Its exact projection shifts
the capped rows towards their observed labels by a shared multiplier found by bisection; the
cheaper simplex-then-blend rule is kept as an alternative. The ``qp_*`` functions solve the same projections as dense quadratic
programs and serve as an optimality oracle.
"""
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .core import FeasibleRegion, LabelQualityParams, WeakDataset, one_hot
from .exceptions import InfeasibleRegionError

BISECTION_STEPS = 200
FLOOR_SLACK = 1e-9
PROJECTION_METHODS = ("exact", "blend")


def project_simplex_rows(Q: np.ndarray) -> np.ndarray:
    """Sort-based Euclidean projection of every row onto the probability simplex."""
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    k = Q.shape[1]
    u = -np.sort(-Q, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, k + 1)
    cond = u - css / ind > 0
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(Q.shape[0]), rho] / (rho + 1)
    return np.maximum(Q - tau[:, None], 0.0)


def project_w(w: np.ndarray, eps1: float, frozen: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Project instance weights onto {w ∈ [0, 1]^n, ‖w‖₁ ≥ eps1}.

    Args:
        w: Weights
        eps1: Floor on the l1 norm
        frozen: Coordinates passed through unchanged (still counted in the norm)

    Returns:
        Projected weights

    Raises:
        InfeasibleRegionError: If eps1 cannot be reached
    """
    w = np.asarray(w, dtype=np.float64)
    frozen = np.zeros(w.size, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    free = ~frozen
    reachable = float(w[frozen].sum()) + float(free.sum())
    if eps1 > w.size or eps1 > reachable + FLOOR_SLACK:
        raise InfeasibleRegionError(f"eps1={eps1} cannot be reached (at most {reachable:.6g})")

    out = w.copy()
    out[free] = np.clip(w[free], 0.0, 1.0)
    if out.sum() >= eps1:
        return out

    # the floor binds: shift the free block up by the smallest tau restoring it
    def total(tau: float) -> float:
        return float(out[frozen].sum() + np.clip(w[free] + tau, 0.0, 1.0).sum())

    lo, hi = 0.0, 1.0 - float(np.min(w[free])) if free.any() else 0.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if total(mid) >= eps1:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15:
            break
    out[free] = np.clip(w[free] + hi, 0.0, 1.0)
    return out


def label_distance(Q: np.ndarray, y: np.ndarray, rows: np.ndarray) -> float:
    """Mean of 1 − Q_{i, y_i} over the selected rows (0 when none are selected)."""
    if not rows.any():
        return 0.0
    return float(np.mean(1.0 - Q[rows, y[rows]]))


def _capped_rows_exact(Q: np.ndarray, y: np.ndarray, target: float) -> np.ndarray:
    """
    Joint projection of rows whose label entries must sum to at least ``target``.

    The KKT conditions give X_i = Π_simplex(Q_i + μ·e_{y_i}) with a shared multiplier μ ≥ 0;
    the label mass is nondecreasing in μ, so μ is found by bisection.
    """
    rows = np.arange(Q.shape[0])
    lift = one_hot(y, Q.shape[1])

    def label_mass(mu: float) -> float:
        return float(project_simplex_rows(Q + mu * lift)[rows, y].sum())

    # at hi every row projects to its one-hot vertex
    lo, hi = 0.0, float(np.max(Q.max(axis=1) - Q[rows, y])) + 1.0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        if label_mass(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return project_simplex_rows(Q + hi * lift)


def project_q_classification(
    Q: np.ndarray,
    y: np.ndarray,
    eps2: float,
    frozen: Optional[np.ndarray] = None,
    capped: Optional[np.ndarray] = None,
    method: str = "exact",
) -> np.ndarray:
    """
    Project label transitions onto the per-row simplex with a mean-distance cap.

    Args:
        Q: n x k transition matrix
        y: Observed labels
        eps2: Cap on the mean of 1 − Q_{i, y_i} over capped rows, in [0, 1]
        frozen: Rows left untouched
        capped: Rows counted in the cap (default: every non-frozen row)
        method: "exact" (Euclidean projection via the cap multiplier) or "blend" (simplex
            projection, then the smallest blend towards one-hot rows restoring the cap)

    Returns:
        Projected matrix; non-frozen rows on the simplex, cap satisfied
    """
    if not 0.0 <= eps2 <= 1.0:
        raise InfeasibleRegionError(f"classification eps2 must lie in [0, 1], got {eps2}")
    if method not in PROJECTION_METHODS:
        raise ValueError(f"Unknown projection method: {method}")
    Q = np.asarray(Q, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    frozen = np.zeros(Q.shape[0], dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    free = ~frozen
    capped = free if capped is None else (np.asarray(capped, dtype=bool) & free)

    out = Q.copy()
    if free.any():
        out[free] = project_simplex_rows(Q[free])

    distance = label_distance(out, y, capped)
    if distance <= eps2:
        return out
    if method == "exact":
        out[capped] = _capped_rows_exact(Q[capped], y[capped], capped.sum() * (1.0 - eps2))
    else:
        # closed form: (1 - t) * D = eps2
        t = (distance - eps2) / distance
        E = one_hot(y[capped], Q.shape[1])
        out[capped] = (1.0 - t) * out[capped] + t * E
    return out


def project_q_regression(Q: np.ndarray, eps2: float, frozen: Optional[np.ndarray] = None) -> np.ndarray:
    """Scale the non-frozen block of Q into the ball ‖Q‖₂ ≤ eps2."""
    if eps2 < 0:
        raise InfeasibleRegionError(f"eps2 must be non-negative, got {eps2}")
    Q = np.asarray(Q, dtype=np.float64)
    frozen = np.zeros(Q.size, dtype=bool) if frozen is None else np.asarray(frozen, dtype=bool)
    free = ~frozen
    out = Q.copy()
    norm = float(np.linalg.norm(Q[free]))
    if norm > eps2:
        out[free] = Q[free] * (eps2 / norm)
    return out


def project(w: np.ndarray, Q: np.ndarray, d: WeakDataset, frozen: np.ndarray,
            region: FeasibleRegion) -> LabelQualityParams:
    """Projection step onto Λ for an (unconstrained) optimizer iterate."""
    region.check(d.n, d.task)
    w_proj = project_w(w, region.eps1, frozen)
    if d.task.is_classification:
        Q_proj = project_q_classification(Q, d.labels, region.eps2, frozen, capped=~frozen & d.labeled_mask)
    else:
        Q_proj = project_q_regression(Q, region.eps2, frozen)
    return LabelQualityParams(w_proj, Q_proj, frozen)


# --------------------------------------------------------------------------------------
# Dense quadratic-program oracle
# --------------------------------------------------------------------------------------


def _solve_qp(target: np.ndarray, constraints: list, bounds, x0: np.ndarray) -> np.ndarray:
    result = minimize(
        lambda x: 0.5 * float(np.sum((x - target) ** 2)),
        x0,
        jac=lambda x: x - target,
        bounds=bounds,
        constraints=constraints,
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 500},
    )
    return result.x


def qp_project_w(w: np.ndarray, eps1: float) -> np.ndarray:
    """Exact projection onto {w ∈ [0, 1]^n, Σ w ≥ eps1} by SLSQP."""
    w = np.asarray(w, dtype=np.float64)
    constraints = [{"type": "ineq", "fun": lambda x: np.sum(x) - eps1, "jac": lambda x: np.ones_like(x)}]
    return _solve_qp(w, constraints, [(0.0, 1.0)] * w.size, np.full(w.size, 0.5))


def qp_project_q_classification(Q: np.ndarray, y: np.ndarray, eps2: float) -> np.ndarray:
    """Exact joint projection onto row simplices with the mean-distance cap."""
    Q = np.asarray(Q, dtype=np.float64)
    n, k = Q.shape
    y = np.asarray(y, dtype=np.int64)
    label_index = np.arange(n) * k + y

    def row_sums(x):
        return x.reshape(n, k).sum(axis=1) - 1.0

    def row_sums_jac(x):
        J = np.zeros((n, n * k))
        for i in range(n):
            J[i, i * k:(i + 1) * k] = 1.0
        return J

    def cap(x):
        return np.array([eps2 - np.mean(1.0 - x[label_index])])

    def cap_jac(x):
        J = np.zeros((1, n * k))
        J[0, label_index] = 1.0 / n
        return J

    constraints = [
        {"type": "eq", "fun": row_sums, "jac": row_sums_jac},
        {"type": "ineq", "fun": cap, "jac": cap_jac},
    ]
    x0 = one_hot(y, k).ravel()
    return _solve_qp(Q.ravel(), constraints, [(0.0, 1.0)] * (n * k), x0).reshape(n, k)


def qp_project_q_regression(Q: np.ndarray, eps2: float) -> np.ndarray:
    """Exact projection onto the ball ‖Q‖₂ ≤ eps2."""
    Q = np.asarray(Q, dtype=np.float64)
    constraints = [{"type": "ineq", "fun": lambda x: eps2 ** 2 - float(x @ x), "jac": lambda x: -2.0 * x}]
    return _solve_qp(Q, constraints, None, np.zeros_like(Q))


def compare_with_oracle(cases: int = 500, seed: int = 0, max_n: int = 3, max_k: int = 3) -> list[dict]:
    """
    Project random small points with both the fast routines and the QP oracle.

    Each row records the set, the distance from the input to both outputs, their gap, and
    whether the fast output is feasible.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for case in range(cases):
        n = int(rng.integers(1, max_n + 1))
        k = int(rng.integers(2, max_k + 1))

        w = rng.uniform(-0.5, 1.5, size=n)
        eps1 = float(rng.uniform(0.0, n))
        fast, exact = project_w(w, eps1), qp_project_w(w, eps1)
        feasible = bool((fast >= -1e-9).all() and (fast <= 1 + 1e-9).all() and fast.sum() >= eps1 - 1e-9)
        rows.append(_oracle_row(case, "w", w, fast, exact, feasible))

        q = rng.normal(0.0, 2.0, size=n)
        radius = float(rng.uniform(0.0, 2.0))
        fast, exact = project_q_regression(q, radius), qp_project_q_regression(q, radius)
        rows.append(_oracle_row(case, "q_regression", q, fast, exact, bool(np.linalg.norm(fast) <= radius + 1e-9)))

        Q = rng.uniform(-0.5, 1.5, size=(n, k))
        y = rng.integers(0, k, size=n)
        cap = float(rng.uniform(0.0, 1.0))
        fast, exact = project_q_classification(Q, y, cap), qp_project_q_classification(Q, y, cap)
        feasible = bool(
            (fast >= -1e-9).all()
            and np.allclose(fast.sum(axis=1), 1.0, atol=1e-9)
            and label_distance(fast, y, np.ones(n, dtype=bool)) <= cap + 1e-9
        )
        rows.append(_oracle_row(case, "q_classification", Q, fast, exact, feasible))
    return rows


def _oracle_row(case: int, target: str, x: np.ndarray, fast: np.ndarray, exact: np.ndarray,
                feasible: bool) -> dict:
    fast_distance = float(np.linalg.norm(x - fast))
    oracle_distance = float(np.linalg.norm(x - exact))
    return {
        "case": case,
        "set": target,
        "distance": fast_distance,
        "oracle_distance": oracle_distance,
        "gap": fast_distance - oracle_distance,
        "feasible": feasible,
    }
