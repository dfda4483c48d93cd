"""
Experiment construction and evaluation.

Noise injectors, label masking, four-way splits, bootstrap validation ensembles, the
method runners (Baseline, ValidationOnly, PGS on either path) and the aggregation of run
reports into mean ± std tables.
"""
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import MinMaxScaler

from .config import METHODS, NoiseConfig, ProtocolConfig, settings
from .core import (
    FeasibleRegion,
    LabelQualityParams,
    ModelSpec,
    PgsConfig,
    PlantedTruth,
    RunReport,
    TaskKind,
    ValidationEnsemble,
    WeakDataset,
    baseline_params,
    identity_params,
)
from .data_io import load_dataset
from .exceptions import UnknownMethodError
from .logging_config import get_logger
from .lower_solver import train
from .metrics import MetricKind, correction_f1, evaluate, task_metric, weight_auc
from .model import check_task, member_losses
from .pgs import compute_baseline, extract_corrections, pgs_convex, pgs_nonconvex, starting_point
from .utils import config_hash, load_json, save_to_json

logger = get_logger(__name__)

VALIDATION_KINDS = ("unbiased", "biased")

# independent random streams derived from one seed
STREAM_SPLIT = 1
STREAM_NOISE = 2
STREAM_ENSEMBLE = 3
STREAM_BIAS = 4


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(stream)]).generate_state(1)[0])


def _round_count(x: float) -> int:
    """Round half up (``round`` in Python rounds half to even)."""
    return int(np.floor(x + 0.5))


# --------------------------------------------------------------------------------------
# Noise and masking
# --------------------------------------------------------------------------------------


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")


def inject_uniform_flip(d: WeakDataset, ratio: float, seed: int) -> tuple[WeakDataset, PlantedTruth]:
    """
    Flip exactly round(ratio·n) labels to a uniformly drawn different class.

    Args:
        d: Clean classification dataset
        ratio: Share of instances to corrupt, in [0, 1]
        seed: Random seed

    Returns:
        (noisy dataset, truth recording the original labels and flipped instances)
    """
    if not d.task.is_classification:
        raise ValueError("uniform flip noise needs a classification task")
    _check_ratio(ratio)
    rng = np.random.default_rng(seed)
    n_flip = _round_count(ratio * d.n)
    flipped = rng.choice(d.n, size=n_flip, replace=False)
    offsets = rng.integers(1, d.k, size=n_flip)

    labels = np.array(d.labels)
    labels[flipped] = (labels[flipped] + offsets) % d.k
    mask = np.zeros(d.n, dtype=bool)
    mask[flipped] = True
    logger.debug("Flipped %d of %d labels", n_flip, d.n)
    return d.with_labels(labels), PlantedTruth(d.labels, mask)


def inject_gauss_noise(d: WeakDataset, sigma: float, seed: int,
                       ratio: float = 1.0) -> tuple[WeakDataset, PlantedTruth]:
    """
    Add N(0, sigma²) noise to regression labels.

    With ratio < 1 only round(ratio·n) randomly chosen instances are perturbed; the
    corruption mask marks exactly those (all instances when ratio is 1).
    """
    if d.task.is_classification:
        raise ValueError("Gaussian label noise needs a regression task")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    _check_ratio(ratio)
    rng = np.random.default_rng(seed)
    if ratio >= 1.0:
        chosen = np.arange(d.n)
    else:
        chosen = np.sort(rng.choice(d.n, size=_round_count(ratio * d.n), replace=False))
    labels = np.array(d.labels)
    labels[chosen] += rng.normal(0.0, sigma, size=chosen.size)
    mask = np.zeros(d.n, dtype=bool)
    mask[chosen] = True
    return d.with_labels(labels), PlantedTruth(d.labels, mask)


def _stratified_counts(class_sizes: np.ndarray, fraction: float, total: int) -> np.ndarray:
    """Largest-remainder apportionment of ``total`` over classes, proportional to their sizes."""
    quotas = fraction * class_sizes
    counts = np.minimum(np.floor(quotas).astype(np.int64), class_sizes)
    remainders = quotas - counts
    for c in np.argsort(-remainders, kind="stable"):
        if counts.sum() >= total:
            break
        if counts[c] < class_sizes[c]:
            counts[c] += 1
    return counts


def mask_labels_with_truth(d: WeakDataset, labeled_fraction: float,
                           seed: int) -> tuple[WeakDataset, PlantedTruth]:
    """
    Keep round(fraction·n) labels and hide the rest.

    Classification masking is stratified by class. Hidden classification labels become the
    placeholder class 0, hidden regression labels the mean of the kept labels. The truth
    holds the original labels with the hidden instances marked.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must lie in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    total = max(1, _round_count(labeled_fraction * d.n))
    labeled = np.zeros(d.n, dtype=bool)

    if d.task.is_classification:
        sizes = np.bincount(d.labels, minlength=d.k)
        counts = _stratified_counts(sizes, labeled_fraction, total)
        for c in range(d.k):
            members = np.flatnonzero(d.labels == c)
            labeled[rng.choice(members, size=counts[c], replace=False)] = True
    else:
        labeled[rng.choice(d.n, size=total, replace=False)] = True

    labels = np.array(d.labels)
    if d.task.is_classification:
        labels[~labeled] = 0
    else:
        labels[~labeled] = float(np.mean(d.labels[labeled]))
    return d.with_labels(labels, labeled), PlantedTruth(d.labels, ~labeled)


def mask_labels(d: WeakDataset, labeled_fraction: float, seed: int) -> WeakDataset:
    """Semi-supervised view of ``d`` with round(fraction·n) labels kept."""
    masked, _ = mask_labels_with_truth(d, labeled_fraction, seed)
    return masked


def apply_noise(d: WeakDataset, noise: NoiseConfig, seed: int) -> tuple[WeakDataset, Optional[PlantedTruth]]:
    """Apply the protocol's weak-supervision scheme to a clean training split."""
    if noise.kind == "none":
        return d, None
    if noise.kind == "uniform_flip":
        return inject_uniform_flip(d, noise.ratio, seed)
    if noise.kind == "gauss":
        return inject_gauss_noise(d, noise.sigma, seed, noise.ratio)
    return mask_labels_with_truth(d, noise.labeled_fraction, seed)


# --------------------------------------------------------------------------------------
# Splits and validation sets
# --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    train: WeakDataset
    validation: WeakDataset
    hyper_validation: WeakDataset
    test: WeakDataset


def split_four(d: WeakDataset, shares: tuple = (0.7, 0.1, 0.1, 0.1), seed: int = 0,
               validation_size: Optional[int] = None) -> Splits:
    """
    Seeded train / validation / hyper-validation / test split.

    Args:
        d: Full dataset
        shares: Relative sizes of the four parts
        seed: Random seed of the permutation
        validation_size: Exact validation size overriding its share

    Returns:
        Splits; the training part takes whatever the other three leave

    Raises:
        ValueError: If any part would be empty
    """
    weights = np.asarray(shares, dtype=np.float64)
    if weights.shape != (4,) or (weights <= 0).any():
        raise ValueError("split needs four positive shares")
    weights = weights / weights.sum()
    n_val = validation_size if validation_size is not None else _round_count(weights[1] * d.n)
    n_hyper = _round_count(weights[2] * d.n)
    n_test = _round_count(weights[3] * d.n)
    n_train = d.n - n_val - n_hyper - n_test
    if min(n_train, n_val, n_hyper, n_test) < 1:
        raise ValueError(
            f"cannot split {d.n} instances into train={n_train}, validation={n_val}, "
            f"hyper_validation={n_hyper}, test={n_test}"
        )
    order = np.random.default_rng(seed).permutation(d.n)
    bounds = np.cumsum([n_train, n_val, n_hyper])
    parts = np.split(order, bounds)
    return Splits(*(d.subset(part) for part in parts))


def normalize_minmax(d: WeakDataset) -> WeakDataset:
    """Scale every feature into [0, 1]; regression labels too."""
    features = MinMaxScaler().fit_transform(d.features)
    labels = d.labels
    if not d.task.is_classification:
        labels = MinMaxScaler().fit_transform(d.labels.reshape(-1, 1))[:, 0]
    return WeakDataset(features, labels, d.task, d.labeled_mask)


def make_ensemble(val: WeakDataset, m: int, seed: int) -> ValidationEnsemble:
    """m bootstrap resamples (with replacement, size n_v) of the validation set."""
    if m < 1:
        raise ValueError("ensemble size must be at least 1")
    rng = np.random.default_rng(seed)
    members = tuple(rng.integers(0, val.n, size=val.n) for _ in range(m))
    return ValidationEnsemble(val, members)


def bias_validation(val: WeakDataset, group_split: Optional[int] = None, ratio: tuple = (1.0, 3.0),
                    seed: int = 0) -> WeakDataset:
    """
    Subsample a validation set so two class groups appear in the given ratio.

    Classes below ``group_split`` (default k // 2) form group 0, the rest group 1. The
    largest subsample with the target ratio is kept, in original order.
    """
    if not val.task.is_classification:
        raise ValueError("biased validation needs a classification task")
    split = val.k // 2 if group_split is None else group_split
    if not 1 <= split < val.k:
        raise ValueError(f"group_split must lie in [1, {val.k}), got {split}")
    r0, r1 = (float(r) for r in ratio)
    if r0 <= 0 or r1 <= 0:
        raise ValueError("group ratios must be positive")

    group0 = np.flatnonzero(val.labels < split)
    group1 = np.flatnonzero(val.labels >= split)
    scale = min(group0.size / r0, group1.size / r1)
    keep0 = min(group0.size, _round_count(scale * r0))
    keep1 = min(group1.size, _round_count(scale * r1))
    if keep0 + keep1 < 1:
        raise ValueError("biased validation set would be empty")

    rng = np.random.default_rng(seed)
    kept = np.concatenate([
        rng.choice(group0, size=keep0, replace=False),
        rng.choice(group1, size=keep1, replace=False),
    ])
    return val.subset(np.sort(kept))


# --------------------------------------------------------------------------------------
# Methods
# --------------------------------------------------------------------------------------


def normalize_method(name: str) -> str:
    """Map spellings such as ``PGS-convex`` or ``ValidationOnly`` to canonical method names."""
    key = re.sub(r"[^a-z]", "", name.lower())
    for method in METHODS:
        if key == method.replace("_", ""):
            return method
    raise UnknownMethodError(f"Unknown method: {name} (expected one of {', '.join(METHODS)})")


def build_spec(protocol: ProtocolConfig, task: TaskKind, input_dim: int) -> ModelSpec:
    model = protocol.model
    spec = ModelSpec.for_task(
        model.family, task, input_dim,
        hidden_units=model.hidden_units, l2_reg=model.l2_reg, fit_intercept=model.fit_intercept,
    )
    check_task(spec, task)
    return spec


def build_region(protocol: ProtocolConfig, d: WeakDataset, p: LabelQualityParams) -> FeasibleRegion:
    default = FeasibleRegion.default_for(d, p)
    return FeasibleRegion(
        eps1=default.eps1 if protocol.region.eps1 is None else protocol.region.eps1,
        eps2=default.eps2 if protocol.region.eps2 is None else protocol.region.eps2,
    ).check(d.n, d.task)


@dataclass
class _SeedContext:
    protocol: ProtocolConfig
    seed: int
    spec: ModelSpec
    train: WeakDataset
    truth: Optional[PlantedTruth]
    hyper_validation: WeakDataset
    test: WeakDataset
    config: PgsConfig
    metric: MetricKind


def _plain_report(ctx: _SeedContext, method: str, theta: np.ndarray, p: LabelQualityParams,
                  ensemble: ValidationEnsemble) -> RunReport:
    losses = member_losses(ctx.spec, theta, ensemble)
    return RunReport(
        method=method,
        seed=ctx.seed,
        w=np.array(p.w),
        Q=np.array(p.Q),
        theta=np.array(theta),
        val_losses_before=np.array(ensemble.baseline_losses),
        val_losses_after=losses,
        unsafe=bool(np.any(losses - ensemble.baseline_losses > ctx.config.safety_slack)),
    )


def _run_method(ctx: _SeedContext, method: str, validation: WeakDataset,
                ensemble: ValidationEnsemble) -> RunReport:
    spec, config = ctx.spec, ctx.config
    if method == "baseline":
        combined = ctx.train.concat(validation)
        theta = train(spec, combined, baseline_params(combined), config).theta
        return _plain_report(ctx, method, theta, baseline_params(ctx.train), ensemble)
    if method == "validation_only":
        p = identity_params(validation)
        theta = train(spec, validation, p, config).theta
        return _plain_report(ctx, method, theta, p, ensemble)

    p0 = starting_point(ctx.train)
    region = build_region(ctx.protocol, ctx.train, p0)

    def monitor(theta: np.ndarray) -> float:
        return evaluate(spec, theta, ctx.hyper_validation, ctx.metric).value

    runner = pgs_convex if method == "pgs_convex" else pgs_nonconvex
    report = runner(spec, ctx.train, ensemble, config, region, p0=p0, monitor=monitor)

    if ctx.truth is not None:
        learned = LabelQualityParams(report.w, report.Q, p0.frozen)
        if ctx.protocol.noise.kind == "uniform_flip":
            corrections = extract_corrections(learned, ctx.train, config.w_threshold)
            report.test_metrics[MetricKind.CORRECTION_F1.value] = correction_f1(
                corrections.proposed_labels, corrections.is_correction, ctx.truth
            ).value
            report.diagnostics["n_corrections"] = corrections.n_corrections
            report.diagnostics["n_distrusted"] = int(corrections.is_distrusted.sum())
        if ctx.protocol.noise.kind in ("uniform_flip", "gauss"):
            report.test_metrics[MetricKind.WEIGHT_AUC.value] = weight_auc(learned, ctx.truth).value
    return report


def _prepare_seed(protocol: ProtocolConfig, seed: int) -> tuple[_SeedContext, WeakDataset]:
    full = load_dataset(protocol.data, protocol.task, seed)
    normalize = protocol.data.normalize
    if normalize is None:
        normalize = protocol.task == "regression"
    if normalize:
        full = normalize_minmax(full)
    splits = split_four(full, protocol.data.split, derive_seed(seed, STREAM_SPLIT), protocol.data.validation_size)
    train_set, truth = apply_noise(splits.train, protocol.noise, derive_seed(seed, STREAM_NOISE))
    ctx = _SeedContext(
        protocol=protocol,
        seed=seed,
        spec=build_spec(protocol, full.task, full.d),
        train=train_set,
        truth=truth,
        hyper_validation=splits.hyper_validation,
        test=splits.test,
        config=protocol.pgs.model_copy(update={"seed": seed}),
        metric=task_metric(full),
    )
    return ctx, splits.validation


def run_seed(protocol: ProtocolConfig, seed: int) -> list[RunReport]:
    """Every (validation kind, method) run of a protocol for one seed, in a fixed order."""
    methods = [normalize_method(m) for m in protocol.methods]
    ctx, validation = _prepare_seed(protocol, seed)
    if "pgs_convex" in methods and not ctx.spec.is_convex:
        raise ValueError(f"pgs_convex requires a convex family, got {ctx.spec.family.value}")
    echo = protocol.with_seed(seed).echo()
    reports = []

    for kind in protocol.validation_kinds:
        val = validation
        if kind == "biased":
            bias = protocol.validation_bias
            val = bias_validation(validation, bias.group_split, bias.ratio, derive_seed(seed, STREAM_BIAS))
        ensemble = make_ensemble(val, protocol.ensemble_size, derive_seed(seed, STREAM_ENSEMBLE))
        theta_base, ensemble = compute_baseline(ctx.spec, ctx.train, ensemble, ctx.config)
        baseline_metric = evaluate(ctx.spec, theta_base, ctx.test, ctx.metric).value

        for method in methods:
            start = time.perf_counter()
            report = _run_method(ctx, method, val, ensemble)
            report.wall_clock = time.perf_counter() - start
            report.test_metrics[ctx.metric.value] = evaluate(ctx.spec, report.theta, ctx.test, ctx.metric).value
            report.baseline_metrics[ctx.metric.value] = baseline_metric
            report.diagnostics.update({"validation_kind": kind, "metric": ctx.metric.value,
                                       "n_train": ctx.train.n, "n_validation": val.n})
            report.config = echo
            logger.info("seed %d %s/%s: %s=%.4f (baseline %.4f)%s", seed, kind, method, ctx.metric.value,
                        report.test_metrics[ctx.metric.value], baseline_metric,
                        " UNSAFE" if report.unsafe else "")
            reports.append(report)
    return reports


def _run_seed_payload(payload: tuple[dict[str, Any], int]) -> list[RunReport]:
    echo, seed = payload
    return run_seed(ProtocolConfig.model_validate(echo), seed)


def resolve_jobs(n_jobs: Optional[int]) -> int:
    jobs = settings.n_jobs if n_jobs is None else n_jobs
    return jobs if jobs > 0 else (os.cpu_count() or 1)


def run_experiment(protocol: ProtocolConfig, n_jobs: Optional[int] = None) -> list[RunReport]:
    """
    Run every (seed, validation kind, method) combination of a protocol.

    Args:
        protocol: Validated experiment description
        n_jobs: Worker processes (None: settings.n_jobs; 0: one per core; 1: in-process)

    Returns:
        Reports ordered by seed, then validation kind, then method

    Raises:
        UnknownMethodError: If a method name is not recognized
    """
    for method in protocol.methods:
        normalize_method(method)
    seeds = list(protocol.seeds)
    if not seeds:
        return []
    jobs = min(resolve_jobs(n_jobs), len(seeds))
    if jobs == 1:
        batches = [run_seed(protocol, seed) for seed in seeds]
    else:
        echo = protocol.echo()
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            batches = list(executor.map(_run_seed_payload, [(echo, seed) for seed in seeds]))
    return [report for batch in batches for report in batch]


# --------------------------------------------------------------------------------------
# Aggregation, persistence and sweeps
# --------------------------------------------------------------------------------------


def summarize(reports: list[RunReport]) -> pd.DataFrame:
    """
    Mean and standard deviation (ddof 0) of every test metric per (validation kind, method).

    Groups keep the order in which they first appear.
    """
    rows = []
    for report in reports:
        for metric, value in report.test_metrics.items():
            rows.append({
                "validation_kind": report.diagnostics.get("validation_kind", "unbiased"),
                "method": report.method,
                "metric": metric,
                "value": value,
            })
    columns = ["validation_kind", "method", "metric", "mean", "std", "n"]
    if not rows:
        return pd.DataFrame(columns=columns)
    df = pd.DataFrame(rows)
    grouped = df.groupby(["validation_kind", "method", "metric"], sort=False)["value"]
    stats = grouped.agg(mean="mean", std=lambda v: float(np.std(v, ddof=0)), n="count").reset_index()
    return stats[columns]


def results_table(reports: list[RunReport], metric: Optional[str] = None) -> pd.DataFrame:
    """Rows = validation kind, columns = methods, cells ``mean ± std`` of one metric."""
    stats = summarize(reports)
    if stats.empty:
        return pd.DataFrame()
    if metric is None:
        metric = reports[0].diagnostics.get("metric", stats["metric"].iloc[0])
    stats = stats[stats["metric"] == metric]
    cells = stats.assign(cell=[f"{m:.4f} ± {s:.4f}" for m, s in zip(stats["mean"], stats["std"])])
    table = cells.pivot(index="validation_kind", columns="method", values="cell")
    methods = list(dict.fromkeys(cells["method"]))
    kinds = list(dict.fromkeys(cells["validation_kind"]))
    table = table.reindex(index=kinds, columns=methods)
    table.columns.name = None
    return table


def report_dirname(report: RunReport, protocol_json: str) -> str:
    kind = report.diagnostics.get("validation_kind", "unbiased")
    return f"{report.method}-{config_hash(f'{protocol_json}|validation={kind}', report.seed)}"


def write_reports(reports: list[RunReport], output_dir: Union[str, Path]) -> list[str]:
    """
    Write ``<method>-<hash>/report.json`` and ``timing.json`` for every report.

    The hash covers the echoed config, seed and validation kind, so reruns overwrite the
    same directories with identical bytes.
    """
    paths = []
    for report in reports:
        protocol_json = ProtocolConfig.model_validate(report.config).canonical_json() if report.config else ""
        run_dir = Path(output_dir) / report_dirname(report, protocol_json)
        paths.append(save_to_json(report.to_dict(), "report.json", run_dir))
        save_to_json({"wall_clock": report.wall_clock}, "timing.json", run_dir)
        logger.info("Report saved to %s", paths[-1])
    return paths


def load_reports(directory: Union[str, Path]) -> list[RunReport]:
    """Load every ``report.json`` below a directory, in sorted path order."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"Report directory not found: {root}")
    reports = []
    for path in sorted(root.rglob("report.json")):
        timing = path.with_name("timing.json")
        wall_clock = float(load_json(timing)["wall_clock"]) if timing.is_file() else 0.0
        reports.append(RunReport.from_dict(load_json(path), wall_clock))
    return reports


def _cell_protocol(protocol: ProtocolConfig, value: Any) -> tuple[ProtocolConfig, dict[str, Any]]:
    axis = protocol.sweep.axis
    if axis == "validation_size":
        if not isinstance(value, int) or isinstance(value, bool):
            raise ValueError(f"validation_size sweep expects integers, got {value!r}")
        data = protocol.data.model_copy(update={"validation_size": value})
        return protocol.model_copy(update={"data": data}), {"validation_size": value}
    if axis == "noise_ratio":
        if isinstance(value, (tuple, list)) or not 0.0 <= float(value) <= 1.0:
            raise ValueError(f"noise_ratio sweep expects values in [0, 1], got {value!r}")
        noise = protocol.noise.model_copy(update={"ratio": float(value)})
        return protocol.model_copy(update={"noise": noise}), {"noise_ratio": float(value)}
    if not isinstance(value, (tuple, list)) or len(value) != 2:
        raise ValueError(f"iterations sweep expects (lower_iters, upper_iters) pairs, got {value!r}")
    lower, upper = (int(v) for v in value)
    pgs = protocol.pgs.model_copy(update={"lower_iters": lower, "upper_iters": upper})
    return protocol.model_copy(update={"pgs": pgs}), {"lower_iters": lower, "upper_iters": upper}


def sweep(protocol: ProtocolConfig, n_jobs: Optional[int] = None) -> tuple[pd.DataFrame, list[RunReport]]:
    """
    Run the protocol once per grid cell of ``protocol.sweep``.

    Returns:
        (table of mean/std per cell, validation kind, method and metric; all reports)
    """
    if protocol.sweep is None:
        raise ValueError("protocol has no sweep section")
    frames = []
    all_reports = []
    for value in protocol.sweep.grid:
        cell, labels = _cell_protocol(protocol, value)
        logger.info("Sweep cell %s", labels)
        reports = run_experiment(cell, n_jobs)
        stats = summarize(reports)
        for column, label in reversed(list(labels.items())):
            stats.insert(0, column, label)
        frames.append(stats)
        all_reports.extend(reports)
    return pd.concat(frames, ignore_index=True), all_reports


# --------------------------------------------------------------------------------------
# Hypergradient agreement instances
# --------------------------------------------------------------------------------------

GRADCHECK_TRAIN_SIZE = 12
GRADCHECK_VALIDATION_SIZE = 10
GRADCHECK_FEATURES = 3
GRADCHECK_L2 = 0.1


@dataclass(frozen=True)
class GradcheckInstance:
    spec: ModelSpec
    train: WeakDataset
    params: LabelQualityParams
    ensemble: ValidationEnsemble


def gradcheck_instance(family: str, seed: int, config: PgsConfig, hidden_units: int = 3,
                       n_classes: Optional[int] = None) -> GradcheckInstance:
    """
    A small seeded problem with (w, Q) strictly inside Λ, away from the recovery point.

    Softmax instances alternate between 2 and 3 classes unless ``n_classes`` is given.
    """
    rng = np.random.default_rng(seed)
    n, n_v, dim = GRADCHECK_TRAIN_SIZE, GRADCHECK_VALIDATION_SIZE, GRADCHECK_FEATURES
    X = rng.normal(size=(n + n_v, dim))

    if family == "linear_regression":
        task = TaskKind.regression()
        labels = X @ rng.normal(size=dim) + 0.3 * rng.normal(size=n + n_v)
    else:
        k = n_classes or (2 + seed % 2 if family == "softmax_regression" else 2)
        task = TaskKind.classification(k)
        labels = np.argmax(X @ rng.normal(size=(dim, k)) + rng.gumbel(size=(n + n_v, k)), axis=1)

    spec = ModelSpec.for_task(
        family, task, dim,
        hidden_units=hidden_units if family == "two_layer_mlp" else None,
        l2_reg=GRADCHECK_L2,
    )
    train_set = WeakDataset(X[:n], labels[:n], task)
    validation = WeakDataset(X[n:], labels[n:], task)
    ensemble = make_ensemble(validation, 3, seed)
    _, ensemble = compute_baseline(spec, train_set, ensemble, config)

    w = rng.uniform(0.3, 1.0, size=n)
    if task.is_classification:
        Q = 0.6 * identity_params(train_set).Q + 0.4 * rng.dirichlet(np.ones(task.n_classes), size=n)
    else:
        Q = rng.normal(0.0, 0.3, size=n)
    return GradcheckInstance(spec, train_set, LabelQualityParams(w, Q, np.zeros(n, dtype=bool)), ensemble)
