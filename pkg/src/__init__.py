"""
PGS: safe bi-level learning from weakly supervised labels.
"""
from .config import ProtocolConfig, load_protocol, settings
from .core import (
    FeasibleRegion,
    LabelQualityParams,
    ModelFamily,
    ModelParams,
    ModelSpec,
    PgsConfig,
    RunReport,
    TaskKind,
    ValidationEnsemble,
    WeakDataset,
    identity_params,
)
from .harness import run_experiment, sweep
from .logging_config import get_logger, setup_logging
from .pgs import compute_baseline, extract_corrections, pgs_convex, pgs_nonconvex, ssl_freeze

__version__ = "0.1.0"
__all__ = [
    "FeasibleRegion",
    "LabelQualityParams",
    "ModelFamily",
    "ModelParams",
    "ModelSpec",
    "PgsConfig",
    "ProtocolConfig",
    "RunReport",
    "TaskKind",
    "ValidationEnsemble",
    "WeakDataset",
    "compute_baseline",
    "extract_corrections",
    "get_logger",
    "identity_params",
    "load_protocol",
    "pgs_convex",
    "pgs_nonconvex",
    "run_experiment",
    "settings",
    "setup_logging",
    "ssl_freeze",
    "sweep",
]
