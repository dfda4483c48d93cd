"""
Configuration for the PGS toolkit.

Process-level settings come from ``PGS_*`` environment variables (and ``.env``); experiment
protocols are JSON documents validated by the pydantic models below.
"""
import json
from pathlib import Path
from typing import Any, Literal, Optional, Union

from dotenv import load_dotenv
try:
    from pydantic_settings import BaseSettings, SettingsConfigDict  # type: ignore[import]
except ImportError:  # pragma: no cover
    from pydantic import BaseSettings  # type: ignore[attr-defined,no-redef]
    SettingsConfigDict = dict  # type: ignore[misc,assignment]
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .core import ModelFamily, PgsConfig

load_dotenv()


class Settings(BaseSettings):  # type: ignore[misc]
    """Application settings loaded from environment variables."""

    model_config = SettingsConfigDict(
        env_prefix="PGS_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    log_level: str = Field(default="INFO")
    output_dir: str = Field(default="data/runs")
    n_jobs: int = Field(default=0, ge=0, description="0 means one worker per logical core")
    unsafe_exit_code: int = Field(default=2, ge=0, description="0 disables the unsafe exit status")
    gradcheck_tolerance: float = Field(default=1e-3, ge=0.0)
    fd_max_coordinates: int = Field(default=256, ge=1)
    fd_step: float = Field(default=1e-5, gt=0.0)


# Global settings instance
settings = Settings()


METHODS = ("baseline", "validation_only", "pgs_convex", "pgs_nonconvex")


class DataConfig(BaseModel):
    """Where the data comes from and how it is split."""

    model_config = ConfigDict(frozen=True)

    source: Literal["gaussian", "linear", "csv", "idx"] = "gaussian"
    n_samples: int = Field(default=1000, ge=4)
    n_features: int = Field(default=10, ge=1)
    n_classes: int = Field(default=2, ge=2)
    separation: float = Field(default=1.5, gt=0.0, description="Gaussian mixture: distance scale between centers")
    regression_noise: float = Field(default=0.0, ge=0.0, description="Linear generator: clean label noise std")
    csv_path: Optional[str] = None
    label_column: str = "label"
    labeled_column: Optional[str] = None
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None
    max_samples: Optional[int] = Field(default=None, ge=4)
    split: tuple[float, float, float, float] = (0.7, 0.1, 0.1, 0.1)
    validation_size: Optional[int] = Field(default=None, ge=1, description="Overrides the validation share")
    normalize: Optional[bool] = Field(default=None, description="None: min-max scale regression data only")

    @model_validator(mode="after")
    def _check_split(self) -> "DataConfig":
        if any(s <= 0 for s in self.split):
            raise ValueError("split shares must be positive")
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv source needs csv_path")
        if self.source == "idx" and not (self.idx_images and self.idx_labels):
            raise ValueError("idx source needs idx_images and idx_labels")
        return self


class NoiseConfig(BaseModel):
    """Weak-supervision protocol applied to the training split."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "uniform_flip", "gauss", "ssl"] = "uniform_flip"
    ratio: float = Field(default=0.5, ge=0.0, le=1.0, description="Flip ratio or share of gauss-corrupted labels")
    sigma: float = Field(default=0.3, ge=0.0)
    labeled_fraction: float = Field(default=0.4, gt=0.0, le=1.0)


class ModelConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: ModelFamily = ModelFamily.SOFTMAX_REGRESSION
    hidden_units: Optional[int] = Field(default=None, ge=1)
    l2_reg: Optional[float] = Field(default=None, ge=0.0)
    fit_intercept: bool = True


class RegionConfig(BaseModel):
    """None fields fall back to FeasibleRegion.default_for."""

    model_config = ConfigDict(frozen=True)

    eps1: Optional[float] = Field(default=None, ge=0.0)
    eps2: Optional[float] = Field(default=None, ge=0.0)


class ValidationBiasConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    group_split: Optional[int] = Field(default=None, ge=1, description="Classes below this form group 0; None = k//2")
    ratio: tuple[float, float] = (1.0, 3.0)


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    axis: Literal["validation_size", "iterations", "noise_ratio"]
    grid: list[Union[int, float, tuple[int, int]]] = Field(min_length=1)


class ProtocolConfig(BaseModel):
    """A complete, replayable experiment description."""

    model_config = ConfigDict(frozen=True)

    name: str = "experiment"
    task: Literal["classification", "regression"] = "classification"
    data: DataConfig = DataConfig()
    noise: NoiseConfig = NoiseConfig()
    model: ModelConfig = ModelConfig()
    pgs: PgsConfig = PgsConfig()
    region: RegionConfig = RegionConfig()
    methods: list[str] = Field(default_factory=lambda: ["baseline", "validation_only", "pgs_convex"])
    seeds: list[int] = Field(default_factory=lambda: [0])
    ensemble_size: int = Field(default=3, ge=1)
    validation_kinds: list[Literal["unbiased", "biased"]] = Field(default_factory=lambda: ["unbiased"])
    validation_bias: ValidationBiasConfig = ValidationBiasConfig()
    sweep: Optional[SweepConfig] = None

    def echo(self) -> dict[str, Any]:
        """JSON-ready dump that ``model_validate`` turns back into an identical config."""
        return self.model_dump(mode="json", by_alias=True)

    def canonical_json(self) -> str:
        return json.dumps(self.echo(), sort_keys=True, separators=(",", ":"))

    def with_seed(self, seed: int) -> "ProtocolConfig":
        return self.model_copy(update={"seeds": [int(seed)]})


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(payload: dict[str, Any], overrides: list[str]) -> dict[str, Any]:
    """
    Apply ``dotted.path=value`` overrides to a raw config dictionary.

    Args:
        payload: Raw config dictionary (modified copy is returned)
        overrides: Items such as ``pgs.lambda=2.0`` or ``methods=["baseline"]``

    Returns:
        Updated dictionary

    Raises:
        ValueError: If an override is malformed
    """
    updated = json.loads(json.dumps(payload))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"Override must look like key=value: {item}")
        path, raw = item.split("=", 1)
        keys = [k for k in path.strip().split(".") if k]
        if not keys:
            raise ValueError(f"Empty override path: {item}")
        node = updated
        for key in keys[:-1]:
            child = node.get(key)
            if not isinstance(child, dict):
                child = {}
                node[key] = child
            node = child
        node[keys[-1]] = _parse_value(raw)
    return updated


def load_protocol(
    path: Union[str, Path],
    overrides: Optional[list[str]] = None,
    seed: Optional[int] = None,
) -> ProtocolConfig:
    """
    Load and validate a protocol JSON file.

    Args:
        path: Config file path
        overrides: Dotted-path overrides
        seed: Replaces the seed list with ``[seed]``

    Returns:
        Validated ProtocolConfig

    Raises:
        FileNotFoundError: If the file does not exist
        ValueError: If the file is not valid JSON or fails validation
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise FileNotFoundError(f"Config file not found: {config_path}")
    payload = json.loads(config_path.read_text(encoding="utf-8"))
    payload = apply_overrides(payload, overrides or [])
    if seed is not None:
        payload["seeds"] = [int(seed)]
    return ProtocolConfig.model_validate(payload)
