"""Run configuration file for mutadetect.

A run config is a JSON document validated by the models below. Unknown keys
are rejected and every document carries `format_version`.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from mutadetect.errors import ConfigError
from mutadetect.utils.pylogger import get_python_logger

logger = get_python_logger()

FORMAT_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsConfig(_Strict):
    """Input and output locations."""

    corpus: Optional[str] = Field(
        default=None, description="CSV (id,time_index,sequence) or FASTA corpus"
    )
    corpus_format: Literal["csv", "fasta"] = "csv"
    embedding_table: Optional[str] = Field(
        default=None, description="TSV trigram table; fallback vectors when absent"
    )
    allow_fallback_embeddings: bool = Field(
        default=True,
        description="Use seeded fallback vectors for trigrams missing from the table",
    )
    output_dir: Optional[str] = None


class SplitSpec(_Strict):
    """Per-window train/validation/test protocol."""

    train_fraction: float = Field(default=0.8, gt=0, lt=1)
    val_fraction_of_train: float = Field(default=0.1, gt=0, lt=1)
    per_cohort_cap: int = Field(default=1000, gt=0)
    ordering: Literal["corpus-first"] = "corpus-first"


class DatasetConfig(_Strict):
    """Preprocessing parameters."""

    time_unit: Literal["year", "month"] = "year"
    expected_length: Optional[int] = Field(default=None, gt=0)
    k: int = Field(default=3, ge=1, description="k-means clusters per cohort")
    kmeans_restarts: int = Field(default=10, ge=1)
    kmeans_max_iter: int = Field(default=100, ge=1)
    draws: int = Field(default=50, ge=1, description="Samples drawn per chain")
    positions: Optional[List[int]] = Field(
        default=None,
        description="0-based epitope positions; all positions with trigram context when null",
    )
    split: SplitSpec = Field(default_factory=SplitSpec)

    @model_validator(mode="after")
    def _positions_unique(self) -> "DatasetConfig":
        if self.positions is not None:
            if not self.positions:
                raise ValueError("positions must not be empty")
            if len(set(self.positions)) != len(self.positions):
                raise ValueError("positions must be unique")
            if min(self.positions) < 0:
                raise ValueError("positions must be non-negative")
        return self


class EmbeddingConfig(_Strict):
    """Trigram embedding parameters."""

    dim: int = Field(default=100, gt=0, description="Fallback vector dimension")
    fallback_seed: int = Field(default=0, ge=0, lt=2**64)


class LossConfig(_Strict):
    """Objective parameters (c, eta, lambda, clamp epsilon)."""

    mode: Literal["hsc", "deepsad"] = "hsc"
    center: Optional[List[float]] = Field(
        default=None, description="Hypersphere center c (deepsad); set before training"
    )
    eta: float = Field(default=1.0, gt=0)
    weight_decay: float = Field(default=1e-6, ge=0, description="lambda")
    clamp_eps: float = Field(default=1e-6, gt=0, le=1e-2)


class TrainConfig(_Strict):
    """Model and optimisation hyperparameters."""

    encoder: Literal["lstm_attention", "transformer"] = "lstm_attention"
    batch_size: int = Field(default=256, gt=0)
    lr: float = Field(default=0.001, ge=0)
    epochs: int = Field(default=50, gt=0)
    hidden: int = Field(default=128, gt=0)
    attention_size: int = Field(default=64, gt=0)
    out_dim: int = Field(default=32, gt=0)
    d_k: int = Field(default=64, gt=0)
    ffn_hidden: int = Field(default=128, gt=0)
    dropout: float = Field(default=0.5, ge=0, lt=1)
    T: int = Field(default=5, ge=2, description="Window length (inputs per sample)")
    T_sweep: Optional[List[int]] = Field(
        default=None, description="Window lengths run by `sweep`; defaults to [T]"
    )
    trials: int = Field(default=5, gt=0)
    record_test_curve: bool = True
    loss: LossConfig = Field(default_factory=LossConfig)

    @model_validator(mode="after")
    def _check_sweep(self) -> "TrainConfig":
        if self.T_sweep is not None:
            if not self.T_sweep:
                raise ValueError("T_sweep must not be empty")
            if len(set(self.T_sweep)) != len(self.T_sweep):
                raise ValueError("T_sweep values must be unique")
            if min(self.T_sweep) < 2:
                raise ValueError("T_sweep values must be at least 2")
        return self

    def window_lengths(self) -> List[int]:
        return list(self.T_sweep) if self.T_sweep is not None else [self.T]


class RunConfig(_Strict):
    """Complete, versioned run configuration."""

    format_version: Literal[1] = FORMAT_VERSION
    seed: int = Field(default=0, ge=0, lt=2**64)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    embedding: EmbeddingConfig = Field(default_factory=EmbeddingConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)


def _validate(data: Dict[str, Any], source: str) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(
            f"invalid run config {source}: {problems}",
            hint="See README.md for the run config schema",
        ) from e


def load_run_config(path: str | Path) -> RunConfig:
    """Read and validate a run config file.

    Raises:
        ConfigError: If the file is missing, not JSON, or fails validation.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must contain a JSON object")
    return _validate(data, str(path))


def dump_run_config(config: RunConfig) -> str:
    """Serialise a run config to canonical JSON text."""
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def apply_overrides(
    config: RunConfig,
    *,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    trials: Optional[int] = None,
    T: Optional[int] = None,
    T_sweep: Optional[List[int]] = None,
    loss: Optional[str] = None,
    embedding_table: Optional[str] = None,
    embedding_dim: Optional[int] = None,
) -> RunConfig:
    """Merge command-line flags into a config and re-validate the result."""
    data = config.model_dump(mode="json")
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["paths"]["output_dir"] = out
    if trials is not None:
        data["train"]["trials"] = trials
    if T is not None:
        data["train"]["T"] = T
    if T_sweep is not None:
        data["train"]["T_sweep"] = T_sweep
    if loss is not None:
        data["train"]["loss"]["mode"] = loss
    if embedding_table is not None:
        data["paths"]["embedding_table"] = embedding_table
    if embedding_dim is not None:
        data["embedding"]["dim"] = embedding_dim
    merged = _validate(data, "after command-line overrides")
    logger.debug("Run config resolved", seed=merged.seed, T=merged.train.T)
    return merged
