# peftlab/config.py
"""
Configuration Management with Validation
========================================
Two layers of configuration:

- ``Settings``: process-wide settings read from the environment and ``.env``
  (plugin directory, dataset registry, logging, bench parallelism, PSCP
  defaults).
- ``ExperimentConfig``: one YAML run description (model, method, dataset,
  train, eval, output_dir). Every section rejects unknown keys.

Features:
- Pydantic validators for all critical settings
- Nested configuration classes for logical grouping
- Validation errors surfaced as ConfigError with the offending key path
- Environment variable override
"""
from pathlib import Path
from typing import Any, List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import (
    AliasChoices,
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)
from pydantic_settings import BaseSettings

from peftlab.core.errors import ConfigError
from peftlab.core.metrics import PSCPConstants
from peftlab.core.model import REFERENCE_SPEC, ModelSpec
from peftlab.core.report_utils import fingerprint

load_dotenv()

PACKAGE_DIR = Path(__file__).resolve().parent
BUNDLED_DATASETS_FILE = PACKAGE_DIR / "datasets.json"


class PSCPSettings(BaseSettings):
    """Default PSCP reference constants and importance exponents."""

    cp: float = Field(default=1000.0, description="Reference trainable-parameter count", gt=0)
    cf: float = Field(default=0.01, description="Reference inference seconds per example", gt=0)
    cm: float = Field(default=1e8, description="Reference peak memory in bytes", gt=0)
    bp: float = Field(default=1.0, description="Parameter-count importance", ge=0)
    bf: float = Field(default=1.0, description="Inference-time importance", ge=0)
    bm: float = Field(default=1.0, description="Peak-memory importance", ge=0)

    model_config = {"extra": "allow", "env_prefix": "PSCP_"}


class Settings(BaseSettings):
    """
    Process configuration.

    ``peft_dir`` left unset means the default ``./peft`` directory, which may
    be absent; an explicit value must name a readable directory.
    """

    app_name: str = Field(default="PEFT Lab", description="Application name")

    app_version: str = Field(default="1.0.0", description="Application version")

    debug: bool = Field(default=False, description="Log per-block timings at DEBUG")

    peft_dir: Optional[str] = Field(
        default=None,
        description="Plugin method directory (PEFT_DIR)",
    )

    datasets_file: Optional[str] = Field(
        default=None,
        description="Dataset registry JSON replacing the bundled one",
        validation_alias=AliasChoices("PF_DATASETS_FILE", "datasets_file"),
    )

    log_level: str = Field(default="INFO", description="Console log level")

    log_dir: Optional[str] = Field(default=None, description="Directory for timestamped log files")

    bench_workers: int = Field(default=1, description="Concurrent bench runs", ge=1, le=32)

    pscp: PSCPSettings = Field(default_factory=PSCPSettings, description="PSCP defaults")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level

    @property
    def default_peft_dir(self) -> Path:
        return Path("./peft")

    @property
    def resolved_datasets_file(self) -> Path:
        return Path(self.datasets_file) if self.datasets_file else BUNDLED_DATASETS_FILE

    model_config = {
        "extra": "allow",
        "env_file": ".env",
        "env_file_encoding": "utf-8",
        "case_sensitive": False,
        "populate_by_name": True,
    }


def get_settings() -> Settings:
    """Fresh settings reflecting the current environment."""
    return Settings()


# ============================================================================
# EXPERIMENT CONFIG
# ============================================================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MethodSection(_Section):
    peft_type: str = Field(min_length=1)
    hyperparameters: dict[str, Any] = Field(default_factory=dict)


class DatasetSection(_Section):
    name: str = Field(min_length=1)
    eval_splits: List[str] = Field(default_factory=lambda: ["test"], min_length=1)


class TrainSection(_Section):
    steps: Optional[int] = Field(default=None, ge=1)
    epochs: Optional[int] = Field(default=None, ge=1)
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=5e-3, gt=0)
    schedule: Literal["constant", "linear_warmup"] = "constant"
    warmup_steps: int = Field(default=0, ge=0)
    seed: int
    optimizer: Literal["adamw", "sgd"] = "adamw"
    weight_decay: float = Field(default=0.0, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    log_every: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def exactly_one_budget(self):
        if (self.steps is None) == (self.epochs is None):
            raise ValueError("exactly one of steps or epochs must be set")
        return self


class PretrainSection(_Section):
    """
    Full-parameter warm start of the base model before a method is attached.

    ``max_offset`` prepends up to that many filler tokens (words absent from
    the pretraining examples) so the base tolerates leading positions it has
    not seen, as soft prompts introduce.
    """

    datasets: List[str] = Field(min_length=1)
    steps: int = Field(ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=5e-3, gt=0)
    warmup_steps: int = Field(default=0, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)
    max_offset: int = Field(default=0, ge=0)

    def as_train(self, seed: int) -> TrainSection:
        return TrainSection(
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            schedule="linear_warmup",
            warmup_steps=self.warmup_steps,
            seed=seed,
            weight_decay=self.weight_decay,
        )


class EvalSection(_Section):
    max_new_tokens: int = Field(default=4, ge=1)
    compute_classification_metrics: bool = True
    compute_token_accuracy: bool = True
    compute_pscp: bool = False
    pscp_cp: Optional[float] = None
    pscp_cf: Optional[float] = None
    pscp_cm: Optional[float] = None
    pscp_bp: Optional[float] = None
    pscp_bf: Optional[float] = None
    pscp_bm: Optional[float] = None

    def pscp_constants(self, defaults: Optional[PSCPSettings] = None) -> PSCPConstants:
        """Config values over environment defaults; validated."""
        defaults = defaults or PSCPSettings()
        constants = PSCPConstants(
            c_p=self.pscp_cp if self.pscp_cp is not None else defaults.cp,
            c_f=self.pscp_cf if self.pscp_cf is not None else defaults.cf,
            c_m=self.pscp_cm if self.pscp_cm is not None else defaults.cm,
            b_p=self.pscp_bp if self.pscp_bp is not None else defaults.bp,
            b_f=self.pscp_bf if self.pscp_bf is not None else defaults.bf,
            b_m=self.pscp_bm if self.pscp_bm is not None else defaults.bm,
        )
        constants.check()
        return constants


class ExperimentConfig(_Section):
    model: Union[Literal["reference"], ModelSpec] = "reference"
    method: MethodSection
    dataset: DatasetSection
    train: TrainSection
    pretrain: Optional[PretrainSection] = None
    eval: EvalSection = Field(default_factory=EvalSection)
    output_dir: str = "runs/default"

    def model_spec(self) -> ModelSpec:
        spec = REFERENCE_SPEC if self.model == "reference" else self.model
        spec.check()
        return spec

    def fingerprint(self) -> str:
        """Stable under key reordering of the source YAML."""
        return fingerprint(self.model_dump(mode="json"))

    def base_fingerprint(self) -> str:
        """Identity of the frozen base: spec, seed and warm-start recipe."""
        return fingerprint({
            "model": self.model_spec().model_dump(mode="json"),
            "seed": self.train.seed,
            "pretrain": self.pretrain.model_dump(mode="json") if self.pretrain else None,
        })


def format_validation_error(exc: ValidationError) -> str:
    problems = []
    for error in exc.errors():
        path = ".".join(str(p) for p in error["loc"]) or "<root>"
        if error["type"] == "extra_forbidden":
            problems.append(f"unknown key '{path}'")
        else:
            problems.append(f"{path}: {error['msg']}")
    return "; ".join(problems)


def build_experiment(raw: Any, source: str = "<config>") -> ExperimentConfig:
    """
    Validate a raw mapping into an ExperimentConfig.

    Raises:
        ConfigError: not a mapping, unknown keys, or invalid values
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{source}: {format_validation_error(e)}") from e
    config.model_spec()
    return config


def load_experiment(path: Union[str, Path]) -> ExperimentConfig:
    """
    Read and validate an experiment YAML file.

    Raises:
        ConfigError: unreadable file, YAML syntax error or invalid config
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return build_experiment(raw, source=str(path))
