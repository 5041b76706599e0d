from __future__ import annotations

from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.errors import ConfigError
from core.enums import (
    BaselineKind,
    CompressionPrior,
    DMCVariant,
    PositionScheme,
    RetrofitPhase,
    ScheduleMode,
)


class DTOBase(BaseModel):
    model_config = ConfigDict(
        populate_by_name=True,
        extra="ignore",
    )


class ConfigBase(BaseModel):
    """Experiment configuration blocks: unknown keys are errors."""

    model_config = ConfigDict(
        populate_by_name=True,
        extra="forbid",
        validate_assignment=True,
        protected_namespaces=(),
    )


def _parse_enum(enum_cls, v):
    if v is None or isinstance(v, enum_cls):
        return v
    try:
        return enum_cls.from_any(v)
    except ValueError as e:
        raise ConfigError(str(e)) from e


# ---------------------------------------------------------------------------
# Configuration blocks
# ---------------------------------------------------------------------------


class ModelConfig(ConfigBase):
    """Host transformer dimensions plus the flags that select its attention behaviour."""

    n_layers: int = Field(default=4, ge=1)
    n_heads: int = Field(default=4, ge=1)
    d_model: int = Field(default=128, ge=1)
    vocab_size: int = Field(default=256, ge=2)
    max_seq: int = Field(default=256)
    ffn_mult: int = Field(default=4, ge=1)
    position_scheme: PositionScheme = PositionScheme.ABSOLUTE_LEARNED
    rope_base: float = Field(default=10000.0, gt=0)
    norm_eps: float = Field(default=1e-5, gt=0)
    init_std: float = Field(default=0.02, gt=0)
    dmc_enabled: bool = False
    # dimension 0 of q/k ignored by attention; implied by dmc_enabled
    exclude_dim0: bool = False
    gqa_groups: int = Field(default=1, ge=1)
    decision_offset: float = 5.0
    dmc_variant: DMCVariant = DMCVariant.DMC

    @field_validator("position_scheme", mode="before")
    @classmethod
    def _scheme(cls, v):
        return _parse_enum(PositionScheme, v)

    @field_validator("dmc_variant", mode="before")
    @classmethod
    def _variant(cls, v):
        return _parse_enum(DMCVariant, v)

    @model_validator(mode="after")
    def _check_dimensions(self) -> ModelConfig:
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.max_seq < 1:
            raise ConfigError("max_seq must be at least 1")
        if self.n_heads % self.gqa_groups:
            raise ConfigError(
                f"n_heads={self.n_heads} is not divisible by gqa_groups={self.gqa_groups}"
            )
        if self.dmc_enabled:
            if self.head_dim < 2:
                raise ConfigError("DMC repurposes dimension 0, so head_dim must be >= 2")
            if self.gqa_groups > 1:
                raise ConfigError("DMC and GQA key/value sharing cannot be combined")
        if self.position_scheme is PositionScheme.ROTARY_PRE_CACHE and self.head_dim < 3:
            raise ConfigError("rotary positions need head_dim >= 3")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_kv_heads(self) -> int:
        return self.n_heads // self.gqa_groups

    @property
    def ffn_dim(self) -> int:
        return self.ffn_mult * self.d_model

    @property
    def attends_without_dim0(self) -> bool:
        return self.dmc_enabled or self.exclude_dim0


class GumbelParams(ConfigBase):
    tau: float = Field(default=0.1, gt=0)
    c: float = 5.0
    rng_seed: int = 0


class CRSchedule(ConfigBase):
    start_cr: float = Field(default=1.0, ge=1.0)
    target_cr: float = Field(default=2.0, ge=1.0)
    ramp_steps: int = Field(default=2000, ge=0)
    solidify_steps: int = Field(default=500, ge=0)
    mode: ScheduleMode = ScheduleMode.LINEAR_RAMP
    final_lr_fraction: float = Field(default=0.1, gt=0, le=1)

    @field_validator("mode", mode="before")
    @classmethod
    def _mode(cls, v):
        return _parse_enum(ScheduleMode, v)

    @model_validator(mode="after")
    def _check_order(self) -> CRSchedule:
        if self.target_cr < self.start_cr:
            raise ConfigError("target_cr must not be below start_cr")
        return self

    @property
    def total_steps(self) -> int:
        return self.ramp_steps + self.solidify_steps


class DMCConfig(ConfigBase):
    gumbel: GumbelParams = Field(default_factory=GumbelParams)
    schedule: CRSchedule = Field(default_factory=CRSchedule)
    # None trains with the exact recurrence
    window: int | None = Field(default=12, ge=1)
    variant: DMCVariant = DMCVariant.DMC
    prior: CompressionPrior = CompressionPrior.GLOBAL
    adaptation_steps: int = Field(default=100, ge=0)
    spike_guard: float = Field(default=2.0, gt=1.0)
    inference_window_cap: bool = False

    @field_validator("variant", mode="before")
    @classmethod
    def _variant(cls, v):
        return _parse_enum(DMCVariant, v)

    @field_validator("prior", mode="before")
    @classmethod
    def _prior(cls, v):
        return _parse_enum(CompressionPrior, v)


class OptimizerConfig(ConfigBase):
    lr: float = Field(default=3e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.95, ge=0, lt=1)
    eps: float = Field(default=1e-5, gt=0)
    weight_decay: float = Field(default=0.1, ge=0)
    grad_clip: float | None = Field(default=1.0, gt=0)


class DataConfig(ConfigBase):
    # None falls back to Settings.corpus_path
    corpus_path: Path | None = None
    train_fraction: float = Field(default=0.9, gt=0, lt=1)
    batch_size: int = Field(default=16, ge=1)
    seq_len: int = Field(default=256, ge=2)
    eval_batches: int = Field(default=8, ge=1)


class BaselineConfig(ConfigBase):
    kind: BaselineKind = BaselineKind.NONE
    gqa_groups: int = Field(default=2, ge=1)
    # None means "same as the target CR"
    pool_width: int | None = Field(default=None, ge=1)
    eviction_cr: float = Field(default=2.0, ge=1.0)

    @field_validator("kind", mode="before")
    @classmethod
    def _kind(cls, v):
        return _parse_enum(BaselineKind, v)


class RunConfig(ConfigBase):
    name: str = "toy"
    seed: int = 0
    dtype: Literal["float32", "float64"] = "float32"
    pretrain_steps: int = Field(default=2000, ge=0)
    log_every: int = Field(default=50, ge=1)
    eval_every: int = Field(default=250, ge=1)
    out_dir: Path | None = None


class ExperimentConfig(BaseSettings):
    """
    Everything one experiment needs.

    Sources (highest precedence first):
      1. Keyword arguments (the loader passes TOML contents merged with CLI overrides)
      2. Environment variables (DMC_EXP__<SECTION>__<KEY>, e.g. DMC_EXP__RUN__SEED)
      3. Defaults below
    """

    model_config = SettingsConfigDict(
        env_prefix="DMC_EXP__",
        env_nested_delimiter="__",
        extra="forbid",
        protected_namespaces=(),
    )

    model: ModelConfig = Field(default_factory=ModelConfig)
    dmc: DMCConfig = Field(default_factory=DMCConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    run: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _check_consistency(self) -> ExperimentConfig:
        if self.data.seq_len > self.model.max_seq:
            raise ConfigError(
                f"data.seq_len={self.data.seq_len} exceeds model.max_seq={self.model.max_seq}"
            )
        if self.baseline.kind is BaselineKind.GQA and self.model.n_heads % self.baseline.gqa_groups:
            raise ConfigError("baseline.gqa_groups must divide model.n_heads")
        if self.baseline.kind is BaselineKind.FIXED_POOL and self.dmc.variant is not DMCVariant.DMC:
            raise ConfigError("fixed pooling replaces the learned decisions; use variant 'dmc'")
        return self


class GQAConfig(ConfigBase):
    group_size: int = Field(ge=1)


class PoolingConfig(ConfigBase):
    pool_width: int = Field(ge=1)


# ---------------------------------------------------------------------------
# Records and reports
# ---------------------------------------------------------------------------


class MetricsRecord(DTOBase):
    kind: Literal["metrics", "warning", "checkpoint", "eval"] = "metrics"
    phase: RetrofitPhase
    step: int
    lm_loss: float | None = None
    cr_loss: float | None = None
    head_loss: float | None = None
    target_cr: float | None = None
    achieved_cr: float | None = None
    achieved_cr_per_layer: list[float] | None = None
    lr_mult: float | None = None
    val_loss: float | None = None
    message: str | None = None
    path: str | None = None


class DecisionRecord(DTOBase):
    layer: int
    head: int
    t: int
    alpha: int
    omega: float


class ArrayEntry(DTOBase):
    name: str
    shape: list[int]
    offset: int
    nbytes: int


class CheckpointManifest(DTOBase):
    format_version: int
    model: ModelConfig
    phase: RetrofitPhase = RetrofitPhase.PRETRAIN
    step: int = 0
    target_cr: float = 1.0
    achieved_cr: float | None = None
    val_loss: float | None = None
    seed: int = 0
    rng_state: dict | None = None
    baseline: BaselineKind = BaselineKind.NONE
    # fixed-pool checkpoints remember their pooling width
    pool_width: int | None = None
    arrays: list[ArrayEntry] = Field(default_factory=list)
    payload_bytes: int = 0
    payload_crc32: int = 0


class HeadMemory(DTOBase):
    sequence: int = 0
    layer: int
    head: int
    logical: int
    pages: int
    allocated_slots: int
    overhead: float
    n_seen: int


class MemoryReport(DTOBase):
    page_size: int
    heads: list[HeadMemory]
    total_logical: int
    total_allocated_slots: int
    total_pages: int
    vanilla_equivalent: int
    overhead: float
    pool_pages: int
    free_pages: int

    @property
    def compression_ratio(self) -> float:
        return self.vanilla_equivalent / self.total_logical if self.total_logical else 1.0


class BenchRun(DTOBase):
    method: str
    tokens_per_second: float
    peak_kv_slots: int
    peak_kv_elements: int
    vanilla_kv_slots: int
    measured_cr: float
    memory: MemoryReport | None = None


class BenchRecord(DTOBase):
    batch: int
    prompt_len: int
    gen_len: int
    runs: list[BenchRun]


class SegmentationEntry(DTOBase):
    layer: int
    head: int
    segment_ids: list[int]
    rendered: str


class AnalysisReport(DTOBase):
    n_layers: int
    n_heads: int
    cr_matrix: list[list[float]]
    global_cr: float
    cr_vs_length: list[tuple[int, float]]
    alpha_vs_position: list[float]
    segmentation: list[SegmentationEntry]
