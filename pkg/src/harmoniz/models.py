from __future__ import annotations

import logging
import math
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Annotated, Literal

from pydantic import AllowInfNan, BaseModel, ConfigDict, Field, model_validator

from harmoniz.diffusion_core import NoiseSchedule, Sampler, make_schedule
from harmoniz.errors import ParameterError

log = logging.getLogger(__name__)

MAX_SWEEP_RUNS = 500
T_AUG_GUIDANCE = 0.2  # noise injection should stay below this fraction of T
T_REF_RATIO = 0.08


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------
class ScheduleConfig(StrictModel):
    """Linear beta schedule parameters."""

    T: int = Field(default=100, ge=2)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end)


class CodecConfig(StrictModel):
    kind: Literal["identity", "space_to_depth"] = "identity"
    factor: int = 1

    @model_validator(mode="after")
    def _factor_matches_kind(self) -> CodecConfig:
        if self.kind == "identity" and self.factor != 1:
            raise ValueError("identity codec has factor 1")
        if self.kind == "space_to_depth" and self.factor not in (2, 4, 8):
            raise ValueError("space_to_depth factor must be 2, 4 or 8")
        return self


class LossWeights(StrictModel):
    """Weights of the total objective and of the stability sub-terms."""

    omega_sty: float = Field(default=1e7, ge=0)
    omega_c: float = Field(default=1e1, ge=0)
    omega_sta: float = Field(default=1.0, ge=0)
    lambda_his: float = Field(default=1.0, ge=0)
    lambda_tv: float = Field(default=1.0, ge=0)


class OptimizerConfig(StrictModel):
    kind: Literal["lbfgs", "adam"] = "lbfgs"
    history_size: int = Field(default=10, ge=1)
    max_iter: int = Field(default=20, ge=1)
    max_eval: int = Field(default=20, ge=1)
    lr: float = Field(default=1.0, gt=0)
    line_search: Literal["strong_wolfe"] | None = "strong_wolfe"
    adam_lr: float = Field(default=0.05, gt=0)


class RefinementConfig(StrictModel):
    enabled: bool = True
    margin_ratio: float = Field(default=0.15, ge=0)
    t_ref: int | None = Field(default=None, ge=0)  # None: floor(0.08·T)

    def resolve_t_ref(self, T: int) -> int:
        t_ref = math.floor(T_REF_RATIO * T) if self.t_ref is None else self.t_ref
        if t_ref > T:
            raise ParameterError(f"t_ref {t_ref} exceeds T = {T}")
        return t_ref


class HarmonizeConfig(StrictModel):
    """Every hyperparameter of one harmonization run."""

    weights: LossWeights = Field(default_factory=LossWeights)
    t_aug: int | None = Field(default=None, ge=1)  # None: floor(0.2·T)
    inner_rounds: int = Field(default=5, ge=1)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    sampler: Sampler = Sampler.ANCESTRAL
    seed: int = 0
    refinement: RefinementConfig = Field(default_factory=RefinementConfig)
    prompt: str = ""
    style_source: Literal["output", "multiscale"] = "output"
    gram_normalize: bool = True
    content_target: Literal["foreground", "background"] = "foreground"
    loss_region: Literal["full", "mask"] = "full"
    keep_snapshots: bool = False
    background_branch: Literal["composite", "isolated"] = "composite"
    background_estimate: Literal["composite", "branchwise"] = "composite"
    dtype: Literal["float32", "float64"] = "float32"

    def resolve_t_aug(self, T: int) -> int:
        guidance = math.floor(T_AUG_GUIDANCE * T)
        t_aug = max(1, guidance) if self.t_aug is None else self.t_aug
        if not 1 <= t_aug <= T:
            raise ParameterError(f"t_aug {t_aug} outside [1, {T}]")
        if t_aug > guidance:
            log.warning(
                "t_aug = %d exceeds %.0f%% of T (%d); the foreground structure may be lost",
                t_aug, 100 * T_AUG_GUIDANCE, guidance,
            )
        return t_aug

    def literal_objective(self) -> HarmonizeConfig:
        """Unnormalized Gram and the clean background as content target."""
        return self.model_copy(
            update={"gram_normalize": False, "content_target": "background"}
        )


# ---------------------------------------------------------------------------
# Run outputs
# ---------------------------------------------------------------------------
class LossReport(StrictModel):
    """One optimization round's loss terms.

    ``total`` equals the weighted sum of the raw terms.
    """

    model_config = ConfigDict(extra="forbid", allow_inf_nan=True)

    iteration: int = 0
    round: int = 0
    level: int = 0
    style: float
    content: float
    histogram: float
    tv: float
    weighted_style: float
    weighted_content: float
    weighted_stability: float
    total: float

    def to_row(self) -> dict[str, float | int]:
        return self.model_dump()


class OptimizerEvent(StrictModel):
    iteration: int
    round: int
    kind: Literal["line_search_fallback", "adam"]
    detail: str = ""


class RunRecord(StrictModel):
    """Everything needed to reproduce a harmonization run."""

    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")

    run_id: str = Field(default_factory=lambda: uuid.uuid4().hex[:12])
    run_hash: str = ""  # SHA-256 over inputs, config and backend hash
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))
    package_version: str = ""
    config: HarmonizeConfig
    codec: str = ""  # e.g. "SpaceToDepthCodec(f=4)"
    T: int
    t_aug: int
    t_ref: int
    refined: bool = False
    decisions: dict[str, str] = Field(default_factory=dict)
    loss_trace: list[LossReport] = Field(default_factory=list)
    events: list[OptimizerEvent] = Field(default_factory=list)
    timing: dict[str, float] = Field(default_factory=dict)
    hashes: dict[str, str] = Field(default_factory=dict)
    clamp_fraction: float = 0.0
    metrics: dict[str, Annotated[float, AllowInfNan(True)]] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Toy backend
# ---------------------------------------------------------------------------
SHAPES = ("disc", "square", "triangle")
STYLES = ("flat", "stripes", "grain", "gradient")


class DatasetSpec(StrictModel):
    size: int = Field(default=64, ge=8)
    num_samples: int = Field(default=2000, ge=1)
    seed: int = 0
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    shapes: tuple[str, ...] = SHAPES
    styles: tuple[str, ...] = STYLES


class ToyArchitecture(StrictModel):
    in_channels: int = Field(default=3, ge=1)
    base_width: int = Field(default=32, ge=4)
    embed_dim: int = Field(default=64, ge=2)
    attn_dim: int = Field(default=64, ge=2)
    text_seed: int = 0


class TrainConfig(StrictModel):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    architecture: ToyArchitecture = Field(default_factory=ToyArchitecture)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=2e-3, gt=0)
    prompt_dropout: float = Field(default=0.1, ge=0, le=1)
    seed: int = 0
    output_dir: Path = Path("data/snapshots")


class SnapshotMeta(StrictModel):
    content_hash: str
    architecture: ToyArchitecture
    schedule: ScheduleConfig
    dataset: DatasetSpec
    epochs: int
    loss_trace: list[float] = Field(default_factory=list)
    created_at: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


# ---------------------------------------------------------------------------
# CLI config files
# ---------------------------------------------------------------------------
class FixtureSpec(StrictModel):
    """A procedural foreground/background/mask triple."""

    shape: str = "disc"
    foreground_style: str = "flat"
    background_style: str = "stripes"
    size: int = Field(default=64, ge=8)
    seed: int = 0

    @property
    def name(self) -> str:
        return f"{self.shape}-{self.foreground_style}-on-{self.background_style}-{self.seed}"


class RunConfigFile(HarmonizeConfig):
    """A ``harmonize`` config: hyperparameters plus input/output paths."""

    foreground: Path
    background: Path
    mask: Path
    backend: Path
    output_dir: Path
    codec: CodecConfig = Field(default_factory=CodecConfig)

    def harmonize_config(self) -> HarmonizeConfig:
        return HarmonizeConfig.model_validate(
            self.model_dump(include=set(HarmonizeConfig.model_fields))
        )


SweepAxis = Literal["t_aug_ratio", "omega_sty", "omega_c", "omega_sta", "prompt"]


class SweepSpec(StrictModel):
    axis: SweepAxis
    values: list[float | str] = Field(min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    fixtures: list[FixtureSpec] = Field(default_factory=lambda: [FixtureSpec()], min_length=1)
    backend: Path
    output_dir: Path
    base: HarmonizeConfig = Field(default_factory=HarmonizeConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)

    @model_validator(mode="after")
    def _check_grid(self) -> SweepSpec:
        if self.axis == "prompt":
            if not all(isinstance(v, str) for v in self.values):
                raise ValueError("prompt axis values must be strings")
        elif not all(isinstance(v, (int, float)) for v in self.values):
            raise ValueError(f"{self.axis} axis values must be numbers")
        elif self.axis == "t_aug_ratio":
            bad = [v for v in self.values if not 0 < v <= 1]
            if bad:
                raise ValueError(f"t_aug_ratio values must lie in (0, 1], got {bad}")
        else:
            bad = [v for v in self.values if not (math.isfinite(v) and v >= 0)]
            if bad:
                raise ValueError(f"{self.axis} values must be finite and >= 0, got {bad}")
        if self.num_runs > MAX_SWEEP_RUNS:
            raise ValueError(f"sweep has {self.num_runs} runs, cap is {MAX_SWEEP_RUNS}")
        return self

    @property
    def num_runs(self) -> int:
        return len(self.values) * len(self.seeds) * len(self.fixtures)
