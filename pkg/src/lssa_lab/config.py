import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from lssa_lab.errors import ConfigError

# .env overrides (LSSA_LAB_*)
load_dotenv()

# ---------------------------
# ENV
# ---------------------------
WORKERS_ENV = "LSSA_LAB_WORKERS"
OUTPUT_DIR_ENV = "LSSA_LAB_OUTPUT_DIR"
LOG_LEVEL_ENV = "LSSA_LAB_LOG_LEVEL"

PIPELINE_NAMES = (
    "pgd",
    "mifgsm",
    "sep",
    "sga_tit",
    "sga_it",
    "sga_it_sampled",
    "sga_it_shuffled",
    "sga_it_sampled_shuffled",
    "lssa",
    "lssa_global_shuffle",
)
POSITION_MODES = ("random", "top_left", "top_right", "bottom_left", "bottom_right")
ABLATION_PARAMS = ("N", "position_mode", "lam", "momentum", "eps0", "M")

R = TypeVar("R", bound=BaseModel)


def coerce(cls: Type[R], data: Any) -> R:
    """dict / model / None -> validated record, pydantic errors surface as ConfigError"""
    if isinstance(data, cls):
        return data
    try:
        return cls.model_validate(data or {})
    except ValidationError as e:
        raise ConfigError(f"invalid {cls.__name__}: {e}") from e


class Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ---------------------------
# Dataset / model records
# ---------------------------
class DatasetSpec(Record):
    num_images: int = Field(default=300, ge=1, description="total image-caption pairs")
    image_size: Tuple[int, int] = (32, 32)
    seed: int = Field(default=7, ge=0, lt=2**32)
    test_fraction: float = Field(default=1 / 3, gt=0.0, lt=1.0)


class TrainConfig(Record):
    tag: str = "conv-s0"
    arch: Literal["conv", "patch"] = "conv"
    seed: int = Field(default=0, ge=0, lt=2**32)
    epochs: int = Field(default=60, ge=0)
    batch: int = Field(default=32, ge=2)
    lr: float = Field(default=2e-3, gt=0.0)
    d: int = Field(default=64, ge=2)
    temperature: float = Field(default=0.1, gt=0.0)
    max_len: int = Field(default=12, ge=1)


def default_models() -> List[TrainConfig]:
    # source + same-architecture target + cross-architecture target
    return [
        TrainConfig(tag="conv-s0", arch="conv", seed=0),
        TrainConfig(tag="conv-s1", arch="conv", seed=1),
        TrainConfig(tag="patch-s0", arch="patch", seed=0),
    ]


# ---------------------------
# Attack records
# ---------------------------
class ShuffleConfig(Record):
    N: int = Field(default=20, ge=0, description="shuffled copies per iteration")
    position_mode: Literal["random", "top_left", "top_right", "bottom_left", "bottom_right"] = "random"
    grid: Tuple[int, int] = Field(default=(2, 2), description="block grid for the global shuffle")
    resize: bool = False
    scales: Tuple[float, ...] = (0.50, 0.75, 1.00, 1.25, 1.50)
    order: Literal["shuffle_then_resize", "resize_then_shuffle"] = "shuffle_then_resize"

    @field_validator("scales")
    @classmethod
    def _positive_scales(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("every resize scale must be > 0")
        return v

    @field_validator("grid")
    @classmethod
    def _positive_grid(cls, v):
        if v[0] < 1 or v[1] < 1:
            raise ValueError("grid must be at least 1x1")
        return v


class SampleConfig(Record):
    M: int = Field(default=20, ge=0, description="neighbors sampled around the adversarial image")
    eps0: float = Field(default=1 / 255, ge=0.0, description="L-inf sampling boundary")
    distribution: Literal["uniform"] = "uniform"


class AttackBudget(Record):
    eps_v: float = Field(default=2 / 255, ge=0.0)
    alpha: float = Field(default=0.5 / 255, ge=0.0)
    steps: int = Field(default=10, ge=0)
    momentum: float = Field(default=1.0, ge=0.0)
    eps_t: int = Field(default=1, ge=0, le=1)
    num_candidates: int = Field(default=10, ge=1, description="W, candidates per word")
    lam: float = Field(default=0.5, ge=0.0, le=1.0)
    caption_set_size: int = Field(default=5, ge=1, le=5)
    shuffle: ShuffleConfig = Field(default_factory=ShuffleConfig)
    sample: SampleConfig = Field(default_factory=SampleConfig)

    @model_validator(mode="after")
    def _step_size(self):
        if self.steps > 0 and self.alpha <= 0:
            raise ValueError("alpha must be > 0 when steps > 0")
        return self

    def with_updates(self, **changes) -> "AttackBudget":
        """Nested-aware copy: N/position_mode go to shuffle, M/eps0 go to sample."""
        shuffle_keys = {"N", "position_mode", "grid", "resize", "scales", "order"}
        sample_keys = {"M", "eps0"}
        data = self.model_dump()
        for key, value in changes.items():
            if key in shuffle_keys:
                data["shuffle"][key] = value
            elif key in sample_keys:
                data["sample"][key] = value
            else:
                data[key] = value
        return coerce(AttackBudget, data)


# ---------------------------
# Harness records
# ---------------------------
class ReportOptions(Record):
    amplification: float = Field(default=40.0, gt=0.0)
    sample_pairs: int = Field(default=4, ge=0)


class AblationSpec(Record):
    param: Literal["N", "position_mode", "lam", "momentum", "eps0", "M"]
    values: List[Any]
    pipeline: str = "lssa"
    base: Optional[AttackBudget] = None

    @model_validator(mode="after")
    def _legal_values(self):
        if not self.values:
            raise ValueError("ablation value list must be nonempty")
        if self.pipeline not in PIPELINE_NAMES:
            raise ValueError(f"unknown pipeline '{self.pipeline}'")
        base = self.base or AttackBudget()
        for v in self.values:
            try:
                base.with_updates(**{self.param: v})
            except ConfigError as e:
                raise ValueError(f"illegal value {v!r} for {self.param}: {e.detail}") from e
        return self

    def budget_for(self, value, base: AttackBudget) -> AttackBudget:
        return (self.base or base).with_updates(**{self.param: value})


class ExperimentConfig(Record):
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    models: List[TrainConfig] = Field(default_factory=default_models)
    sources: List[str] = Field(default_factory=list)
    budget: AttackBudget = Field(default_factory=AttackBudget)
    pipelines: List[str] = Field(default_factory=lambda: list(PIPELINE_NAMES))
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"
    workers: Optional[int] = Field(default=None, ge=1)
    show_progress: bool = True
    report: ReportOptions = Field(default_factory=ReportOptions)
    ablation: Optional[AblationSpec] = None

    @model_validator(mode="after")
    def _references(self):
        unknown = [p for p in self.pipelines if p not in PIPELINE_NAMES]
        if unknown:
            raise ValueError(f"unknown pipelines: {unknown}")
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if not self.models:
            raise ValueError("at least one model config is required")
        tags = [m.tag for m in self.models]
        if len(set(tags)) != len(tags):
            raise ValueError(f"model tags must be unique: {tags}")
        missing = [s for s in self.sources if s not in tags]
        if missing:
            raise ValueError(f"sources reference unknown models: {missing}")
        return self

    @property
    def source_tags(self) -> List[str]:
        return self.sources or [self.models[0].tag]

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def resolved_workers(self) -> int:
        if self.workers:
            return self.workers
        env = os.getenv(WORKERS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError as e:
                raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{env}'") from e
        return min(4, os.cpu_count() or 1)

    def model(self, tag: str) -> TrainConfig:
        for m in self.models:
            if m.tag == tag:
                return m
        raise ConfigError(f"unknown model tag '{tag}'")

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> "ExperimentConfig":
        """config file < environment < CLI overrides"""
        data: Dict[str, Any] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                data = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON ({p}): {e}") from e

        env_out = os.getenv(OUTPUT_DIR_ENV)
        if env_out:
            data["output_dir"] = env_out
        for key, value in (overrides or {}).items():
            if value is not None:
                data[key] = value
        return coerce(cls, data)

    def snapshot(self) -> str:
        """normalized config text; worker count and progress bars never change results"""
        data = self.model_dump(mode="json", exclude={"workers", "show_progress"})
        return json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n"

    def sections(self) -> Dict[str, str]:
        """per-step config slices; a step only goes stale when the slice it reads changes"""

        def dump(value: Any) -> str:
            return json.dumps(value, ensure_ascii=False, indent=2, sort_keys=True) + "\n"

        out = {"dataset": dump(self.dataset.model_dump(mode="json"))}
        for m in self.models:
            out[f"model-{m.tag}"] = dump(m.model_dump(mode="json"))
        out["attack"] = dump(self.budget.model_dump(mode="json"))
        out["report"] = dump(
            {
                "report": self.report.model_dump(mode="json"),
                "pipelines": self.pipelines,
                "seeds": self.seeds,
                "sources": self.source_tags,
                "budget": self.budget.model_dump(mode="json"),
            }
        )
        if self.ablation is not None:
            out["ablation"] = dump({"ablation": self.ablation.model_dump(mode="json"), "budget": self.budget.model_dump(mode="json")})
        return out
