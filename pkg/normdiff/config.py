"""Pydantic configuration models for schedules, training, sampling, evaluation and runs."""

from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

from normdiff.denoisers import FilmMlpConfig, SaintConfig
from normdiff.synthgen import SynthConfig

EVALUATIONS = ("calibration", "ks", "dependence", "memorisation")


class ScheduleConfig(BaseModel):
    """Linear beta schedule parameters."""

    T: int = Field(default=100, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @model_validator(mode='after')
    def validate_betas(self) -> 'ScheduleConfig':
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            raise ValueError(
                f"Need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        return self


class OptimizerConfig(BaseModel):
    """AdamW and training-loop hyperparameters."""

    lr: float = Field(default=1e-3, ge=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    grad_clip: float = Field(default=1.0, ge=0.0)
    epochs: int = Field(default=100, ge=0)


class GridConfig(BaseModel):
    """Covariate grid and sampling volume."""

    bin_width: float = Field(default=1.0, gt=0.0)
    samples_per_cell: int = Field(default=1000, ge=1)
    subject_draws: int = Field(default=1, ge=0)
    chunk_size: int = Field(default=4096, ge=1)


class EvalConfig(BaseModel):
    """Evaluation-suite settings; defaults follow the recorded design decisions."""

    which: List[Literal["calibration", "ks", "dependence", "memorisation"]] = Field(
        default_factory=lambda: list(EVALUATIONS)
    )
    quantiles: List[float] = Field(default_factory=lambda: [0.02, 0.25, 0.50, 0.75, 0.98])
    coverage_levels: List[float] = Field(default_factory=lambda: [0.5, 0.8, 0.9])
    min_bin_count: int = Field(default=20, ge=1)
    pit_bins: int = Field(default=20, ge=1)
    smoothing_sigma: float = Field(default=2.0, ge=0.0)
    ks_permutations: int = Field(default=500, ge=1)
    ks_alpha: float = Field(default=0.05, gt=0.0, lt=1.0)
    ks_gen_cap: int = Field(default=10, ge=1)
    shape_bins: int = Field(default=15, ge=1)
    shape_range: Tuple[float, float] = (-3.0, 3.0)
    distance_cap: int = Field(default=2000, ge=2)
    mantel_permutations: int = Field(default=999, ge=1)
    ranked_k: int = Field(default=2, ge=1)
    band_min_age: Optional[float] = None
    band_max_age: Optional[float] = None
    nn_histogram_bins: int = Field(default=40, ge=1)
    memorisation_samples: Literal["subjects", "grid"] = "subjects"
    workers: Optional[int] = None

    @model_validator(mode='after')
    def validate_levels(self) -> 'EvalConfig':
        if any(not 0.0 < q < 1.0 for q in self.quantiles):
            raise ValueError("quantiles must lie in (0, 1)")
        if any(not 0.0 < a < 1.0 for a in self.coverage_levels):
            raise ValueError("coverage_levels must lie in (0, 1)")
        return self


class RunConfig(BaseModel):
    """Everything needed to reproduce one run directory."""

    output_dir: Path = Path("runs/default")
    dataset: Optional[Path] = None
    synth: Optional[SynthConfig] = None
    backbone: Literal["mlp", "saint"] = "mlp"
    mlp: FilmMlpConfig = Field(default_factory=FilmMlpConfig)
    saint: SaintConfig = Field(default_factory=SaintConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    train_split: float = Field(default=0.8, gt=0.0, lt=1.0)
    train_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode='after')
    def validate_paths(self) -> 'RunConfig':
        if self.dataset is not None and not Path(self.dataset).exists():
            raise ValueError(f"dataset {self.dataset} does not exist")
        return self

    @property
    def backbone_config(self) -> BaseModel:
        return self.mlp if self.backbone == "mlp" else self.saint
