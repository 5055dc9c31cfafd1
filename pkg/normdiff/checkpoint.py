"""Self-describing JSON model checkpoints."""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from normdiff.config import ScheduleConfig
from normdiff.dataset import Standardizer
from normdiff.denoisers import build_denoiser
from normdiff.diffusion import Denoiser, NoiseSchedule, schedule_from_config
from normdiff.errors import DataValidationError
from normdiff.utils import log_stage_operation

CHECKPOINT_FORMAT = "normdiff.checkpoint/v1"


class Checkpoint(BaseModel):
    """Everything needed to rebuild a trained denoiser and map its outputs to native units."""

    format: str = CHECKPOINT_FORMAT
    backbone: str
    backbone_config: Dict[str, Any]
    schedule: ScheduleConfig
    standardizer: Standardizer
    covariate_standardizer: Standardizer
    idp_names: List[str]
    covariate_names: List[str]
    age_range: Tuple[float, float]
    param_shapes: Dict[str, List[int]]
    params: List[float]
    buffers: Dict[str, List[float]] = Field(default_factory=dict)
    optimizer_state: Dict[str, Any] = Field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    loss_trace: List[float] = Field(default_factory=list)
    train_seconds: float = 0.0

    @model_validator(mode='after')
    def validate_format(self) -> 'Checkpoint':
        if self.format != CHECKPOINT_FORMAT:
            raise ValueError(f"Unsupported checkpoint format '{self.format}'")
        expected = sum(int(np.prod(shape)) for shape in self.param_shapes.values())
        if expected != len(self.params):
            raise ValueError(f"Parameter vector has {len(self.params)} values, shapes need {expected}")
        return self

    @classmethod
    def capture(
        cls,
        denoiser: Denoiser,
        schedule: ScheduleConfig,
        standardizer: Standardizer,
        covariate_standardizer: Standardizer,
        idp_names: List[str],
        covariate_names: List[str],
        age_range: Tuple[float, float],
        **extra: Any,
    ) -> 'Checkpoint':
        return cls(
            backbone=denoiser.backbone,
            backbone_config=denoiser.config.model_dump(),
            schedule=schedule,
            standardizer=standardizer,
            covariate_standardizer=covariate_standardizer,
            idp_names=list(idp_names),
            covariate_names=list(covariate_names),
            age_range=age_range,
            param_shapes={name: list(p.shape) for name, p in denoiser.params.items()},
            params=denoiser.get_flat().tolist(),
            buffers={name: buf.reshape(-1).tolist() for name, buf in denoiser.buffers.items()},
            **extra,
        )

    def build_denoiser(self) -> Denoiser:
        """Rebuild the denoiser and load its parameters and buffers."""
        denoiser = build_denoiser(
            self.backbone, len(self.idp_names), len(self.covariate_names), self.backbone_config, seed=self.seed
        )
        shapes = {name: list(p.shape) for name, p in denoiser.params.items()}
        if shapes != self.param_shapes:
            raise DataValidationError("Checkpoint parameter shapes do not match the rebuilt backbone")
        denoiser.set_flat(np.array(self.params, dtype=np.float64))
        for name, values in self.buffers.items():
            denoiser.buffers[name] = np.array(values, dtype=np.float64).reshape(denoiser.buffers[name].shape)
        return denoiser

    def noise_schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.schedule)

    def scale_covariates(self, covariates: np.ndarray) -> np.ndarray:
        return self.covariate_standardizer.transform(covariates)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(checkpoint.model_dump_json(), encoding="utf-8")
    tmp.replace(path)
    log_stage_operation(operation="checkpoint", run_id=path.parent.name,
                        details=f"epoch {checkpoint.epoch}, {len(checkpoint.params)} parameters")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Raises:
        DataValidationError: Missing file, malformed JSON or a wrong format tag.
    """
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"No checkpoint at {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"Checkpoint {path} is not valid JSON: {exc}")
    fmt: Optional[str] = data.get("format") if isinstance(data, dict) else None
    if fmt != CHECKPOINT_FORMAT:
        raise DataValidationError(f"Checkpoint {path} has format '{fmt}', expected '{CHECKPOINT_FORMAT}'")
    return Checkpoint.model_validate(data)
