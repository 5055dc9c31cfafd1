"""
normdiff - conditional denoising-diffusion normative models for tabular
phenotype data, with a synthetic benchmark cohort and an evaluation suite
for calibration, distributional fit, dependence structure and memorisation.
"""

# Version of the package
__version__ = "0.1.0"

from normdiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from normdiff.config import EvalConfig, GridConfig, OptimizerConfig, RunConfig, ScheduleConfig
from normdiff.dataset import Cohort, CovariateGrid, Standardizer, load_csv, write_csv
from normdiff.denoisers import FilmMlpConfig, FilmMlpDenoiser, SaintConfig, SaintDenoiser, build_denoiser
from normdiff.diffusion import NoiseSchedule, ancestral_sample, linear_schedule, train, training_loss
from normdiff.errors import ContractError, DataValidationError, DimensionError, NormdiffError, NumericalError
from normdiff.pipeline import cmd_eval, cmd_report, cmd_sample, cmd_synth, cmd_train
from normdiff.synthgen import SynthConfig, sample_cohort

# Provide easy access to key components
__all__ = [
    "Checkpoint",
    "Cohort",
    "ContractError",
    "CovariateGrid",
    "DataValidationError",
    "DimensionError",
    "EvalConfig",
    "FilmMlpConfig",
    "FilmMlpDenoiser",
    "GridConfig",
    "NoiseSchedule",
    "NormdiffError",
    "NumericalError",
    "OptimizerConfig",
    "RunConfig",
    "SaintConfig",
    "SaintDenoiser",
    "ScheduleConfig",
    "Standardizer",
    "SynthConfig",
    "ancestral_sample",
    "build_denoiser",
    "cmd_eval",
    "cmd_report",
    "cmd_sample",
    "cmd_synth",
    "cmd_train",
    "linear_schedule",
    "load_checkpoint",
    "load_csv",
    "sample_cohort",
    "save_checkpoint",
    "train",
    "training_loss",
    "write_csv",
]
