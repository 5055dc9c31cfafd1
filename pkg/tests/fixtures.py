from pathlib import Path

import numpy as np
import pytest

from normdiff.config import EvalConfig, GridConfig, OptimizerConfig, RunConfig, ScheduleConfig
from normdiff.dataset import Cohort, write_csv
from normdiff.denoisers import FilmMlpConfig, FilmMlpDenoiser, SaintConfig, SaintDenoiser
from normdiff.diffusion import linear_schedule
from normdiff.stages import Pipeline, RunStore, Stage, StageTransition
from normdiff.synthgen import SynthConfig, sample_cohort, to_cohort


@pytest.fixture
def rng():
    """Return a seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def synth_config():
    """Return a small synthetic cohort configuration."""
    return SynthConfig(n_samples=400, age_range=(50.0, 70.0), seed=3)


@pytest.fixture
def synth_cohort(synth_config):
    """Return a small synthetic cohort in native units."""
    return to_cohort(sample_cohort(synth_config))


@pytest.fixture
def tiny_cohort():
    """Return a three-subject cohort with two IDPs."""
    return Cohort(
        covariates=np.array([[50.0, 0.0], [60.5, 1.0], [70.25, 0.0]]),
        idps=np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 40.0]]),
        idp_names=["lh_thickness", "rh_volume"],
    )


@pytest.fixture
def cohort_csv(tmp_path, synth_cohort):
    """Write the synthetic cohort to a CSV file and return its path."""
    return write_csv(synth_cohort, tmp_path / "cohort.csv")


@pytest.fixture
def schedule():
    """Return a short schedule with strong noise, suited to fast tests."""
    return linear_schedule(10, 1e-3, 0.2)


@pytest.fixture
def mlp_config():
    """Return a small FiLM-MLP configuration without dropout."""
    return FilmMlpConfig(hidden_widths=[8, 8], covariate_mlp_widths=[4], dropout_rate=0.0)


@pytest.fixture
def saint_config():
    """Return a depth-1 SAINT configuration without dropout."""
    return SaintConfig(d_model=8, n_heads=2, depth=1, ff_width=16, dropout_rate=0.0)


@pytest.fixture
def mlp_denoiser(mlp_config):
    """Return a small FiLM-MLP for D=3, C=2."""
    return FilmMlpDenoiser(3, 2, mlp_config, seed=0)


@pytest.fixture
def saint_denoiser(saint_config):
    """Return a small SAINT for D=3, C=2."""
    return SaintDenoiser(3, 2, saint_config, seed=0)


@pytest.fixture
def run_config(tmp_path):
    """Return a run configuration small enough to run every stage in seconds."""
    return RunConfig(
        output_dir=tmp_path / "run",
        synth=SynthConfig(n_samples=600, age_range=(50.0, 70.0), seed=5),
        backbone="mlp",
        mlp=FilmMlpConfig(hidden_widths=[8], covariate_mlp_widths=[4], dropout_rate=0.0),
        schedule=ScheduleConfig(T=5, beta_start=1e-3, beta_end=0.2),
        optimizer=OptimizerConfig(epochs=2, batch_size=128),
        grid=GridConfig(bin_width=5.0, samples_per_cell=25, subject_draws=1),
        evaluation=EvalConfig(
            min_bin_count=5,
            ks_permutations=19,
            mantel_permutations=19,
            distance_cap=200,
        ),
        seed=11,
    )


@pytest.fixture
def oracle_run_config(tmp_path):
    """
    Return a SYNTH run large enough for the headline thresholds to hold under
    the true conditionals.

    Ages span whole 5-year bins (centres 50-75) so grid samples drawn at a bin
    centre match the holdout ages they are scored against.
    """
    return RunConfig(
        output_dir=tmp_path / "oracle",
        synth=SynthConfig(n_samples=20_000, age_range=(47.5, 77.5), seed=21),
        backbone="mlp",
        mlp=FilmMlpConfig(hidden_widths=[8], covariate_mlp_widths=[4], dropout_rate=0.0),
        schedule=ScheduleConfig(T=5, beta_start=1e-3, beta_end=0.2),
        optimizer=OptimizerConfig(epochs=1, batch_size=512),
        grid=GridConfig(bin_width=5.0, samples_per_cell=2000, subject_draws=1),
        evaluation=EvalConfig(ks_permutations=199, mantel_permutations=99, band_min_age=65.0),
        seed=13,
    )


@pytest.fixture
def stages():
    """Return the stages of a run."""
    return [Stage(name=name) for name in ("synth", "train", "sample", "eval", "report")]


@pytest.fixture
def pipeline_graph(stages):
    """Return the stage graph used by runs."""
    synth, train, sample, evaluate, report = stages
    return Pipeline(
        stages=stages,
        transitions=[
            StageTransition(from_stage=synth, to_stage=train, required=False),
            StageTransition(from_stage=train, to_stage=sample),
            StageTransition(from_stage=sample, to_stage=evaluate),
            StageTransition(from_stage=evaluate, to_stage=report),
        ],
    )


@pytest.fixture
def run_store(tmp_path):
    """Return an initialised run store in a temporary run directory."""
    store = RunStore(Path(tmp_path) / "store_run").initialize()
    yield store
    store.dispose()
