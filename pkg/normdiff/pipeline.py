"""
Run orchestration: synth -> train -> sample -> eval -> report.

Every stage works inside one run directory, holds its lock for the duration,
records its outcome in ``runs.db`` (also on failure) and rewrites
``manifest.json`` and the ``config.json`` snapshot afterwards.

Run directory layout::

    config.json  manifest.json  runs.db  run.log
    cohort.csv                          (synth)
    train.csv  holdout.csv  checkpoint.json  loss_trace.csv      (train)
    samples.bin  samples_index.json
    subject_samples.bin  subject_samples_index.json              (sample)
    eval/...  report.json                                        (eval)
    report.csv                                                   (report)
"""

import json
import time
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

import normdiff
from normdiff.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from normdiff.config import RunConfig
from normdiff.dataset import (
    Cohort,
    CovariateGrid,
    Standardizer,
    bin_membership,
    fit_apply_zscale,
    load_csv,
    make_grid,
    stratified_split,
    subsample_fraction,
    write_csv,
)
from normdiff.denoisers import build_denoiser
from normdiff.diffusion import ancestral_sample, schedule_from_config, train
from normdiff.errors import DataValidationError
from normdiff.eval_calibration import calibration_report, centile_curves, write_calibration_report
from normdiff.eval_dependence import band_mask, dependence_report, write_dependence_report
from normdiff.eval_distribution import ks_per_bin, rejection_fraction, write_ks_results
from normdiff.eval_memorisation import memorisation_report, write_nn_report
from normdiff.samplestore import GRID_STORE, SUBJECT_STORE, SampleStore, SampleStoreWriter
from normdiff.stages import STATUS_DONE, STATUS_ERROR, Pipeline, RunStore, Stage, StageRecord, StageTransition
from normdiff.synthgen import STRUCTURES, SynthConfig, sample_cohort, sample_conditional, to_cohort
from normdiff.utils import log_stage_operation, log_stage_transition, normdiff_logger, run_lock, spawn_rngs, to_jsonable

MANIFEST_FORMAT = "normdiff.manifest/v1"
REPORT_FORMAT = "normdiff.report/v1"

COHORT_FILE = "cohort.csv"
TRAIN_FILE = "train.csv"
HOLDOUT_FILE = "holdout.csv"
CHECKPOINT_FILE = "checkpoint.json"
LOSS_FILE = "loss_trace.csv"
CONFIG_FILE = "config.json"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"
REPORT_TABLE = "report.csv"
EVAL_DIR = "eval"

SYNTH = Stage(name="synth")
TRAIN = Stage(name="train")
SAMPLE = Stage(name="sample")
EVAL = Stage(name="eval")
REPORT = Stage(name="report")

PIPELINE = Pipeline(
    stages=[SYNTH, TRAIN, SAMPLE, EVAL, REPORT],
    transitions=[
        StageTransition(from_stage=SYNTH, to_stage=TRAIN, required=False),
        StageTransition(from_stage=TRAIN, to_stage=SAMPLE),
        StageTransition(from_stage=SAMPLE, to_stage=EVAL),
        StageTransition(from_stage=EVAL, to_stage=REPORT),
    ],
)


class StageStatus(BaseModel):
    status: str
    started_at: datetime
    duration_s: float
    error: Optional[str] = None


class RunManifest(BaseModel):
    """Config snapshot, seeds, timings and per-stage status of a run directory."""

    format: str = MANIFEST_FORMAT
    run_id: str
    version: str = normdiff.__version__
    config: Dict[str, Any]
    seeds: Dict[str, int] = Field(default_factory=dict)
    stages: Dict[str, StageStatus] = Field(default_factory=dict)
    train_seconds: Optional[float] = None
    sample_seconds: Optional[float] = None


def build_manifest(config: RunConfig, store: RunStore) -> RunManifest:
    """Assemble the manifest from the latest record of every stage."""
    stages: Dict[str, StageStatus] = {}
    for record in store.list():
        stages[record.stage] = StageStatus(
            status=record.status,
            started_at=record.started_at,
            duration_s=record.duration_s,
            error=record.metadata.get("error"),
        )
    seeds = {"seed": config.seed}
    if config.synth is not None:
        seeds["synth"] = config.synth.seed
    train_rec = store.latest(TRAIN.name)
    sample_rec = store.latest(SAMPLE.name)
    return RunManifest(
        run_id=store.run_id,
        config=json.loads(config.model_dump_json()),
        seeds=seeds,
        stages=stages,
        train_seconds=train_rec.metadata.get("train_seconds") if train_rec else None,
        sample_seconds=sample_rec.metadata.get("sample_seconds") if sample_rec else None,
    )


def write_manifest(config: RunConfig, store: RunStore) -> Path:
    path = store.run_dir / MANIFEST_FILE
    path.write_text(build_manifest(config, store).model_dump_json(indent=2), encoding="utf-8")
    return path


def load_manifest(run_dir: Path) -> Optional[RunManifest]:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.exists():
        return None
    return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))


def snapshot_config(config: RunConfig, run_dir: Path) -> Path:
    path = Path(run_dir) / CONFIG_FILE
    path.write_text(config.model_dump_json(indent=2), encoding="utf-8")
    return path


def _check_predecessors(store: RunStore, stage: Stage, skip: Tuple[str, ...] = ()) -> Optional[StageRecord]:
    """Latest completed record of the stage feeding ``stage`` (its parent)."""
    for required in PIPELINE.required_predecessors(stage):
        if required.name in skip:
            continue
        if store.latest(required.name) is None:
            raise DataValidationError(
                f"Stage '{stage}' needs a completed '{required}' stage in {store.run_dir}"
            )
    for transition in PIPELINE.incoming(stage):
        record = store.latest(transition.from_stage.name)
        if record is not None:
            return record
    return None


def run_stage(
    config: RunConfig,
    stage: Stage,
    func: Callable[[RunConfig, Path], Dict[str, Any]],
    skip_predecessors: Tuple[str, ...] = (),
) -> Dict[str, Any]:
    """
    Run one stage under the run lock and record its outcome.

    ``func`` returns the metadata stored on the stage record. On failure an
    ``error`` record is written and the manifest updated before re-raising.
    """
    run_dir = Path(config.output_dir)
    with run_lock(run_dir):
        with RunStore(run_dir) as store:
            snapshot_config(config, run_dir)
            parent = _check_predecessors(store, stage, skip_predecessors)
            from_stage = parent.stage if parent else "start"
            started_at = datetime.now()
            start = time.perf_counter()
            try:
                metadata = func(config, run_dir)
            except Exception as exc:
                store.add(StageRecord(
                    run_id=store.run_id,
                    stage=stage.name,
                    status=STATUS_ERROR,
                    parent_id=parent.id if parent else None,
                    started_at=started_at,
                    duration_s=time.perf_counter() - start,
                    metadata={"error": str(exc), "error_type": type(exc).__name__},
                ))
                log_stage_transition(from_stage, stage.name, store.run_id, success=False, error=str(exc))
                write_manifest(config, store)
                raise
            store.add(StageRecord(
                run_id=store.run_id,
                stage=stage.name,
                status=STATUS_DONE,
                parent_id=parent.id if parent else None,
                started_at=started_at,
                duration_s=time.perf_counter() - start,
                metadata=to_jsonable(metadata),
            ))
            log_stage_transition(from_stage, stage.name, store.run_id)
            write_manifest(config, store)
            return metadata


# synth ---------------------------------------------------------------------

def synth_config(config: RunConfig) -> SynthConfig:
    return config.synth if config.synth is not None else SynthConfig(seed=config.seed)


def _synth(config: RunConfig, run_dir: Path) -> Dict[str, Any]:
    synth = synth_config(config)
    cohort = to_cohort(sample_cohort(synth))
    path = write_csv(cohort, run_dir / COHORT_FILE)
    return {"path": str(path), "n": cohort.n, "seed": synth.seed}


def cmd_synth(config: RunConfig) -> Dict[str, Any]:
    """Write a synthetic cohort to ``cohort.csv`` in the run directory."""
    return run_stage(config, SYNTH, _synth)


# train ---------------------------------------------------------------------

def fit_covariate_standardizer(train: Cohort) -> Standardizer:
    """Covariate z-scaling; a constant column (e.g. single-sex cohort) keeps sd 1."""
    means = train.covariates.mean(axis=0)
    sds = train.covariates.std(axis=0, ddof=1) if train.n > 1 else np.ones(train.covariates.shape[1])
    sds = np.where(sds > 0, sds, 1.0)
    return Standardizer(means=means.tolist(), sds=sds.tolist())


def _dataset_path(config: RunConfig, run_dir: Path) -> Path:
    if config.dataset is not None:
        return Path(config.dataset)
    path = run_dir / COHORT_FILE
    if not path.exists():
        raise DataValidationError(f"No dataset given and no {COHORT_FILE} in {run_dir}; run synth first")
    return path


def write_loss_trace(loss_trace: List[float], path: Path) -> Path:
    pd.DataFrame({"epoch": np.arange(len(loss_trace)), "loss": loss_trace}).to_csv(path, index=False)
    return path


def _train(config: RunConfig, run_dir: Path, resume: bool = False) -> Dict[str, Any]:
    checkpoint_path = run_dir / CHECKPOINT_FILE
    schedule = schedule_from_config(config.schedule)

    if resume and checkpoint_path.exists():
        previous = load_checkpoint(checkpoint_path)
        train_native = load_csv(run_dir / TRAIN_FILE)
        holdout_n = load_csv(run_dir / HOLDOUT_FILE).n
        standardizer = previous.standardizer
        cov_standardizer = previous.covariate_standardizer
        denoiser = previous.build_denoiser()
        schedule = previous.noise_schedule()
        start_epoch, optimizer_state = previous.epoch, previous.optimizer_state
        seed, loss_trace, seconds = previous.seed, list(previous.loss_trace), previous.train_seconds
        schedule_config = previous.schedule
        log_stage_operation(operation="resume", run_id=run_dir.name, details=f"from epoch {start_epoch}")
    else:
        cohort = load_csv(_dataset_path(config, run_dir))
        train_native, holdout = stratified_split(cohort, config.train_split, seed=config.seed)
        train_native = subsample_fraction(train_native, config.train_fraction, seed=config.seed)
        write_csv(train_native, run_dir / TRAIN_FILE)
        write_csv(holdout, run_dir / HOLDOUT_FILE)
        holdout_n = holdout.n
        standardizer, _, _ = fit_apply_zscale(train_native)
        cov_standardizer = fit_covariate_standardizer(train_native)
        denoiser = build_denoiser(
            config.backbone, train_native.d, train_native.covariates.shape[1], config.backbone_config, seed=config.seed
        )
        start_epoch, optimizer_state = 0, None
        seed, loss_trace, seconds = config.seed, [], 0.0
        schedule_config = config.schedule

    y0 = standardizer.transform(train_native.idps)
    c = cov_standardizer.transform(train_native.covariates)
    result = train(
        denoiser, y0, c, schedule, config.optimizer,
        seed=seed, start_epoch=start_epoch, optimizer_state=optimizer_state,
    )
    loss_trace.extend(result.loss_trace)
    seconds += result.seconds

    checkpoint = Checkpoint.capture(
        denoiser,
        schedule=schedule_config,
        standardizer=standardizer,
        covariate_standardizer=cov_standardizer,
        idp_names=train_native.idp_names,
        covariate_names=train_native.covariate_names,
        age_range=(float(train_native.ages.min()), float(train_native.ages.max())),
        optimizer_state=result.optimizer_state,
        epoch=result.epochs_completed,
        seed=seed,
        loss_trace=loss_trace,
        train_seconds=seconds,
    )
    save_checkpoint(checkpoint, checkpoint_path)
    write_loss_trace(loss_trace, run_dir / LOSS_FILE)
    return {
        "backbone": denoiser.backbone,
        "epochs": result.epochs_completed,
        "n_train": train_native.n,
        "n_holdout": holdout_n,
        "n_params": denoiser.n_params,
        "final_loss": loss_trace[-1] if loss_trace else None,
        "train_seconds": seconds,
    }


def cmd_train(config: RunConfig, resume: bool = False) -> Dict[str, Any]:
    """
    Split, standardise and train; writes train/holdout CSVs, the checkpoint and the loss trace.

    With ``resume`` training continues from the checkpoint's epoch up to
    ``config.optimizer.epochs``.
    """
    return run_stage(config, TRAIN, lambda cfg, run_dir: _train(cfg, run_dir, resume=resume))


# sample --------------------------------------------------------------------

def run_grid(train: Cohort, holdout: Cohort, bin_width: float) -> CovariateGrid:
    """Covariate grid spanning every train and holdout subject."""
    combined = Cohort(
        covariates=np.vstack([train.covariates, holdout.covariates]),
        idps=np.vstack([train.idps, holdout.idps]),
        idp_names=train.idp_names,
        covariate_names=train.covariate_names,
    )
    return make_grid(combined, bin_width)


def _load_splits(run_dir: Path) -> Tuple[Cohort, Cohort]:
    return load_csv(run_dir / TRAIN_FILE), load_csv(run_dir / HOLDOUT_FILE)


def _sample(config: RunConfig, run_dir: Path) -> Dict[str, Any]:
    checkpoint = load_checkpoint(run_dir / CHECKPOINT_FILE)
    denoiser = checkpoint.build_denoiser()
    schedule = checkpoint.noise_schedule()
    train_native, holdout = _load_splits(run_dir)
    grid = run_grid(train_native, holdout, config.grid.bin_width)
    m = config.grid.samples_per_cell
    chunk = config.grid.chunk_size

    start = time.perf_counter()
    cell_rngs = spawn_rngs([config.seed, 1], len(grid.cells))
    with SampleStoreWriter(run_dir, checkpoint.idp_names, checkpoint.standardizer, config.seed, GRID_STORE) as writer:
        for i, (age, sex) in enumerate(grid.cells):
            c = checkpoint.scale_covariates(np.array([age, sex], dtype=np.float64))
            samples = ancestral_sample(denoiser, c, m, schedule, seed=cell_rngs[i], chunk_size=chunk)
            writer.append(grid.cell_id(i), samples, covariates=[float(age), float(sex)])

    draws = config.grid.subject_draws
    if draws > 0:
        c = checkpoint.scale_covariates(holdout.covariates)
        draw_rngs = spawn_rngs([config.seed, 2], draws)
        with SampleStoreWriter(
            run_dir, checkpoint.idp_names, checkpoint.standardizer, config.seed, SUBJECT_STORE
        ) as writer:
            for k in range(draws):
                samples = ancestral_sample(denoiser, c, holdout.n, schedule, seed=draw_rngs[k], chunk_size=chunk)
                writer.append(f"draw{k}", samples)
    seconds = time.perf_counter() - start

    total = len(grid.cells) * m + draws * holdout.n
    normdiff_logger.info(
        f"Sampling finished | Cells: {len(grid.cells)} | M: {m} | Subject draws: {draws} "
        f"| Samples: {total} | Seconds: {seconds:.2f}"
    )
    return {"n_cells": len(grid.cells), "samples_per_cell": m, "subject_draws": draws,
            "samples_total": total, "sample_seconds": seconds}


def cmd_sample(config: RunConfig) -> Dict[str, Any]:
    """Draw M samples per grid cell plus subject-level draws at the holdout covariates."""
    return run_stage(config, SAMPLE, _sample)


# eval ----------------------------------------------------------------------

class EvalInputs(BaseModel):
    """Scaled model and holdout data handed to the evaluation modules."""

    idp_names: List[str]
    grid: CovariateGrid
    standardizer: Standardizer
    model_bins: Dict[str, np.ndarray]
    holdout_bins: Dict[str, np.ndarray]
    subject_gen: Optional[np.ndarray] = None
    subject_ages: Optional[np.ndarray] = None
    train: Cohort
    holdout: Cohort

    model_config = {"arbitrary_types_allowed": True}


def holdout_bins_for(holdout: Cohort, grid: CovariateGrid) -> Dict[str, np.ndarray]:
    members = bin_membership(holdout, grid)
    return {grid.cell_id(i): holdout.idps[rows] for i, rows in enumerate(members) if rows}


def oracle_samples(
    grid: CovariateGrid,
    holdout: Cohort,
    standardizer: Standardizer,
    synth: SynthConfig,
    m: int,
    seed: int,
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Scaled draws from the true synthetic conditionals on the grid and at every holdout subject."""
    rngs = spawn_rngs([seed, 3], len(grid.cells) + 1)
    bins = {
        grid.cell_id(i): standardizer.transform(
            sample_conditional(age, m, rngs[i], skew_shape=synth.skew_shape, onset=synth.mixture_onset_age)
        )
        for i, (age, _) in enumerate(grid.cells)
    }
    subject_rng = rngs[-1]
    rows = [
        sample_conditional(age, 1, subject_rng, skew_shape=synth.skew_shape, onset=synth.mixture_onset_age)[0]
        for age in holdout.ages
    ]
    subjects = standardizer.transform(np.array(rows).reshape(-1, len(STRUCTURES)))
    return bins, subjects


def load_eval_inputs(config: RunConfig, run_dir: Path, oracle: bool = False) -> EvalInputs:
    checkpoint = load_checkpoint(run_dir / CHECKPOINT_FILE)
    standardizer = checkpoint.standardizer
    train_native, holdout_native = _load_splits(run_dir)
    train_scaled = train_native.with_idps(standardizer.transform(train_native.idps))
    holdout_scaled = holdout_native.with_idps(standardizer.transform(holdout_native.idps))
    grid = run_grid(train_native, holdout_native, config.grid.bin_width)

    if oracle:
        if checkpoint.idp_names != list(STRUCTURES):
            raise DataValidationError(
                f"The oracle sampler needs the synthetic IDPs {list(STRUCTURES)}, got {checkpoint.idp_names}"
            )
        model_bins, subject_gen = oracle_samples(
            grid, holdout_native, standardizer, synth_config(config), config.grid.samples_per_cell, config.seed
        )
        subject_ages = holdout_native.ages
    else:
        model_bins = SampleStore(run_dir, GRID_STORE).as_bins()
        subject_gen, subject_ages = None, None
        if (run_dir / f"{SUBJECT_STORE}.bin").exists():
            store = SampleStore(run_dir, SUBJECT_STORE)
            subject_gen = np.vstack([store.read(cell_id) for cell_id in store.cell_ids])
            subject_ages = np.tile(holdout_native.ages, len(store))

    return EvalInputs(
        idp_names=checkpoint.idp_names,
        grid=grid,
        standardizer=standardizer,
        model_bins=model_bins,
        holdout_bins=holdout_bins_for(holdout_scaled, grid),
        subject_gen=subject_gen,
        subject_ages=subject_ages,
        train=train_scaled,
        holdout=holdout_scaled,
    )


def _require_subject_samples(inputs: EvalInputs, evaluation: str) -> np.ndarray:
    if inputs.subject_gen is None:
        raise DataValidationError(f"The {evaluation} evaluation needs subject-level samples (subject_draws > 0)")
    return inputs.subject_gen


def _eval(config: RunConfig, run_dir: Path, oracle: bool = False) -> Dict[str, Any]:
    settings = config.evaluation
    inputs = load_eval_inputs(config, run_dir, oracle)
    out_dir = run_dir / EVAL_DIR
    headline: Dict[str, Any] = {}

    if "calibration" in settings.which:
        report = calibration_report(
            inputs.model_bins, inputs.holdout_bins, inputs.idp_names,
            settings.quantiles, settings.coverage_levels, settings.min_bin_count, settings.pit_bins,
        )
        curves = centile_curves(
            inputs.model_bins, inputs.grid, inputs.standardizer, inputs.idp_names,
            settings.quantiles, settings.smoothing_sigma,
        )
        write_calibration_report(report, out_dir, curves)
        headline.update(report.headline())

    if "ks" in settings.which:
        results = ks_per_bin(
            inputs.model_bins, inputs.holdout_bins, inputs.idp_names,
            n_perm=settings.ks_permutations, seed=config.seed, gen_cap=settings.ks_gen_cap,
            min_bin_count=settings.min_bin_count, workers=settings.workers,
        )
        write_ks_results(results, out_dir)
        headline["ks_rejection_fraction"] = rejection_fraction(results, settings.ks_alpha)
        headline["ks_tests"] = len(results)

    if "dependence" in settings.which:
        gen = _require_subject_samples(inputs, "dependence")
        band = (settings.band_min_age, settings.band_max_age)
        real_mask = band_mask(inputs.holdout.ages, *band)
        gen_mask = band_mask(inputs.subject_ages, *band)
        if not real_mask.any() or not gen_mask.any():
            raise DataValidationError(f"No subjects inside the age band {band}")
        report = dependence_report(
            gen[gen_mask], inputs.holdout.idps[real_mask], inputs.idp_names,
            band=band, bins=settings.shape_bins, value_range=settings.shape_range,
            distance_cap=settings.distance_cap, mantel_permutations=settings.mantel_permutations,
            ranked_k=settings.ranked_k, seed=config.seed, workers=settings.workers,
        )
        write_dependence_report(report, out_dir)
        headline.update(report.headline())

    if "memorisation" in settings.which:
        if settings.memorisation_samples == "grid":
            gen = np.vstack([inputs.model_bins[cell_id] for cell_id in sorted(inputs.model_bins)])
        else:
            gen = _require_subject_samples(inputs, "memorisation")
        report = memorisation_report(
            gen, inputs.train, inputs.holdout, seed=config.seed,
            n_bins=settings.nn_histogram_bins, swap=True, workers=settings.workers or 1,
        )
        write_nn_report(report, out_dir)
        headline.update(report.headline())

    combined = {
        "format": REPORT_FORMAT,
        "run_id": run_dir.name,
        "oracle": oracle,
        "evaluations": list(settings.which),
        "headline": headline,
    }
    (run_dir / REPORT_FILE).write_text(json.dumps(to_jsonable(combined), indent=2), encoding="utf-8")
    return {"evaluations": list(settings.which), "oracle": oracle, "headline": headline}


def cmd_eval(config: RunConfig, oracle: bool = False) -> Dict[str, Any]:
    """
    Run the selected evaluations and write ``report.json``.

    With ``oracle`` the true synthetic conditionals replace the trained model,
    so only a completed train stage (for the splits and standardizer) is needed.
    """
    skip = (SAMPLE.name,) if oracle else ()
    if oracle:
        run_dir = Path(config.output_dir)
        if not (run_dir / CHECKPOINT_FILE).exists():
            raise DataValidationError(f"Oracle evaluation needs the train stage outputs in {run_dir}")
    return run_stage(config, EVAL, lambda cfg, run_dir: _eval(cfg, run_dir, oracle=oracle), skip)


# report --------------------------------------------------------------------

def load_report(run_dir: Path) -> Dict[str, Any]:
    path = Path(run_dir) / REPORT_FILE
    if not path.exists():
        raise DataValidationError(f"No {REPORT_FILE} in {run_dir}; run eval first")
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("format") != REPORT_FORMAT:
        raise DataValidationError(f"{path} has format '{data.get('format')}', expected '{REPORT_FORMAT}'")
    return data


def headline_table(report: Dict[str, Any], manifest: Optional[RunManifest] = None) -> pd.DataFrame:
    rows = [{"metric": key, "value": value} for key, value in report["headline"].items()]
    if manifest is not None:
        rows.append({"metric": "train_seconds", "value": manifest.train_seconds})
        rows.append({"metric": "sample_seconds", "value": manifest.sample_seconds})
    return pd.DataFrame(rows, columns=["metric", "value"])


def _report(config: RunConfig, run_dir: Path) -> Dict[str, Any]:
    report = load_report(run_dir)
    table = headline_table(report, load_manifest(run_dir))
    table.to_csv(run_dir / REPORT_TABLE, index=False)
    return {"table": table.to_dict(orient="records")}


def cmd_report(config: RunConfig) -> pd.DataFrame:
    """Collect the headline numbers and runtimes into ``report.csv``."""
    metadata = run_stage(config, REPORT, _report)
    return pd.DataFrame(metadata["table"], columns=["metric", "value"])
