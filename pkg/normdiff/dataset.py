"""
Cohort ingestion, standardisation, stratified splitting and covariate grids.

CSV contract: UTF-8, comma separated, header ``age,sex,<idp1>,...,<idpD>``,
one subject per row, no missing fields, ``sex`` in {0, 1}.
"""

import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from normdiff.errors import DataValidationError
from normdiff.utils import normdiff_logger

REQUIRED_COVARIATES = ("age", "sex")


class Cohort(BaseModel):
    """
    Covariates and IDPs of N subjects.

    Arrays are copied and frozen on construction, so a cohort can be shared
    freely between stages.
    """

    covariates: np.ndarray
    idps: np.ndarray
    idp_names: List[str]
    covariate_names: List[str] = Field(default_factory=lambda: list(REQUIRED_COVARIATES))

    model_config = {"arbitrary_types_allowed": True}

    @model_validator(mode='after')
    def validate_shapes(self) -> 'Cohort':
        """Check row counts, column counts and completeness."""
        cov = np.array(self.covariates, dtype=np.float64)
        idps = np.array(self.idps, dtype=np.float64)
        if cov.ndim != 2 or idps.ndim != 2:
            raise ValueError("covariates and idps must be 2-d matrices")
        if cov.shape[0] != idps.shape[0]:
            raise ValueError(f"Row counts differ: {cov.shape[0]} covariates vs {idps.shape[0]} idps")
        if cov.shape[1] != len(self.covariate_names):
            raise ValueError("covariate_names does not match covariate columns")
        if idps.shape[1] != len(self.idp_names):
            raise ValueError("idp_names does not match idp columns")
        if not (np.all(np.isfinite(cov)) and np.all(np.isfinite(idps))):
            raise ValueError("Cohort contains missing or non-finite values")
        cov.setflags(write=False)
        idps.setflags(write=False)
        self.covariates = cov
        self.idps = idps
        return self

    @property
    def n(self) -> int:
        return self.idps.shape[0]

    @property
    def d(self) -> int:
        return self.idps.shape[1]

    @property
    def ages(self) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index("age")]

    @property
    def sexes(self) -> np.ndarray:
        return self.covariates[:, self.covariate_names.index("sex")]

    def subset(self, indices: Sequence[int]) -> 'Cohort':
        """Rows ``indices`` as a new cohort, in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return self.with_idps(self.idps[idx], covariates=self.covariates[idx])

    def with_idps(self, idps: np.ndarray, covariates: Union[np.ndarray, None] = None) -> 'Cohort':
        return Cohort(
            covariates=self.covariates if covariates is None else covariates,
            idps=idps,
            idp_names=list(self.idp_names),
            covariate_names=list(self.covariate_names),
        )


class Standardizer(BaseModel):
    """Per-IDP z-scaling with training-set means and sample sds (ddof=1)."""

    means: List[float]
    sds: List[float]

    @model_validator(mode='after')
    def validate_sds(self) -> 'Standardizer':
        if len(self.means) != len(self.sds):
            raise ValueError("means and sds must have equal length")
        if any(not sd > 0 for sd in self.sds):
            raise ValueError("sds must be strictly positive")
        return self

    def transform(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - np.asarray(self.means)) / np.asarray(self.sds)

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * np.asarray(self.sds) + np.asarray(self.means)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"means": list(self.means), "sds": list(self.sds)}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> 'Standardizer':
        return cls(means=data["means"], sds=data["sds"])


class CovariateGrid(BaseModel):
    """Cartesian grid of (age-bin centre, sex) cells with half-open age bins."""

    cells: List[Tuple[float, int]]
    bin_width: float = 1.0

    @model_validator(mode='after')
    def validate_cells(self) -> 'CovariateGrid':
        if self.bin_width <= 0:
            raise ValueError("bin_width must be positive")
        if len(set(self.cells)) != len(self.cells):
            raise ValueError("Grid cells must be unique")
        return self

    def cell_id(self, index: int) -> str:
        age, sex = self.cells[index]
        return f"age{age:g}_sex{sex}"

    @property
    def age_centers(self) -> List[float]:
        return sorted({age for age, _ in self.cells})


def _fail_row(row: int, message: str) -> DataValidationError:
    # Data rows are reported 0-based; file line = row + 2 (header is line 1)
    return DataValidationError(f"Row {row} (line {row + 2}): {message}")


def load_csv(path: Union[str, Path]) -> Cohort:
    """
    Read a cohort CSV.

    Raises:
        DataValidationError: Empty file, missing ``age``/``sex`` column, missing
            or non-numeric cell, or ``sex`` outside {0, 1}. Row errors name the row.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DataValidationError(f"{path} is empty")

    frame.columns = [c.strip() for c in frame.columns]
    for column in REQUIRED_COVARIATES:
        if column not in frame.columns:
            raise DataValidationError(f"{path} is missing required column '{column}'")
    idp_names = [c for c in frame.columns if c not in REQUIRED_COVARIATES]
    if not idp_names:
        raise DataValidationError(f"{path} has no IDP columns")

    columns = list(REQUIRED_COVARIATES) + idp_names
    values = np.empty((len(frame), len(columns)), dtype=np.float64)
    for j, column in enumerate(columns):
        raw = frame[column].str.strip()
        missing = raw == ""
        if missing.any():
            raise _fail_row(int(np.flatnonzero(missing.to_numpy())[0]), f"missing value in '{column}'")
        parsed = pd.to_numeric(raw, errors="coerce")
        bad = parsed.isna().to_numpy() | ~np.isfinite(parsed.to_numpy(dtype=np.float64))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise _fail_row(row, f"non-numeric value '{raw.iloc[row]}' in '{column}'")
        # float() on the original text is exact, so emit -> load is bit-identical
        values[:, j] = [float(v) for v in raw]

    sex = values[:, 1]
    bad_sex = ~np.isin(sex, (0.0, 1.0))
    if bad_sex.any():
        row = int(np.flatnonzero(bad_sex)[0])
        raise _fail_row(row, f"sex must be 0 or 1, got {sex[row]:g}")

    if len(frame) == 0:
        raise DataValidationError(f"{path} has a header but no rows")

    normdiff_logger.info(f"Loaded cohort | Path: {path} | N: {len(frame)} | IDPs: {len(idp_names)}")
    return Cohort(
        covariates=values[:, :2],
        idps=values[:, 2:],
        idp_names=idp_names,
        covariate_names=list(REQUIRED_COVARIATES),
    )


def write_csv(cohort: Cohort, path: Union[str, Path]) -> Path:
    """Write a cohort in the CSV contract with round-trip exact floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(",".join(list(REQUIRED_COVARIATES) + cohort.idp_names) + "\n")
        for cov, y in zip(cohort.covariates, cohort.idps):
            fields = [repr(float(cov[0])), str(int(cov[1]))] + [repr(float(v)) for v in y]
            handle.write(",".join(fields) + "\n")
    return path


def fit_apply_zscale(
    train: Cohort, others: Sequence[Cohort] = ()
) -> Tuple[Standardizer, Cohort, List[Cohort]]:
    """
    Fit z-scaling on ``train`` and apply it to ``train`` and every other cohort.

    Raises:
        DataValidationError: Empty training set or a zero-variance IDP (named).
    """
    if train.n < 2:
        raise DataValidationError("Training cohort needs at least two rows to estimate sds")
    means = train.idps.mean(axis=0)
    sds = train.idps.std(axis=0, ddof=1)
    for name, sd in zip(train.idp_names, sds):
        if not sd > 0:
            raise DataValidationError(f"IDP column '{name}' has zero variance")
    standardizer = Standardizer(means=means.tolist(), sds=sds.tolist())
    scaled_train = train.with_idps(standardizer.transform(train.idps))
    scaled_others = [c.with_idps(standardizer.transform(c.idps)) for c in others]
    return standardizer, scaled_train, scaled_others


def age_bin_centers(ages: np.ndarray, bin_width: float = 1.0) -> np.ndarray:
    """Centre of the half-open bin ``[c - w/2, c + w/2)`` holding each age."""
    return np.floor(np.asarray(ages, dtype=np.float64) / bin_width + 0.5) * bin_width


def strata(cohort: Cohort, bin_width: float = 1.0) -> Dict[Tuple[float, int], List[int]]:
    """Row indices per (age-bin centre, sex) stratum, keys in sorted order."""
    groups: Dict[Tuple[float, int], List[int]] = defaultdict(list)
    centers = age_bin_centers(cohort.ages, bin_width)
    for i, (center, sex) in enumerate(zip(centers, cohort.sexes)):
        groups[(float(center), int(sex))].append(i)
    return {key: groups[key] for key in sorted(groups)}


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(cohort: Cohort, fraction: float = 0.8, seed: int = 0) -> Tuple[Cohort, Cohort]:
    """
    Split into train/holdout within every (1-year age bin x sex) stratum.

    Each stratum of size n contributes ``round(fraction * n)`` rows to train.
    """
    if not 0.0 < fraction < 1.0:
        raise DataValidationError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx: List[int] = []
    hold_idx: List[int] = []
    for rows in strata(cohort).values():
        permuted = rng.permutation(rows)
        n_train = _round_half_up(fraction * len(rows))
        train_idx.extend(permuted[:n_train].tolist())
        hold_idx.extend(permuted[n_train:].tolist())
    normdiff_logger.info(
        f"Stratified split | Train: {len(train_idx)} | Holdout: {len(hold_idx)} | Seed: {seed}"
    )
    return cohort.subset(sorted(train_idx)), cohort.subset(sorted(hold_idx))


def subsample_fraction(train: Cohort, fraction: float, seed: int = 0) -> Cohort:
    """Stratified subsample of a training split for training-fraction experiments."""
    if fraction >= 1.0:
        return train
    subset, _ = stratified_split(train, fraction=fraction, seed=seed)
    return subset


def make_grid(cohort: Cohort, bin_width: float = 1.0, sexes: Sequence[int] = (0, 1)) -> CovariateGrid:
    """Grid of every age-bin centre between the youngest and oldest subject, crossed with sex."""
    if cohort.n == 0:
        raise DataValidationError("Cannot build a covariate grid from an empty cohort")
    centers = age_bin_centers(cohort.ages, bin_width)
    lo, hi = int(round(centers.min() / bin_width)), int(round(centers.max() / bin_width))
    ages = [k * bin_width for k in range(lo, hi + 1)]
    return CovariateGrid(
        cells=[(float(age), int(sex)) for age in ages for sex in sexes],
        bin_width=bin_width,
    )


def bin_membership(cohort: Cohort, grid: CovariateGrid) -> List[List[int]]:
    """
    Row indices of ``cohort`` per grid cell.

    Raises:
        DataValidationError: If a row falls outside every cell.
    """
    lookup = {cell: i for i, cell in enumerate(grid.cells)}
    members: List[List[int]] = [[] for _ in grid.cells]
    centers = age_bin_centers(cohort.ages, grid.bin_width)
    for row, (center, sex) in enumerate(zip(centers, cohort.sexes)):
        cell = lookup.get((float(center), int(sex)))
        if cell is None:
            raise DataValidationError(
                f"Row {row} (age {cohort.ages[row]:g}, sex {int(sex)}) is outside the covariate grid"
            )
        members[cell].append(row)
    return members
