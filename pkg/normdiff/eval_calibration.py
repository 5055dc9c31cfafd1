"""
Centile estimation and calibration metrics over covariate bins.

Model samples and holdout rows are passed as mappings from a grid cell id
to a matrix (rows are draws or subjects, columns are IDPs) in scaled units.
Only cells with at least ``min_bin_count`` holdout rows are scored; the
others are reported as excluded.
"""

import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.ndimage import gaussian_filter1d
from scipy.special import ndtri

from normdiff.dataset import CovariateGrid, Standardizer
from normdiff.errors import ContractError, DataValidationError
from normdiff.utils import log_stage_operation, normdiff_logger

Bins = Mapping[str, np.ndarray]


class ConditionalSampleSet(BaseModel):
    """M model draws (scaled units) at one grid cell."""

    cell_id: str
    samples: np.ndarray

    model_config = {"arbitrary_types_allowed": True}

    @model_validator(mode='after')
    def validate_samples(self) -> 'ConditionalSampleSet':
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 1:
            raise ValueError(f"Cell {self.cell_id} needs an M x D sample matrix with M >= 1")
        if not np.all(np.isfinite(samples)):
            raise ValueError(f"Cell {self.cell_id} contains non-finite samples")
        self.samples = samples
        return self

    @property
    def m(self) -> int:
        return self.samples.shape[0]


def _as_matrix(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values[:, None] if values.ndim == 1 else values


def ecdf(samples: np.ndarray, threshold: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Fraction of samples not exceeding ``threshold``.

    Raises:
        ContractError: If ``samples`` is empty.
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ContractError("ecdf needs at least one sample")
    counts = np.searchsorted(np.sort(samples), threshold, side="right")
    result = counts / samples.size
    return float(result) if np.ndim(result) == 0 else result


def _order_index(q: float, m: int) -> int:
    if not 0.0 < q < 1.0:
        raise ContractError(f"q must lie in (0, 1), got {q}")
    # ceil(qM) with a guard for products like 0.07 * 100 = 7.000000000000001
    k = math.ceil(q * m - 1e-9)
    return min(max(k, 1), m) - 1


def centile(samples: np.ndarray, q: float) -> float:
    """
    The ``ceil(q M)``-th order statistic, i.e. the generalised inverse of the eCDF.

    Raises:
        ContractError: Empty samples or ``q`` outside (0, 1).
    """
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    if samples.size == 0:
        raise ContractError("centile needs at least one sample")
    return float(np.sort(samples)[_order_index(q, samples.size)])


def centiles(samples: np.ndarray, qs: Sequence[float]) -> np.ndarray:
    """Column-wise centiles of an ``M x D`` matrix; returns ``len(qs) x D``."""
    samples = np.sort(_as_matrix(samples), axis=0)
    if samples.shape[0] == 0:
        raise ContractError("centiles needs at least one sample")
    return np.stack([samples[_order_index(q, samples.shape[0])] for q in qs])


def eligible_bins(holdout_bins: Bins, min_bin_count: int = 20) -> Tuple[List[str], List[str]]:
    """Split cell ids into (scored, excluded) by holdout row count."""
    eligible, excluded = [], []
    for cell, rows in holdout_bins.items():
        (eligible if len(rows) >= min_bin_count else excluded).append(cell)
    return eligible, excluded


def _require_bins(model_bins: Bins, holdout_bins: Bins, min_bin_count: int) -> Tuple[List[str], List[str]]:
    eligible, excluded = eligible_bins(holdout_bins, min_bin_count)
    missing = [cell for cell in eligible if cell not in model_bins]
    if missing:
        raise DataValidationError(f"No model samples for cells {missing[:5]}")
    if not eligible:
        raise DataValidationError(f"No covariate bin has at least {min_bin_count} holdout rows")
    return eligible, excluded


class AceResult(BaseModel):
    """Absolute centile error at one quantile, per IDP."""

    q: float
    per_idp: List[float]
    n_bins: int
    excluded_bins: List[str] = Field(default_factory=list)


def ace(model_bins: Bins, holdout_bins: Bins, q: float, min_bin_count: int = 20) -> AceResult:
    """
    Mean over eligible bins of ``|model centile - holdout centile|``, per IDP.

    Raises:
        DataValidationError: If no bin has ``min_bin_count`` holdout rows.
    """
    eligible, excluded = _require_bins(model_bins, holdout_bins, min_bin_count)
    errors = np.stack([
        np.abs(centiles(model_bins[cell], [q])[0] - centiles(holdout_bins[cell], [q])[0])
        for cell in eligible
    ])
    return AceResult(q=q, per_idp=errors.mean(axis=0).tolist(), n_bins=len(eligible), excluded_bins=excluded)


class CoverageResult(BaseModel):
    """Empirical minus nominal coverage of the central interval at level ``a``."""

    level: float
    bins: List[str]
    deltas: List[List[float]]
    median_by_bin: List[float]
    excluded_bins: List[str] = Field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.median_by_bin))


def coverage_delta(model_bins: Bins, holdout_bins: Bins, a: float, min_bin_count: int = 20) -> CoverageResult:
    """
    Per bin and IDP, the fraction of holdout rows inside the model interval
    ``(centile((1-a)/2), centile((1+a)/2))`` less ``a``. Values tied with
    either endpoint count as outside.
    """
    if not 0.0 < a < 1.0:
        raise ContractError(f"Nominal coverage must lie in (0, 1), got {a}")
    eligible, excluded = _require_bins(model_bins, holdout_bins, min_bin_count)
    lo_q, hi_q = (1.0 - a) / 2.0, (1.0 + a) / 2.0
    deltas = []
    for cell in eligible:
        lo, hi = centiles(model_bins[cell], [lo_q, hi_q])
        y = _as_matrix(holdout_bins[cell])
        inside = (y > lo) & (y < hi)
        deltas.append(inside.mean(axis=0) - a)
    deltas_arr = np.stack(deltas)
    return CoverageResult(
        level=a,
        bins=eligible,
        deltas=deltas_arr.tolist(),
        median_by_bin=np.median(deltas_arr, axis=1).tolist(),
        excluded_bins=excluded,
    )


def pit_values(samples: np.ndarray, y: np.ndarray, half_correction: bool = False) -> np.ndarray:
    """
    ``u = #(samples <= y) / M`` per holdout row and IDP.

    With ``half_correction`` ties count one half.
    """
    samples = np.sort(_as_matrix(samples), axis=0)
    y = _as_matrix(y)
    m = samples.shape[0]
    u = np.empty(y.shape)
    for j in range(y.shape[1]):
        right = np.searchsorted(samples[:, j], y[:, j], side="right")
        if half_correction:
            left = np.searchsorted(samples[:, j], y[:, j], side="left")
            u[:, j] = (left + 0.5 * (right - left)) / m
        else:
            u[:, j] = right / m
    return u


def pit_histogram(u: np.ndarray, n_bins: int = 20) -> np.ndarray:
    """Bin masses of PIT values over ``n_bins`` equal bins on [0, 1]; sums to 1."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size == 0:
        return np.zeros(n_bins)
    counts, _ = np.histogram(u, bins=n_bins, range=(0.0, 1.0))
    return counts / u.size


class PitResult(BaseModel):
    """Pooled PIT values per IDP and their histograms."""

    values: List[List[float]]
    histograms: List[List[float]]
    n_bins: int
    excluded_bins: List[str] = Field(default_factory=list)


def pit(
    model_bins: Bins,
    holdout_bins: Bins,
    min_bin_count: int = 20,
    n_bins: int = 20,
    half_correction: bool = False,
) -> PitResult:
    """PIT of every holdout row under its own bin's samples, pooled across bins per IDP."""
    eligible, excluded = _require_bins(model_bins, holdout_bins, min_bin_count)
    pooled = np.concatenate(
        [pit_values(model_bins[cell], holdout_bins[cell], half_correction) for cell in eligible], axis=0
    )
    return PitResult(
        values=pooled.T.tolist(),
        histograms=[pit_histogram(pooled[:, j], n_bins).tolist() for j in range(pooled.shape[1])],
        n_bins=n_bins,
        excluded_bins=excluded,
    )


def smooth_centile_curves(curves: np.ndarray, sigma_bins: float) -> np.ndarray:
    """
    Gaussian smoothing along the first (age) axis with reflection at the ends.

    ``sigma_bins == 0`` returns an exact copy.
    """
    if sigma_bins < 0:
        raise ContractError(f"sigma_bins must be >= 0, got {sigma_bins}")
    curves = np.asarray(curves, dtype=np.float64)
    if sigma_bins == 0:
        return curves.copy()
    return gaussian_filter1d(curves, sigma=sigma_bins, axis=0, mode="reflect")


def deviation_scores(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Normative z-scores ``Phi^-1(u)`` of holdout rows against model samples.

    ``u`` is clipped to ``[1/(2M), 1 - 1/(2M)]`` so scores stay finite.
    """
    m = _as_matrix(samples).shape[0]
    u = np.clip(pit_values(samples, y), 0.5 / m, 1.0 - 0.5 / m)
    return ndtri(u)


def centile_curves(
    grid_samples: Bins,
    grid: CovariateGrid,
    standardizer: Standardizer,
    idp_names: Sequence[str],
    qs: Sequence[float],
    sigma_bins: float = 2.0,
) -> pd.DataFrame:
    """
    Per-sex centile curves across age in native units, raw and smoothed.

    Columns: ``sex, age, idp, q, centile, smoothed``.
    """
    sds = np.asarray(standardizer.sds)
    means = np.asarray(standardizer.means)
    frames = []
    for sex in sorted({s for _, s in grid.cells}):
        cells = sorted((age, i) for i, (age, s) in enumerate(grid.cells) if s == sex)
        cells = [(age, i) for age, i in cells if grid.cell_id(i) in grid_samples]
        if not cells:
            continue
        ages = np.array([age for age, _ in cells])
        raw = np.stack([centiles(grid_samples[grid.cell_id(i)], qs) for _, i in cells])
        smoothed = smooth_centile_curves(raw, sigma_bins)
        raw_native = raw * sds + means
        smooth_native = smoothed * sds + means
        n_ages, n_q, n_idp = raw.shape
        frames.append(pd.DataFrame({
            "sex": sex,
            "age": np.repeat(ages, n_q * n_idp),
            "idp": np.tile(np.asarray(idp_names), n_ages * n_q),
            "q": np.tile(np.repeat(np.asarray(qs, dtype=float), n_idp), n_ages),
            "centile": raw_native.reshape(-1),
            "smoothed": smooth_native.reshape(-1),
        }))
    if not frames:
        return pd.DataFrame(columns=["sex", "age", "idp", "q", "centile", "smoothed"])
    return pd.concat(frames, ignore_index=True)


class CalibrationReport(BaseModel):
    """ACE, coverage and PIT results for one run."""

    idp_names: List[str]
    ace: List[AceResult]
    coverage: List[CoverageResult]
    pit: PitResult

    def headline(self) -> Dict[str, float]:
        out = {f"ace_{int(round(r.q * 100)):02d}": float(np.mean(r.per_idp)) for r in self.ace}
        for r in self.coverage:
            out[f"coverage_delta_{int(round(r.level * 100))}"] = r.median
        return out


def calibration_report(
    model_bins: Bins,
    holdout_bins: Bins,
    idp_names: Sequence[str],
    quantiles: Sequence[float] = (0.02, 0.25, 0.50, 0.75, 0.98),
    coverage_levels: Sequence[float] = (0.5, 0.8, 0.9),
    min_bin_count: int = 20,
    pit_bins: int = 20,
) -> CalibrationReport:
    report = CalibrationReport(
        idp_names=list(idp_names),
        ace=[ace(model_bins, holdout_bins, q, min_bin_count) for q in quantiles],
        coverage=[coverage_delta(model_bins, holdout_bins, a, min_bin_count) for a in coverage_levels],
        pit=pit(model_bins, holdout_bins, min_bin_count, pit_bins),
    )
    normdiff_logger.info(
        f"Calibration evaluated | Bins: {report.ace[0].n_bins if report.ace else 0} "
        f"| Excluded: {len(report.pit.excluded_bins)}"
    )
    return report


def write_calibration_report(
    report: CalibrationReport, out_dir: Union[str, Path], curves: Optional[pd.DataFrame] = None
) -> List[Path]:
    """Write ``ace.csv``, ``coverage_delta.csv``, ``pit_hist.csv`` and optionally ``centiles.csv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = report.idp_names

    ace_rows = [
        {"q": r.q, "idp": name, "ace": value, "n_bins": r.n_bins}
        for r in report.ace for name, value in zip(names, r.per_idp)
    ]
    coverage_rows = []
    for r in report.coverage:
        for cell, deltas, med in zip(r.bins, r.deltas, r.median_by_bin):
            coverage_rows.extend({"a": r.level, "bin": cell, "idp": n, "delta": d} for n, d in zip(names, deltas))
            coverage_rows.append({"a": r.level, "bin": cell, "idp": "median", "delta": med})
    edges = np.linspace(0.0, 1.0, report.pit.n_bins + 1)
    pit_rows = [
        {"idp": name, "bin_left": edges[k], "bin_right": edges[k + 1], "mass": mass}
        for name, hist in zip(names, report.pit.histograms) for k, mass in enumerate(hist)
    ]

    written = []
    for filename, rows in (("ace.csv", ace_rows), ("coverage_delta.csv", coverage_rows), ("pit_hist.csv", pit_rows)):
        path = out_dir / filename
        pd.DataFrame(rows).to_csv(path, index=False)
        written.append(path)
    if curves is not None:
        path = out_dir / "centiles.csv"
        curves.to_csv(path, index=False)
        written.append(path)
    log_stage_operation(operation="write", run_id=out_dir.parent.name, details=f"{len(written)} calibration files")
    return written
