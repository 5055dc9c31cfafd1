"""
Nearest-neighbour memorisation diagnostic.

Training and holdout reference sets are first balanced per
(1-year age bin x sex) stratum so both have the same density. For each
generated row ``r = d_train / d_hold`` with exact 1-NN Euclidean distances in
scaled IDP space; ``r < 1`` means the sample sits closer to training data.
"""

import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.spatial import cKDTree

from normdiff.dataset import Cohort, strata
from normdiff.errors import ContractError
from normdiff.utils import log_stage_operation, normdiff_logger, to_jsonable

RATIO_HISTOGRAM_MAX = 4.0


class KdIndex:
    """Immutable k-d tree over a point set with median splits, answering exact 1-NN queries."""

    def __init__(self, points: np.ndarray):
        points = np.array(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if points.shape[0] == 0:
            raise ContractError("Cannot index an empty point set")
        self.points = points
        self.points.setflags(write=False)
        self._tree = cKDTree(points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def query(self, queries: np.ndarray, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """Distances and indices of the nearest indexed point for every query row."""
        queries = np.asarray(queries, dtype=np.float64)
        if queries.ndim == 1:
            queries = queries[None, :] if queries.shape[0] == self.dim else queries[:, None]
        distances, indices = self._tree.query(queries, k=1, workers=workers)
        return np.atleast_1d(distances).astype(np.float64), np.atleast_1d(indices).astype(np.int64)


def kd_build(points: np.ndarray) -> KdIndex:
    return KdIndex(points)


class BalancedSets(BaseModel):
    """Index sets of the balanced train/holdout references."""

    train_indices: List[int]
    holdout_indices: List[int]
    stratum_sizes: Dict[str, int]
    dropped_strata: List[str] = Field(default_factory=list)
    seed: int = 0


def _stratum_key(key: Tuple[float, int]) -> str:
    return f"age{key[0]:g}_sex{key[1]}"


def balance_by_strata(train: Cohort, holdout: Cohort, seed: int = 0, bin_width: float = 1.0) -> BalancedSets:
    """
    Subsample both sets without replacement to ``min(n_train, n_holdout)`` per stratum.

    Strata present in only one set are dropped and reported.
    """
    rng = np.random.default_rng(seed)
    train_strata = strata(train, bin_width)
    hold_strata = strata(holdout, bin_width)
    train_idx: List[int] = []
    hold_idx: List[int] = []
    sizes: Dict[str, int] = {}
    dropped: List[str] = []
    for key in sorted(set(train_strata) | set(hold_strata)):
        a, b = train_strata.get(key, []), hold_strata.get(key, [])
        n = min(len(a), len(b))
        if n == 0:
            dropped.append(_stratum_key(key))
            continue
        train_idx.extend(rng.choice(a, size=n, replace=False).tolist())
        hold_idx.extend(rng.choice(b, size=n, replace=False).tolist())
        sizes[_stratum_key(key)] = n
    normdiff_logger.info(
        f"Balanced reference sets | Per set: {len(train_idx)} | Strata: {len(sizes)} "
        f"| Dropped: {len(dropped)} | Seed: {seed}"
    )
    return BalancedSets(
        train_indices=sorted(train_idx),
        holdout_indices=sorted(hold_idx),
        stratum_sizes=sizes,
        dropped_strata=dropped,
        seed=seed,
    )


def ratios(d_train: np.ndarray, d_hold: np.ndarray) -> np.ndarray:
    """
    ``d_train / d_hold`` with the duplicate conventions: both zero gives 1,
    ``d_hold == 0 < d_train`` gives ``inf``.
    """
    d_train = np.asarray(d_train, dtype=np.float64)
    d_hold = np.asarray(d_hold, dtype=np.float64)
    out = np.empty_like(d_train)
    both_zero = (d_train == 0) & (d_hold == 0)
    hold_zero = (d_hold == 0) & ~both_zero
    regular = d_hold > 0
    out[regular] = d_train[regular] / d_hold[regular]
    out[both_zero] = 1.0
    out[hold_zero] = np.inf
    return out


def ratio_histogram(r: np.ndarray, n_bins: int = 40, upper: float = RATIO_HISTOGRAM_MAX) -> Tuple[np.ndarray, np.ndarray]:
    """Counts on ``[0, upper]``; ratios above ``upper`` (including ``inf``) land in the top bin."""
    edges = np.linspace(0.0, upper, n_bins + 1)
    counts, _ = np.histogram(np.minimum(r, upper), bins=edges)
    return counts, edges


class NnReport(BaseModel):
    """Per-sample distances and ratios plus summary statistics."""

    d_train: List[float]
    d_hold: List[float]
    ratios: List[float]
    prob_lt_1: float = Field(ge=0.0, le=1.0)
    median_log_ratio: float
    histogram: List[int]
    histogram_edges: List[float]
    n_train: int
    n_holdout: int
    stratum_sizes: Dict[str, int] = Field(default_factory=dict)
    dropped_strata: List[str] = Field(default_factory=list)
    seed: int = 0
    swapped_median_log_ratio: Optional[float] = None

    def headline(self) -> Dict[str, float]:
        return {"prob_lt_1": self.prob_lt_1, "median_log_ratio": self.median_log_ratio}


def _median_log(r: np.ndarray) -> float:
    with np.errstate(divide="ignore"):
        return float(np.median(np.log(r)))


def nn_ratio(
    generated: np.ndarray,
    train_ref: np.ndarray,
    holdout_ref: np.ndarray,
    n_bins: int = 40,
    swap: bool = False,
    workers: int = 1,
) -> NnReport:
    """
    Memorisation ratios of generated rows against balanced references.

    With ``swap`` the roles of the references are also exchanged and the
    median log ratio of that ordering is recorded.

    Raises:
        ContractError: If a reference set is empty.
    """
    train_index = kd_build(train_ref)
    hold_index = kd_build(holdout_ref)
    d_train, _ = train_index.query(generated, workers=workers)
    d_hold, _ = hold_index.query(generated, workers=workers)
    r = ratios(d_train, d_hold)
    counts, edges = ratio_histogram(r, n_bins)
    report = NnReport(
        d_train=d_train.tolist(),
        d_hold=d_hold.tolist(),
        ratios=r.tolist(),
        prob_lt_1=float(np.mean(r < 1.0)),
        median_log_ratio=_median_log(r),
        histogram=counts.tolist(),
        histogram_edges=edges.tolist(),
        n_train=len(train_index),
        n_holdout=len(hold_index),
    )
    if swap:
        report.swapped_median_log_ratio = _median_log(ratios(d_hold, d_train))
    normdiff_logger.info(
        f"NN ratio evaluated | Generated: {len(r)} | P(r<1): {report.prob_lt_1:.3f} "
        f"| References: {report.n_train}/{report.n_holdout}"
    )
    return report


def memorisation_report(
    generated: np.ndarray,
    train: Cohort,
    holdout: Cohort,
    seed: int = 0,
    n_bins: int = 40,
    swap: bool = True,
    workers: int = 1,
) -> NnReport:
    """Balance the scaled train/holdout cohorts, then run :func:`nn_ratio`."""
    balanced = balance_by_strata(train, holdout, seed=seed)
    if not balanced.train_indices:
        raise ContractError("No stratum is shared by the train and holdout sets")
    report = nn_ratio(
        generated,
        train.idps[balanced.train_indices],
        holdout.idps[balanced.holdout_indices],
        n_bins=n_bins,
        swap=swap,
        workers=workers,
    )
    report.stratum_sizes = balanced.stratum_sizes
    report.dropped_strata = balanced.dropped_strata
    report.seed = seed
    return report


def write_nn_report(report: NnReport, out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ratios_path = out_dir / "nn_ratios.csv"
    pd.DataFrame({"d_train": report.d_train, "d_hold": report.d_hold, "ratio": report.ratios}).to_csv(
        ratios_path, index=False
    )
    summary_path = out_dir / "nn_summary.json"
    summary = report.model_dump(exclude={"d_train", "d_hold", "ratios"})
    summary_path.write_text(json.dumps(to_jsonable(summary), indent=2), encoding="utf-8")
    log_stage_operation(operation="write", run_id=out_dir.parent.name, details="nn_ratios.csv, nn_summary.json")
    return [ratios_path, summary_path]
