"""
Pairwise dependence diagnostics.

For every IDP pair the generated joint is compared with the real joint and
with a dependence-free baseline built from the generated marginals. The
C_shape matrices correlate vectorised 2-D histograms across pairs; a single
UPGMA leaf order computed on the real matrix is reused for the generated one.
"""

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from scipy.spatial.distance import cdist, pdist

from normdiff.errors import ContractError, DataValidationError, DimensionError
from normdiff.utils import log_stage_operation, normdiff_logger, parallel_map, spawn_rngs, to_jsonable

Pair = Tuple[int, int]


def _points(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def product_of_marginals(samples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Permute every column independently: marginals are kept exactly, dependence is broken."""
    samples = _points(samples)
    if samples.shape[0] < 2:
        raise ContractError("product_of_marginals needs at least two rows")
    return np.column_stack([rng.permutation(samples[:, j]) for j in range(samples.shape[1])])


def _within_mean(x: np.ndarray) -> float:
    # V-statistic: all n * n ordered pairs, zero diagonal included
    n = x.shape[0]
    if n < 2:
        return 0.0
    return float(2.0 * pdist(x).sum() / (n * n))


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """``E^2 = 2 E|X - Y| - E|X - X'| - E|Y - Y'|``."""
    x, y = _points(x), _points(y)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ContractError("energy_distance needs two non-empty sets")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"Point dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    return float(2.0 * cdist(x, y).mean() - _within_mean(x) - _within_mean(y))


def median_heuristic(x: np.ndarray, y: np.ndarray) -> float:
    """
    Median of non-zero pairwise distances over the pooled set.

    Raises:
        DataValidationError: If all pooled points coincide.
    """
    distances = pdist(np.vstack([_points(x), _points(y)]))
    distances = distances[distances > 0]
    if distances.size == 0:
        raise DataValidationError("Median heuristic undefined: all pooled points are identical")
    return float(np.median(distances))


def mmd2_rbf(x: np.ndarray, y: np.ndarray, bandwidth: Optional[float] = None) -> float:
    """
    Unbiased MMD^2 with ``k(u, v) = exp(-|u - v|^2 / (2 h^2))``.

    ``bandwidth=None`` selects ``h`` by the median heuristic. Equal-sized sets
    use the paired form, which drops the ``i == j`` cross terms as well, so a
    set compared with itself scores exactly 0.
    """
    x, y = _points(x), _points(y)
    n, m = x.shape[0], y.shape[0]
    if n < 2 or m < 2:
        raise ContractError("mmd2_rbf needs at least two points per set")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"Point dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    h = median_heuristic(x, y) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ContractError(f"bandwidth must be positive, got {h}")
    gamma = 1.0 / (2.0 * h * h)
    k_xx = np.exp(-gamma * cdist(x, x, "sqeuclidean"))
    k_yy = np.exp(-gamma * cdist(y, y, "sqeuclidean"))
    k_xy = np.exp(-gamma * cdist(x, y, "sqeuclidean"))
    within_x = (k_xx.sum() - np.trace(k_xx)) / (n * (n - 1))
    within_y = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    if n == m:
        cross = (k_xy.sum() - np.trace(k_xy)) / (n * (n - 1))
    else:
        cross = k_xy.mean()
    return float(within_x + within_y - 2.0 * cross)


class PairDistanceRecord(BaseModel):
    """Two-sample distances for one IDP pair."""

    pair: Pair
    names: Tuple[str, str]
    e2_prod_vs_gen: float
    e2_gen_vs_real: float
    e2_prod_vs_real: float
    mmd2_prod_vs_gen: float
    mmd2_gen_vs_real: float
    mmd2_prod_vs_real: float


def all_pairs(d: int) -> List[Pair]:
    return list(combinations(range(d), 2))


def pair_histogram(
    xy: np.ndarray, bins: int = 15, value_range: Tuple[float, float] = (-3.0, 3.0)
) -> Tuple[np.ndarray, float]:
    """``bins x bins`` counts of already z-scored pairs; returns counts and the dropped fraction."""
    lo, hi = value_range
    counts, _, _ = np.histogram2d(xy[:, 0], xy[:, 1], bins=bins, range=[[lo, hi], [lo, hi]])
    dropped = 1.0 - counts.sum() / max(xy.shape[0], 1)
    return counts, float(dropped)


class ShapeMatrix(BaseModel):
    """Pearson correlations between vectorised joint histograms of IDP pairs."""

    pairs: List[Pair]
    bins: int = 15
    value_range: Tuple[float, float] = (-3.0, 3.0)
    matrix: np.ndarray
    dropped_fraction: List[float] = Field(default_factory=list)
    leaf_order: Optional[List[int]] = None

    model_config = {"arbitrary_types_allowed": True}

    @model_validator(mode='after')
    def validate_matrix(self) -> 'ShapeMatrix':
        p = len(self.pairs)
        if self.matrix.shape != (p, p):
            raise ValueError(f"matrix must be {p} x {p}, got {self.matrix.shape}")
        return self

    def ordered(self, order: Optional[Sequence[int]] = None) -> np.ndarray:
        order = list(self.leaf_order if order is None else order)
        return self.matrix[np.ix_(order, order)]


def shape_matrix(
    data: np.ndarray,
    pairs: Optional[Sequence[Pair]] = None,
    bins: int = 15,
    value_range: Tuple[float, float] = (-3.0, 3.0),
) -> ShapeMatrix:
    """
    C_shape of an ``N x D`` dataset.

    Each variable is z-scored with the dataset's own mean and sd, each pair
    gets a ``bins x bins`` histogram on ``value_range`` squared (out-of-range
    points dropped), and the flattened histograms are correlated.

    Raises:
        DataValidationError: Fewer than two rows or a zero-variance variable.
    """
    data = _points(data)
    if data.shape[0] < 2:
        raise DataValidationError("shape_matrix needs at least two rows")
    sds = data.std(axis=0, ddof=1)
    if np.any(sds <= 0):
        raise DataValidationError(f"Zero-variance variable at columns {np.flatnonzero(sds <= 0).tolist()}")
    z = (data - data.mean(axis=0)) / sds
    pairs = list(pairs) if pairs is not None else all_pairs(data.shape[1])
    vectors, dropped = [], []
    for i, j in pairs:
        counts, frac = pair_histogram(z[:, [i, j]], bins, value_range)
        vectors.append(counts.reshape(-1))
        dropped.append(frac)
    matrix = np.clip(np.corrcoef(np.stack(vectors)), -1.0, 1.0) if len(pairs) > 1 else np.ones((1, 1))
    matrix = (matrix + matrix.T) / 2.0
    np.fill_diagonal(matrix, 1.0)
    return ShapeMatrix(pairs=pairs, bins=bins, value_range=value_range, matrix=matrix, dropped_fraction=dropped)


@dataclass
class _Cluster:
    key: int
    leaves: List[int]


def upgma(distance: np.ndarray) -> List[Tuple[List[int], List[int], float]]:
    """
    Average-linkage agglomeration of a symmetric distance matrix.

    Among equally close cluster pairs the one whose members have the lowest
    original indices merges first.

    Returns:
        Merges as ``(left leaves, right leaves, height)``, left holding the lower index.
    """
    distance = np.asarray(distance, dtype=np.float64)
    p = distance.shape[0]
    if distance.shape != (p, p):
        raise DimensionError(f"Distance matrix must be square, got {distance.shape}")
    clusters: Dict[int, _Cluster] = {i: _Cluster(key=i, leaves=[i]) for i in range(p)}
    dist: Dict[Tuple[int, int], float] = {(i, j): float(distance[i, j]) for i in range(p) for j in range(i + 1, p)}
    merges = []
    while len(clusters) > 1:
        a, b = min(dist, key=lambda ab: (dist[ab], ab))
        left, right = clusters.pop(a), clusters.pop(b)
        height = dist.pop((a, b))
        merged = _Cluster(key=a, leaves=left.leaves + right.leaves)
        n_a, n_b = len(left.leaves), len(right.leaves)
        for k in clusters:
            d_a = dist.pop((min(a, k), max(a, k)))
            d_b = dist.pop((min(b, k), max(b, k)))
            dist[(min(a, k), max(a, k))] = (n_a * d_a + n_b * d_b) / (n_a + n_b)
        clusters[a] = merged
        merges.append((left.leaves, right.leaves, height))
    return merges


def upgma_order(shape: Union[ShapeMatrix, np.ndarray]) -> List[int]:
    """Leaf order of the UPGMA tree on correlation distance ``1 - rho``."""
    matrix = shape.matrix if isinstance(shape, ShapeMatrix) else np.asarray(shape, dtype=np.float64)
    p = matrix.shape[0]
    if p == 0:
        return []
    merges = upgma(1.0 - matrix)
    return merges[-1][0] + merges[-1][1] if merges else [0]


class MantelResult(BaseModel):
    r: float
    p: float
    n_perm: int


def _upper(matrix: np.ndarray) -> np.ndarray:
    return matrix[np.triu_indices(matrix.shape[0], k=1)]


def mantel(a: np.ndarray, b: np.ndarray, n_perm: int = 999, seed: int = 0) -> MantelResult:
    """
    Pearson r between strict upper triangles, with a one-sided add-one
    p-value from simultaneous row/column permutations of ``b``.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"Mantel needs equal square matrices, got {a.shape} and {b.shape}")
    if a.shape[0] < 3:
        raise ContractError("Mantel needs at least three items")
    upper_a = _upper(a)
    observed = float(np.corrcoef(upper_a, _upper(b))[0, 1])
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_perm):
        perm = rng.permutation(a.shape[0])
        if np.corrcoef(upper_a, _upper(b[np.ix_(perm, perm)]))[0, 1] >= observed - 1e-12:
            exceed += 1
    return MantelResult(r=observed, p=(1.0 + exceed) / (n_perm + 1.0), n_perm=n_perm)


class RankedPairs(BaseModel):
    """Pairs ordered by ``mmd2_prod_vs_gen`` (largest departure from independence first)."""

    best: List[PairDistanceRecord]
    middle: List[PairDistanceRecord]
    worst: List[PairDistanceRecord]


def ranked_pair_report(records: Sequence[PairDistanceRecord], k: int = 2) -> RankedPairs:
    """
    Top, middle and bottom ``k`` pairs by ``mmd2_prod_vs_gen``.

    Raises:
        ContractError: With fewer than ``3k`` pairs.
    """
    if len(records) < 3 * k:
        raise ContractError(f"Need at least {3 * k} pairs for k={k}, got {len(records)}")
    ranked = sorted(records, key=lambda r: (-r.mmd2_prod_vs_gen, r.pair))
    start = (len(ranked) - k) // 2
    return RankedPairs(best=ranked[:k], middle=ranked[start:start + k], worst=ranked[-k:])


def pair_panels(
    pair: Pair,
    real: np.ndarray,
    gen: np.ndarray,
    prod: np.ndarray,
    bins: int = 15,
    value_range: Tuple[float, float] = (-3.0, 3.0),
) -> Dict[str, np.ndarray]:
    """
    Normalised joint histograms and difference maps for one pair, all on the
    real pair's z-scale.
    """
    i, j = pair
    mean = real[:, [i, j]].mean(axis=0)
    sd = real[:, [i, j]].std(axis=0, ddof=1)

    def density(x: np.ndarray) -> np.ndarray:
        counts, _ = pair_histogram((x - mean) / sd, bins, value_range)
        return counts / max(x.shape[0], 1)

    h_real = density(real[:, [i, j]])
    h_gen = density(gen[:, [i, j]])
    h_prod = density(prod)
    return {
        "prod": h_prod,
        "gen": h_gen,
        "gen_minus_prod": h_gen - h_prod,
        "real": h_real,
        "gen_minus_real": h_gen - h_real,
    }


def _cap_rows(x: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= cap:
        return x
    return x[np.sort(rng.choice(x.shape[0], size=cap, replace=False))]


def _pair_task(task) -> Tuple[PairDistanceRecord, np.ndarray]:
    (i, j), names, real, gen, rng = task
    g = gen[:, [i, j]]
    r = real[:, [i, j]]
    prod = product_of_marginals(g, rng)
    record = PairDistanceRecord(
        pair=(i, j),
        names=(names[i], names[j]),
        e2_prod_vs_gen=energy_distance(prod, g),
        e2_gen_vs_real=energy_distance(g, r),
        e2_prod_vs_real=energy_distance(prod, r),
        mmd2_prod_vs_gen=mmd2_rbf(prod, g),
        mmd2_gen_vs_real=mmd2_rbf(g, r),
        mmd2_prod_vs_real=mmd2_rbf(prod, r),
    )
    return record, prod


class DependenceReport(BaseModel):
    idp_names: List[str]
    band: Tuple[Optional[float], Optional[float]]
    n_real: int
    n_gen: int
    records: List[PairDistanceRecord]
    real_shape: ShapeMatrix
    gen_shape: ShapeMatrix
    mantel: MantelResult
    ranked: Optional[RankedPairs] = None
    panels: Dict[str, Dict[str, np.ndarray]] = Field(default_factory=dict)

    model_config = {"arbitrary_types_allowed": True}

    def headline(self) -> Dict[str, float]:
        return {
            "mantel_r": self.mantel.r,
            "median_e2_gen_vs_real": float(np.median([r.e2_gen_vs_real for r in self.records])),
            "median_e2_prod_vs_real": float(np.median([r.e2_prod_vs_real for r in self.records])),
            "median_mmd2_gen_vs_real": float(np.median([r.mmd2_gen_vs_real for r in self.records])),
        }


def band_mask(ages: np.ndarray, min_age: Optional[float] = None, max_age: Optional[float] = None) -> np.ndarray:
    mask = np.ones(len(ages), dtype=bool)
    if min_age is not None:
        mask &= ages >= min_age
    if max_age is not None:
        mask &= ages <= max_age
    return mask


def dependence_report(
    gen: np.ndarray,
    real: np.ndarray,
    idp_names: Sequence[str],
    band: Tuple[Optional[float], Optional[float]] = (None, None),
    bins: int = 15,
    value_range: Tuple[float, float] = (-3.0, 3.0),
    distance_cap: int = 2000,
    mantel_permutations: int = 999,
    ranked_k: int = 2,
    seed: int = 0,
    workers: Optional[int] = None,
) -> DependenceReport:
    """
    Pool generated and real rows within the age band (already filtered by the
    caller) and run every pairwise diagnostic.
    """
    gen, real = _points(gen), _points(real)
    if gen.shape[1] < 2:
        raise DataValidationError("Dependence diagnostics need at least two IDPs")
    cap_rng, *pair_rngs = spawn_rngs(seed, 1 + len(all_pairs(gen.shape[1])))
    gen_c = _cap_rows(gen, distance_cap, cap_rng)
    real_c = _cap_rows(real, distance_cap, cap_rng)
    pairs = all_pairs(gen.shape[1])
    tasks = [(pair, list(idp_names), real_c, gen_c, rng) for pair, rng in zip(pairs, pair_rngs)]
    outputs = parallel_map(_pair_task, tasks, max_workers=workers)
    records = [record for record, _ in outputs]
    prods = {record.pair: prod for record, prod in outputs}

    real_shape = shape_matrix(real, pairs, bins, value_range)
    gen_shape = shape_matrix(gen, pairs, bins, value_range)
    order = upgma_order(real_shape)
    real_shape.leaf_order = order
    gen_shape.leaf_order = order
    mantel_result = (
        mantel(real_shape.matrix, gen_shape.matrix, mantel_permutations, seed)
        if len(pairs) >= 3 else MantelResult(r=float("nan"), p=float("nan"), n_perm=0)
    )

    ranked = None
    if len(records) >= 3 * ranked_k:
        ranked = ranked_pair_report(records, ranked_k)
    else:
        normdiff_logger.warning(
            f"Ranked pair panels skipped | Pairs: {len(records)} | Needed: {3 * ranked_k} (ranked_k={ranked_k})"
        )
    panels: Dict[str, Dict[str, np.ndarray]] = {}
    if ranked is not None:
        for band_name in ("best", "middle", "worst"):
            for rank, record in enumerate(getattr(ranked, band_name)):
                key = f"{band_name}{rank + 1}_{record.names[0]}__{record.names[1]}"
                panels[key] = pair_panels(record.pair, real_c, gen_c, prods[record.pair], bins, value_range)

    normdiff_logger.info(
        f"Dependence evaluated | Pairs: {len(pairs)} | Mantel r: {mantel_result.r:.4f} "
        f"| Real: {real.shape[0]} | Gen: {gen.shape[0]}"
    )
    return DependenceReport(
        idp_names=list(idp_names),
        band=band,
        n_real=real.shape[0],
        n_gen=gen.shape[0],
        records=records,
        real_shape=real_shape,
        gen_shape=gen_shape,
        mantel=mantel_result,
        ranked=ranked,
        panels=panels,
    )


def write_dependence_report(report: DependenceReport, out_dir: Union[str, Path]) -> List[Path]:
    """Write pair distances, C_shape matrices (in shared leaf order), Mantel summary and pair panels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "pair_distances.csv"
    rows = []
    for r in report.records:
        row = r.model_dump(exclude={"pair", "names"})
        rows.append({"idp_i": r.names[0], "idp_j": r.names[1], **row})
    pd.DataFrame(rows).to_csv(path, index=False)
    written.append(path)

    order = report.real_shape.leaf_order or list(range(len(report.real_shape.pairs)))
    labels = [f"{report.idp_names[i]}x{report.idp_names[j]}" for i, j in report.real_shape.pairs]
    ordered_labels = [labels[k] for k in order]
    real_m = report.real_shape.ordered(order)
    gen_m = report.gen_shape.ordered(order)
    for filename, matrix in (
        ("cshape_real.csv", real_m),
        ("cshape_gen.csv", gen_m),
        ("cshape_absdiff.csv", np.abs(real_m - gen_m)),
    ):
        path = out_dir / filename
        pd.DataFrame(matrix, index=ordered_labels, columns=ordered_labels).to_csv(path)
        written.append(path)

    path = out_dir / "mantel.json"
    summary = {
        **report.mantel.model_dump(),
        "band": list(report.band),
        "n_real": report.n_real,
        "n_gen": report.n_gen,
        "leaf_order": order,
        "dropped_fraction_real": report.real_shape.dropped_fraction,
        "dropped_fraction_gen": report.gen_shape.dropped_fraction,
    }
    path.write_text(json.dumps(to_jsonable(summary), indent=2), encoding="utf-8")
    written.append(path)

    pairs_dir = out_dir / "pairs"
    pairs_dir.mkdir(exist_ok=True)
    for key, grids in report.panels.items():
        for grid_name, grid in grids.items():
            path = pairs_dir / f"{key}_{grid_name}.csv"
            pd.DataFrame(grid).to_csv(path, index=False)
            written.append(path)
    log_stage_operation(operation="write", run_id=out_dir.parent.name, details=f"{len(written)} dependence files")
    return written
