"""Per-bin two-sample Kolmogorov-Smirnov tests with label-permutation p-values."""

from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from normdiff.errors import ContractError
from normdiff.utils import log_stage_operation, normdiff_logger, parallel_map, spawn_rngs


class KsResult(BaseModel):
    """One (bin, IDP) test."""

    bin: str
    idp: str
    d: float = Field(ge=0.0, le=1.0)
    p: float = Field(ge=0.0, le=1.0)
    n_real: int
    n_gen: int


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """
    ``sup_t |F_a(t) - F_b(t)|`` evaluated exactly on the pooled support.

    Raises:
        ContractError: If either sample is empty.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).reshape(-1))
    b = np.sort(np.asarray(b, dtype=np.float64).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ContractError("ks_statistic needs two non-empty samples")
    support = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, support, side="right") / a.size
    cdf_b = np.searchsorted(b, support, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def permutation_pvalue(
    a: np.ndarray,
    b: np.ndarray,
    n_perm: int = 500,
    seed: Union[int, Sequence[int], np.random.Generator] = 0,
) -> float:
    """
    Add-one label-permutation p-value ``(1 + #{D_perm >= D_obs}) / (n_perm + 1)``.

    Group sizes are preserved in every permutation.
    """
    if n_perm < 1:
        raise ContractError(f"n_perm must be >= 1, got {n_perm}")
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    observed = ks_statistic(a, b)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pooled = np.concatenate([a, b])
    n_a = a.size
    exceed = 0
    for _ in range(n_perm):
        perm = rng.permutation(pooled)
        # tolerance keeps ties (e.g. identical samples) counted as exceedances
        if ks_statistic(perm[:n_a], perm[n_a:]) >= observed - 1e-12:
            exceed += 1
    return (1.0 + exceed) / (n_perm + 1.0)


def rejection_fraction(results: Sequence[KsResult], alpha: float = 0.05) -> float:
    """Share of tests with ``p < alpha``."""
    if not results:
        raise ContractError("rejection_fraction needs at least one result")
    return float(np.mean([r.p < alpha for r in results]))


def _run_test(task) -> KsResult:
    cell, idp, real, gen, n_perm, rng = task
    return KsResult(
        bin=cell,
        idp=idp,
        d=ks_statistic(real, gen),
        p=permutation_pvalue(real, gen, n_perm, rng),
        n_real=len(real),
        n_gen=len(gen),
    )


def ks_per_bin(
    model_bins: Mapping[str, np.ndarray],
    holdout_bins: Mapping[str, np.ndarray],
    idp_names: Sequence[str],
    n_perm: int = 500,
    seed: int = 0,
    gen_cap: int = 10,
    min_bin_count: int = 20,
    workers: Optional[int] = None,
) -> List[KsResult]:
    """
    Permutation KS test for every eligible (bin, IDP).

    Generated samples per bin are truncated to ``gen_cap`` times the real
    count. Each test draws from its own RNG stream spawned from ``seed``.
    """
    cells = [cell for cell, rows in holdout_bins.items() if len(rows) >= min_bin_count and cell in model_bins]
    tasks = []
    streams = spawn_rngs(seed, len(cells) * len(idp_names))
    for i, cell in enumerate(cells):
        real = np.asarray(holdout_bins[cell], dtype=np.float64).reshape(len(holdout_bins[cell]), -1)
        gen = np.asarray(model_bins[cell], dtype=np.float64).reshape(len(model_bins[cell]), -1)
        gen = gen[: gen_cap * real.shape[0]]
        for j, idp in enumerate(idp_names):
            tasks.append((cell, idp, real[:, j], gen[:, j], n_perm, streams[i * len(idp_names) + j]))
    results = parallel_map(_run_test, tasks, max_workers=workers)
    normdiff_logger.info(f"KS tests completed | Tests: {len(results)} | Permutations: {n_perm}")
    return results


def write_ks_results(results: Sequence[KsResult], out_dir: Union[str, Path]) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "ks_results.csv"
    frame = pd.DataFrame([r.model_dump() for r in results], columns=["bin", "idp", "d", "p", "n_real", "n_gen"])
    frame.to_csv(path, index=False)
    log_stage_operation(operation="write", run_id=out_dir.parent.name, details=f"{len(results)} KS tests")
    return path
