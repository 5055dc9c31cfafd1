import json
import math
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import squareform

from normdiff.errors import ContractError, DataValidationError, DimensionError
from normdiff.eval_dependence import (
    PairDistanceRecord,
    all_pairs,
    band_mask,
    dependence_report,
    energy_distance,
    mantel,
    mmd2_rbf,
    pair_histogram,
    pair_panels,
    product_of_marginals,
    ranked_pair_report,
    shape_matrix,
    upgma,
    upgma_order,
    write_dependence_report,
)
from normdiff.utils import normdiff_logger


def _naive_energy(x, y):
    def mean_dist(a, b):
        return np.mean([np.linalg.norm(u - v) for u in a for v in b])

    return 2.0 * mean_dist(x, y) - mean_dist(x, x) - mean_dist(y, y)


def _naive_mmd2(x, y, h):
    def k(u, v):
        return math.exp(-np.sum((u - v) ** 2) / (2.0 * h * h))

    n, m = len(x), len(y)
    xx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(u, v) for u in x for v in y) / (n * m)
    return xx + yy - 2.0 * xy


def _record(pair, score):
    return PairDistanceRecord(
        pair=pair,
        names=(f"v{pair[0]}", f"v{pair[1]}"),
        e2_prod_vs_gen=0.0,
        e2_gen_vs_real=0.0,
        e2_prod_vs_real=0.0,
        mmd2_prod_vs_gen=score,
        mmd2_gen_vs_real=0.0,
        mmd2_prod_vs_real=0.0,
    )


def _symmetric(rng, p):
    a = rng.uniform(0.0, 1.0, size=(p, p))
    a = (a + a.T) / 2.0
    np.fill_diagonal(a, 0.0)
    return a


def _naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y))
    sxx = sum((xi - mx) ** 2 for xi in x)
    syy = sum((yi - my) ** 2 for yi in y)
    return sxy / math.sqrt(sxx * syy)


def _naive_mantel(a, b, n_perm, seed):
    p = a.shape[0]
    cells = [(i, j) for i in range(p) for j in range(i + 1, p)]
    upper_a = [a[i, j] for i, j in cells]
    observed = _naive_pearson(upper_a, [b[i, j] for i, j in cells])
    rng = np.random.default_rng(seed)
    exceed = 0
    for _ in range(n_perm):
        perm = rng.permutation(p)
        r = _naive_pearson(upper_a, [b[perm[i], perm[j]] for i, j in cells])
        exceed += r >= observed - 1e-12
    return observed, (1 + exceed) / (n_perm + 1)


class TestProductOfMarginals:
    def test_marginals_preserved(self, rng):
        """Test every column keeps its multiset of values."""
        samples = rng.standard_normal((50, 2))
        prod = product_of_marginals(samples, np.random.default_rng(0))
        for j in range(2):
            assert np.array_equal(np.sort(prod[:, j]), np.sort(samples[:, j]))

    def test_breaks_dependence(self, rng):
        """Test a perfectly correlated pair loses its correlation."""
        x = rng.standard_normal(2000)
        prod = product_of_marginals(np.column_stack([x, x]), np.random.default_rng(1))
        assert abs(np.corrcoef(prod[:, 0], prod[:, 1])[0, 1]) < 3.0 / math.sqrt(2000)

    def test_two_rows(self):
        """Test the degenerate two-row case still keeps both columns intact."""
        samples = np.array([[1.0, 10.0], [2.0, 20.0]])
        prod = product_of_marginals(samples, np.random.default_rng(2))
        assert sorted(prod[:, 0]) == [1.0, 2.0]
        assert sorted(prod[:, 1]) == [10.0, 20.0]

    def test_single_row(self):
        """Test one row is a contract error."""
        with pytest.raises(ContractError):
            product_of_marginals(np.zeros((1, 2)), np.random.default_rng(0))


class TestEnergyDistance:
    def test_identical_sets(self, rng):
        """Test identical sets are at distance 0."""
        x = rng.standard_normal((20, 2))
        assert energy_distance(x, x.copy()) == pytest.approx(0.0, abs=1e-12)

    def test_point_masses(self):
        """Test point masses at 0 and 1 give 2."""
        assert energy_distance(np.zeros((3, 1)), np.ones((4, 1))) == pytest.approx(2.0)

    def test_single_points(self):
        """Test single-point sets reduce to twice their distance."""
        assert energy_distance([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(10.0)

    def test_matches_naive(self, rng):
        """Test agreement with a loop-based reference."""
        x, y = rng.standard_normal((12, 3)), rng.standard_normal((9, 3)) + 0.5
        assert energy_distance(x, y) == pytest.approx(_naive_energy(x, y), abs=1e-12)

    def test_non_negative(self, rng):
        """Test the estimate is never negative."""
        for _ in range(10):
            assert energy_distance(rng.standard_normal((8, 2)), rng.standard_normal((5, 2))) >= -1e-12

    def test_errors(self):
        """Test empty sets and dimension mismatches are rejected."""
        with pytest.raises(ContractError):
            energy_distance(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            energy_distance(np.zeros((2, 2)), np.zeros((3, 3)))


class TestMmd:
    def test_hand_example(self):
        """Test {0, 0} against {1, 1} with h=1 gives 2 - 2 exp(-1/2)."""
        value = mmd2_rbf([0.0, 0.0], [1.0, 1.0], bandwidth=1.0)
        assert value == pytest.approx(2.0 - 2.0 * math.exp(-0.5), abs=1e-12)

    def test_identical_sets(self, rng):
        """Test identical sets are at distance 0."""
        x = rng.standard_normal((15, 2))
        assert abs(mmd2_rbf(x, x.copy())) < 1e-9

    def test_matches_naive(self, rng):
        """Test agreement with a double-loop reference."""
        x, y = rng.standard_normal((10, 2)), rng.standard_normal((7, 2)) * 1.5
        assert mmd2_rbf(x, y, bandwidth=0.8) == pytest.approx(_naive_mmd2(x, y, 0.8), abs=1e-12)

    def test_median_heuristic(self):
        """Test the default bandwidth is the pooled median distance."""
        x, y = np.array([[0.0], [1.0]]), np.array([[3.0], [6.0]])
        # pooled distances: 1, 3, 6, 2, 5, 3 -> median 3
        assert mmd2_rbf(x, y) == pytest.approx(mmd2_rbf(x, y, bandwidth=3.0))

    def test_all_identical_points(self):
        """Test a zero median distance cannot pick a bandwidth."""
        with pytest.raises(DataValidationError):
            mmd2_rbf(np.ones((3, 2)), np.ones((4, 2)))

    def test_needs_two_points(self):
        """Test the unbiased estimator needs two points per set."""
        with pytest.raises(ContractError):
            mmd2_rbf([[0.0]], [[1.0], [2.0]], bandwidth=1.0)


class TestShapeMatrix:
    def test_properties(self, rng):
        """Test symmetry, unit diagonal and entry bounds."""
        data = rng.multivariate_normal(np.zeros(4), np.eye(4) + 0.5, size=500)
        shape = shape_matrix(data)
        assert shape.matrix.shape == (6, 6)
        assert np.array_equal(shape.matrix, shape.matrix.T)
        assert np.all(np.diag(shape.matrix) == 1.0)
        assert np.all(np.abs(shape.matrix) <= 1.0)

    def test_duplicated_pair(self, rng):
        """Test a pair listed twice correlates perfectly with itself."""
        shape = shape_matrix(rng.standard_normal((300, 3)), pairs=[(0, 1), (0, 1), (1, 2)])
        assert shape.matrix[0, 1] == pytest.approx(1.0)

    def test_histogram_mass(self, rng):
        """Test in-range points are all counted and none dropped."""
        xy = rng.uniform(-2.9, 2.9, size=(200, 2))
        counts, dropped = pair_histogram(xy)
        assert counts.shape == (15, 15)
        assert counts.sum() == 200
        assert dropped == 0.0

    def test_out_of_range_dropped(self):
        """Test out-of-range points are reported as dropped."""
        xy = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, -4.0], [1.0, 1.0]])
        _, dropped = pair_histogram(xy)
        assert dropped == pytest.approx(0.5)

    def test_zero_variance(self, rng):
        """Test a constant variable is rejected."""
        data = rng.standard_normal((20, 3))
        data[:, 1] = 4.0
        with pytest.raises(DataValidationError):
            shape_matrix(data)

    @pytest.mark.slow
    def test_resampling_stability(self):
        """Test two independent large samples give nearly the same matrix."""
        cov = np.array([[1.0, 0.6, 0.2], [0.6, 1.0, -0.4], [0.2, -0.4, 1.0]])
        rng = np.random.default_rng(3)
        first = shape_matrix(rng.multivariate_normal(np.zeros(3), cov, size=100000))
        second = shape_matrix(rng.multivariate_normal(np.zeros(3), cov, size=100000))
        assert np.max(np.abs(first.matrix - second.matrix)) < 0.05


class TestUpgma:
    def test_hand_example(self):
        """Test the closest pair merges first and distances average."""
        distance = np.array([[0.0, 0.1, 0.9], [0.1, 0.0, 0.8], [0.9, 0.8, 0.0]])
        merges = upgma(distance)
        assert merges[0] == ([0], [1], pytest.approx(0.1))
        assert merges[1][0] == [0, 1]
        assert merges[1][1] == [2]
        assert merges[1][2] == pytest.approx(0.85)

    def test_ties_keep_index_order(self):
        """Test identical items come out in their original order."""
        assert upgma_order(np.ones((5, 5))) == [0, 1, 2, 3, 4]

    def test_heights_match_scipy(self, rng):
        """Test merge heights agree with scipy's average linkage."""
        distance = _symmetric(rng, 8)
        ours = sorted(height for _, _, height in upgma(distance))
        reference = sorted(linkage(squareform(distance), method="average")[:, 2])
        assert np.allclose(ours, reference, atol=1e-12)

    def test_order_is_permutation(self, rng):
        """Test the leaf order covers every item once."""
        matrix = 1.0 - _symmetric(rng, 7)
        assert sorted(upgma_order(matrix)) == list(range(7))

    def test_non_square(self):
        """Test a non-square matrix is rejected."""
        with pytest.raises(DimensionError):
            upgma(np.zeros((2, 3)))


class TestMantel:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_naive(self, seed):
        """Test r and the permutation p-value against a loop-based reference."""
        rng = np.random.default_rng(100 + seed)
        a, b = _symmetric(rng, 7), _symmetric(rng, 7)
        b = 0.5 * a + 0.5 * b
        result = mantel(a, b, n_perm=49, seed=seed)
        r, p = _naive_mantel(a, b, n_perm=49, seed=seed)
        assert abs(result.r - r) < 1e-12
        assert result.p == p

    def test_identical(self, rng):
        """Test a matrix against itself gives r = 1."""
        a = _symmetric(rng, 6)
        assert mantel(a, a, n_perm=19).r == pytest.approx(1.0)

    def test_negated(self, rng):
        """Test a negated matrix gives r = -1."""
        a = _symmetric(rng, 6)
        assert mantel(a, -a, n_perm=19).r == pytest.approx(-1.0)

    def test_p_value_range(self, rng):
        """Test the add-one p-value lies in [1/(n+1), 1]."""
        result = mantel(_symmetric(rng, 6), _symmetric(rng, 6), n_perm=49, seed=4)
        assert 1.0 / 50.0 <= result.p <= 1.0
        assert result.n_perm == 49

    def test_size_mismatch(self, rng):
        """Test matrices of different sizes are rejected."""
        with pytest.raises(DimensionError):
            mantel(_symmetric(rng, 4), _symmetric(rng, 5))

    @pytest.mark.slow
    def test_null_behaviour(self):
        """Test unrelated matrices rarely look concordant."""
        rng = np.random.default_rng(5)
        quiet = 0
        for trial in range(100):
            result = mantel(_symmetric(rng, 10), _symmetric(rng, 10), n_perm=99, seed=trial)
            quiet += abs(result.r) < 0.4 and result.p > 0.05
        assert quiet >= 85


class TestRankedPairs:
    def test_one_per_band(self):
        """Test k=1 with three pairs puts one pair in each band."""
        ranked = ranked_pair_report([_record((0, 1), 0.2), _record((0, 2), 0.9), _record((1, 2), 0.5)], k=1)
        assert ranked.best[0].pair == (0, 2)
        assert ranked.middle[0].pair == (1, 2)
        assert ranked.worst[0].pair == (0, 1)

    def test_monotone(self, rng):
        """Test the bands are ordered by the ranking key."""
        records = [_record(pair, float(rng.uniform())) for pair in all_pairs(5)]
        ranked = ranked_pair_report(records, k=2)
        scores = [r.mmd2_prod_vs_gen for r in ranked.best + ranked.middle + ranked.worst]
        assert scores == sorted(scores, reverse=True)

    def test_too_few_pairs(self):
        """Test fewer than 3k pairs is a contract error."""
        with pytest.raises(ContractError):
            ranked_pair_report([_record((0, 1), 0.1)], k=1)


class TestDependenceReport:
    def _joint(self, rng, n):
        cov = [[1.0, 0.8, 0.0], [0.8, 1.0, 0.5], [0.0, 0.5, 1.0]]
        return rng.multivariate_normal(np.zeros(3), cov, size=n)

    def test_faithful_model_beats_independence(self, rng):
        """Test a faithful generator sits closer to the real joint than its product of marginals."""
        report = dependence_report(
            self._joint(rng, 600), self._joint(rng, 600), ["A", "B", "C"],
            mantel_permutations=19, ranked_k=1, distance_cap=600,
        )
        e2_gen = np.median([r.e2_gen_vs_real for r in report.records])
        e2_prod = np.median([r.e2_prod_vs_real for r in report.records])
        assert e2_gen < e2_prod
        assert set(report.headline()) == {
            "mantel_r", "median_e2_gen_vs_real", "median_e2_prod_vs_real", "median_mmd2_gen_vs_real"
        }

    def test_shared_leaf_order(self, rng):
        """Test real and generated matrices share the real leaf order."""
        report = dependence_report(
            self._joint(rng, 200), self._joint(rng, 200), ["A", "B", "C"], mantel_permutations=9, ranked_k=1
        )
        assert report.real_shape.leaf_order == report.gen_shape.leaf_order
        assert report.real_shape.leaf_order == upgma_order(report.real_shape)
        assert len(report.panels) == 3

    def test_default_ranking_on_four_idps(self, rng):
        """Test four IDPs (six pairs) get two best, two middle and two worst panels by default."""
        report = dependence_report(
            rng.standard_normal((300, 4)), rng.standard_normal((300, 4)), ["A", "B", "C", "D"],
            mantel_permutations=9,
        )
        assert report.ranked is not None
        assert [len(report.ranked.best), len(report.ranked.middle), len(report.ranked.worst)] == [2, 2, 2]
        assert len(report.panels) == 6
        assert sum(key.startswith("best1_") for key in report.panels) == 1

    def test_skipped_ranking_is_logged(self, rng):
        """Test too few pairs for the ranking leaves no panels and logs a warning."""
        with patch.object(normdiff_logger, "warning") as mock_warning:
            report = dependence_report(
                self._joint(rng, 100), self._joint(rng, 100), ["A", "B", "C"], mantel_permutations=9, ranked_k=2
            )
        assert report.ranked is None
        assert report.panels == {}
        mock_warning.assert_called_once()
        assert "Ranked pair panels skipped" in mock_warning.call_args[0][0]

    def test_needs_two_idps(self, rng):
        """Test a single IDP has no pairs."""
        with pytest.raises(DataValidationError):
            dependence_report(rng.standard_normal((20, 1)), rng.standard_normal((20, 1)), ["A"])

    def test_panels(self, rng):
        """Test the five per-pair grids and the difference maps."""
        real, gen = self._joint(rng, 100), self._joint(rng, 100)
        prod = product_of_marginals(gen[:, [0, 1]], rng)
        panels = pair_panels((0, 1), real, gen, prod)
        assert set(panels) == {"prod", "gen", "gen_minus_prod", "real", "gen_minus_real"}
        assert np.allclose(panels["gen_minus_prod"], panels["gen"] - panels["prod"])

    def test_band_mask(self):
        """Test the age band is closed at both ends and open when unset."""
        ages = np.array([60.0, 65.0, 70.0, 75.0])
        assert band_mask(ages, 65.0, 70.0).tolist() == [False, True, True, False]
        assert band_mask(ages).all()

    def test_write(self, rng, tmp_path):
        """Test the report files and their contents."""
        report = dependence_report(
            self._joint(rng, 150), self._joint(rng, 150), ["A", "B", "C"], mantel_permutations=9, ranked_k=1
        )
        written = write_dependence_report(report, tmp_path / "eval" / "dependence")
        names = {path.name for path in written}
        assert {"pair_distances.csv", "cshape_real.csv", "cshape_gen.csv", "cshape_absdiff.csv", "mantel.json"} <= names
        distances = pd.read_csv(tmp_path / "eval" / "dependence" / "pair_distances.csv")
        assert len(distances) == 3
        assert list(distances.columns[:2]) == ["idp_i", "idp_j"]
        summary = json.loads((tmp_path / "eval" / "dependence" / "mantel.json").read_text())
        assert summary["n_perm"] == 9
        assert sorted(summary["leaf_order"]) == [0, 1, 2]
        assert any(path.parent.name == "pairs" for path in written)
