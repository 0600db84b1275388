import math
import pickle

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from bonlaw.core import (
    DEGENERATE,
    CandidatePool,
    Correlation,
    ScalingCurve,
    ScoredCandidate,
    UserDataset,
    average_ranks,
    pearson,
    r_squared,
    rel_mae,
    spearman,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def curve(us, ns=None, label=""):
    ns = ns or list(range(1, len(us) + 1))
    return ScalingCurve.from_arrays(ns, us, 1, label)


class TestPearson:
    def test_identity(self):
        assert pearson([1, 2, 3], [1, 2, 3]) == 1.0

    def test_negation(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == -1.0

    def test_textbook_value(self):
        # cov = 1.5, sx = 1, sy = sqrt(7/3): r = 1.5 / sqrt(7/3) / 2 * 2 ... via the raw formula
        x, y = np.array([1.0, 2, 3]), np.array([1.0, 2, 4])
        n = 3
        num = n * np.sum(x * y) - x.sum() * y.sum()
        den = math.sqrt((n * np.sum(x * x) - x.sum() ** 2) * (n * np.sum(y * y) - y.sum() ** 2))
        assert pearson(x, y) == pytest.approx(num / den, abs=1e-15)
        assert pearson(x, y) == pytest.approx(0.9819805060619657, abs=1e-15)

    def test_constant_is_degenerate(self):
        r = pearson([1, 2, 3], [5, 5, 5])
        assert r.degenerate and r == 0.0
        assert r is DEGENERATE

    def test_length_checks(self):
        with pytest.raises(ValueError):
            pearson([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            pearson([1], [1])

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(finite, finite), min_size=3, max_size=40))
    def test_matches_scipy_and_bounded(self, pairs):
        x, y = map(np.array, zip(*pairs))
        r = pearson(x, y)
        assert -1.0 <= r <= 1.0
        if not r.degenerate and np.std(x) > 1e-6 and np.std(y) > 1e-6:
            assert float(r) == pytest.approx(scipy.stats.pearsonr(x, y)[0], abs=1e-9)

    def test_correlation_pickles(self):
        r = pickle.loads(pickle.dumps(DEGENERATE))
        assert r.degenerate and r == 0.0
        assert not Correlation(0.3).degenerate


class TestSpearman:
    def test_monotone(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 1000]) == 1.0

    def test_hand_value(self):
        assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)

    def test_constant_degenerate(self):
        assert spearman([1, 2, 3], [4, 4, 4]).degenerate

    def test_average_ranks_ties(self):
        assert average_ranks([3, 1, 3, 2]).tolist() == [3.5, 1.0, 3.5, 2.0]

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=3, max_size=30))
    def test_matches_scipy_with_ties(self, pairs):
        x, y = map(np.array, zip(*pairs))
        np.testing.assert_array_equal(average_ranks(x), scipy.stats.rankdata(x))
        r = spearman(x, y)
        if not r.degenerate:
            assert float(r) == pytest.approx(scipy.stats.spearmanr(x, y)[0], abs=1e-12)


class TestCurveMetrics:
    def test_rel_mae_cases(self):
        assert rel_mae(curve([0.3, 0.4]), curve([0.3, 0.4])) == 0.0
        assert rel_mae(curve([1.0, 1.0]), curve([1.0, 2.0])) == pytest.approx(0.25)
        assert rel_mae(curve([0.9]), curve([1.0])) == pytest.approx(0.1)

    def test_rel_mae_zero_observed(self):
        with pytest.raises(ValueError):
            rel_mae(curve([0.1, 0.2]), curve([0.0, 0.2]))

    def test_grid_mismatch(self):
        with pytest.raises(ValueError, match="grids differ"):
            rel_mae(curve([0.1, 0.2], [1, 2]), curve([0.1, 0.2], [1, 3]))

    def test_r_squared_cases(self):
        obs = curve([0.3, 0.4, 0.6])
        assert r_squared(obs, obs) == 1.0
        assert r_squared(curve([obs.utilities.mean()] * 3), obs) == pytest.approx(0.0, abs=1e-15)
        pred = curve([0.35, 0.4, 0.5])
        ss_res = 0.05**2 + 0 + 0.1**2
        m = (0.3 + 0.4 + 0.6) / 3
        ss_tot = (0.3 - m) ** 2 + (0.4 - m) ** 2 + (0.6 - m) ** 2
        assert r_squared(pred, obs) == pytest.approx(1 - ss_res / ss_tot, abs=1e-14)

    def test_r_squared_constant_observed(self):
        with pytest.raises(ZeroDivisionError, match="SS_tot"):
            r_squared(curve([0.1, 0.2]), curve([0.5, 0.5]))

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            curve([0.1, 0.2], [2, 2])
        with pytest.raises(ValueError):
            curve([0.1], [0])
        with pytest.raises(ValueError):
            ScalingCurve(())


class TestPools:
    def test_pool_validation(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            CandidatePool("u", "q", [0.2, 1.2])
        with pytest.raises(ValueError, match="length"):
            CandidatePool("u", "q", [0.2, 0.3], pred_mean=[0.1])
        with pytest.raises(ValueError, match=">= 0"):
            CandidatePool("u", "q", [0.2, 0.3], [0.1, 0.2], [0.1, -0.1])
        with pytest.raises(ValueError, match="features"):
            CandidatePool("u", "q", [0.2, 0.3], features=np.zeros((3, 2)))

    def test_arrays_are_frozen_copies(self):
        src = np.array([0.1, 0.2])
        pool = CandidatePool("u", "q", src)
        src[0] = 0.9
        assert pool.true_scores[0] == 0.1
        with pytest.raises(ValueError):
            pool.true_scores[0] = 0.5

    def test_from_candidates_optional_fields(self):
        pool = CandidatePool.from_candidates("u", "q", [ScoredCandidate(0.1, 0.2), ScoredCandidate(0.3, 0.4)])
        assert pool.has_predictions and pool.pred_var is None
        assert pool.candidates[1] == ScoredCandidate(0.3, 0.4, None)
        bare = CandidatePool.from_candidates("u", "q", [ScoredCandidate(0.1), ScoredCandidate(0.3, 0.4)])
        assert not bare.has_predictions

    def test_dataset_user_check(self):
        with pytest.raises(ValueError):
            UserDataset("a", (CandidatePool("b", "q", [0.1]),))
        ds = UserDataset("a", [CandidatePool("a", "q", [0.1, 0.2]), CandidatePool("a", "r", [0.3])])
        assert len(ds) == 2 and ds.all_true().tolist() == [0.1, 0.2, 0.3]
