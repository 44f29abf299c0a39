import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream.errors import ContractError, DegenerateVarianceError, DimensionError
from dualstream.metrics import evaluate_scores, mae, pearson, rmse


def brute_force_pearson(y, yhat):
    """Two-pass scalar-loop reference, independent of the implementation."""
    n = len(y)
    my = sum(y) / n
    mp = sum(yhat) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, yhat)) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vp = sum((b - mp) ** 2 for b in yhat) / n
    return cov / math.sqrt(vy * vp)


class TestPearson:
    def test_perfect_linearity(self):
        assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)

    def test_perfect_anti_linearity(self):
        assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)

    def test_against_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            y = rng.normal(size=100)
            yhat = rng.normal(size=100)
            assert abs(pearson(y, yhat) - brute_force_pearson(y.tolist(), yhat.tolist())) < 1e-12

    def test_degenerate_variance_raises(self):
        with pytest.raises(DegenerateVarianceError):
            pearson([1.0, 2.0, 3.0], [2.0, 2.0, 2.0])
        with pytest.raises(DegenerateVarianceError):
            pearson([1.0, 1.0], [1.0, 2.0])

    def test_needs_two_points(self):
        with pytest.raises(ContractError):
            pearson([1.0], [2.0])

    @given(
        a=st.floats(min_value=0.01, max_value=100),
        b=st.floats(min_value=-100, max_value=100),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_affine_invariance(self, a, b, seed):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=40)
        yhat = rng.normal(size=40)
        base = pearson(y, yhat)
        assert abs(pearson(y, a * yhat + b) - base) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            val = pearson(rng.normal(size=30), rng.normal(size=30))
            assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12


class TestMaeRmse:
    def test_mae_example(self):
        assert mae([1, 2], [2, 4]) == pytest.approx(1.5, abs=1e-15)

    def test_identity_zero(self):
        y = np.random.default_rng(1).normal(size=9)
        assert mae(y, y) == 0.0
        assert rmse(y, y) == 0.0

    def test_rmse_example(self):
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
        assert rmse([0, 0], [3, 4]) == pytest.approx(3.53553, abs=1e-5)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=15)
        yhat = rng.normal(size=15)
        perm = rng.permutation(15)
        assert mae(y, yhat) == pytest.approx(mae(y[perm], yhat[perm]), abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            mae([1, 2, 3], [1, 2])

    def test_brute_force_oracles(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            y = rng.normal(size=100)
            yhat = rng.normal(size=100)
            want_mae = sum(abs(a - b) for a, b in zip(y, yhat)) / 100
            want_rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(y, yhat)) / 100)
            assert abs(mae(y, yhat) - want_mae) < 1e-12
            assert abs(rmse(y, yhat) - want_rmse) < 1e-12

    @given(seed=st.integers(min_value=0, max_value=2**31), n=st.integers(2, 200))
    @settings(max_examples=80, deadline=None)
    def test_rmse_dominates_mae(self, seed, n):
        rng = np.random.default_rng(seed)
        y = rng.normal(size=n)
        yhat = rng.normal(size=n)
        assert rmse(y, yhat) >= mae(y, yhat) - 1e-15

    def test_rmse_equals_mae_iff_equal_magnitudes(self):
        y = np.array([0.0, 0.0, 0.0])
        yhat = np.array([2.0, -2.0, 2.0])
        assert rmse(y, yhat) == pytest.approx(mae(y, yhat), abs=1e-15)


class TestEvalResult:
    def test_bundle(self):
        rng = np.random.default_rng(4)
        y = rng.normal(size=50)
        yhat = y + 0.1 * rng.normal(size=50)
        res = evaluate_scores(y, yhat)
        assert res.n == 50
        assert res.rmse >= res.mae >= 0.0
        assert -1.0 <= res.pc <= 1.0
        assert "PC=" in res.line()

    def test_float32_inputs_evaluated_in_float64(self):
        y32 = (np.arange(10) / 7.0).astype(np.float32)
        yhat32 = (y32 * 1.5 + 0.25).astype(np.float32)
        assert pearson(y32, yhat32) == pytest.approx(1.0, abs=1e-6)
