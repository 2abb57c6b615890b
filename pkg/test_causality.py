"""
Granger Tests - OLS, F distribution, lag selection and test calibration
"""
import numpy as np
import pytest
from scipy import stats
from statsmodels.tsa.stattools import grangercausalitytests

from analysis.causality import (FLAG_DEGENERATE, FLAG_EXACT_FIT, FLAG_LAG_SHRUNK,
                                FLAG_UNANALYZABLE, GrangerConfig, f_sf, granger_frame,
                                granger_results_from_frame, granger_sweep, granger_test, ols_fit,
                                select_lag)
from analysis.chaos import LambdaSeries
from common.errors import (DimensionMismatchError, InvalidSpecError, RankDeficiencyError,
                           SeriesTooShortError)
from network.datasets import coupled_var_pair
from network.trajectory import ConnectionId

FIXED_1 = GrangerConfig(lag_selection="fixed", fixed_lag=1)


# ============================================================================
# OLS / F distribution
# ============================================================================

def test_ols_matches_normal_equations():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    beta, rss = ols_fit(X, y)
    expected = np.linalg.solve(X.T @ X, X.T @ y)
    np.testing.assert_allclose(beta, expected, atol=1e-8)
    assert rss == pytest.approx(float(np.sum((y - X @ expected) ** 2)), abs=1e-8)


def test_ols_rank_deficient():
    X = np.random.default_rng(1).normal(size=(20, 2))
    with pytest.raises(RankDeficiencyError):
        ols_fit(np.column_stack([X, X[:, 0]]), np.ones(20))
    with pytest.raises(RankDeficiencyError):
        ols_fit(X[:1], np.ones(1))


def test_f_survival_function():
    assert f_sf(4.965, 1, 10) == pytest.approx(0.05, abs=1e-3)
    for f, dfn, dfd in [(0.5, 2, 30), (3.1, 4, 88), (12.0, 1, 5)]:
        assert f_sf(f, dfn, dfd) == pytest.approx(stats.f.sf(f, dfn, dfd), rel=1e-10)
    assert f_sf(0.0, 3, 10) == 1.0


# ============================================================================
# Lag Selection
# ============================================================================

def test_bic_finds_true_lag():
    rng = np.random.default_rng(2)
    x = rng.normal(size=300)
    y = 0.1 * rng.normal(size=300)
    y[2:] += 0.8 * x[:-2]
    assert select_lag(x, y, GrangerConfig(max_lag=4)) == 2


def test_fixed_lag_used_as_given():
    x, y = coupled_var_pair(n=100, seed=1)
    assert select_lag(x, y, GrangerConfig(lag_selection="fixed", fixed_lag=3)) == 3


def test_short_series_shrinks_lag_with_warning():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=8), rng.normal(size=8)
    with pytest.warns(RuntimeWarning):
        assert select_lag(x, y, GrangerConfig(max_lag=4)) <= 2
    result = granger_test(x, y, GrangerConfig(max_lag=4))
    assert FLAG_LAG_SHRUNK in result.flags


def test_invalid_config():
    with pytest.raises(InvalidSpecError):
        GrangerConfig(alpha=1.5)
    with pytest.raises(InvalidSpecError):
        GrangerConfig(lag_selection="aic")
    with pytest.raises(InvalidSpecError):
        GrangerConfig(min_series_len=4)


# ============================================================================
# Test
# ============================================================================

@pytest.mark.parametrize("lag", [1, 2, 3])
def test_matches_statsmodels(lag):
    x, y = coupled_var_pair(n=100, coupling=0.3, noise=1.0, seed=3)
    result = granger_test(x, y, GrangerConfig(lag_selection="fixed", fixed_lag=lag))
    oracle = grangercausalitytests(np.column_stack([y, x]), maxlag=[lag])
    f_stat, p_value, df_denom, df_num = oracle[lag][0]['ssr_ftest']
    assert result.lag_used == lag
    assert result.dof == (df_num, df_denom)
    assert result.f_stat == pytest.approx(f_stat, rel=1e-8)
    assert result.p_value == pytest.approx(p_value, rel=1e-8)


def test_scale_invariance():
    x, y = coupled_var_pair(n=80, coupling=0.4, noise=1.0, seed=5)
    reference = granger_test(x, y)
    scaled = granger_test(3.7 * x, 0.2 * y)
    assert scaled.lag_used == reference.lag_used
    assert scaled.f_stat == pytest.approx(reference.f_stat, rel=1e-9)
    assert scaled.p_value == pytest.approx(reference.p_value, rel=1e-9)


def test_strong_coupling_detected():
    x, y = coupled_var_pair(n=100, coupling=0.9, noise=0.1, seed=0)
    result = granger_test(x, y)
    assert result.causal
    assert result.p_value < 1e-6


def test_exact_fit_flagged_causal():
    x = np.random.default_rng(4).normal(size=50)
    y = np.zeros(50)
    y[1:] = x[:-1]
    result = granger_test(x, y, FIXED_1)
    assert result.causal
    assert result.p_value == 0.0
    assert FLAG_EXACT_FIT in result.flags


def test_constant_series_is_non_causal():
    result = granger_test(np.ones(30), np.random.default_rng(0).normal(size=30))
    assert not result.causal
    assert result.p_value == 1.0
    assert result.flags == (FLAG_DEGENERATE,)


def test_input_validation():
    with pytest.raises(SeriesTooShortError):
        granger_test(np.arange(4.0), np.arange(4.0))
    with pytest.raises(DimensionMismatchError):
        granger_test(np.arange(10.0), np.arange(9.0))


def test_type_one_error_calibrated():
    rng = np.random.default_rng(12345)
    rejections = 0
    for _ in range(1000):
        x, y = rng.normal(size=(2, 100))
        rejections += granger_test(x, y, FIXED_1).causal
    assert 0.03 <= rejections / 1000 <= 0.07


def test_power_under_lag_one_coupling():
    detected = sum(granger_test(*coupled_var_pair(n=100, coupling=0.9, noise=0.1, seed=s)).causal
                   for s in range(200))
    assert detected / 200 >= 0.95


# ============================================================================
# Sweep
# ============================================================================

def test_sweep_skips_unanalyzable_connections():
    x, y = coupled_var_pair(n=40, coupling=0.9, noise=0.1, seed=6)
    series = [
        LambdaSeries(ConnectionId(1, 1, 1), x, np.zeros(40, dtype=bool)),
        LambdaSeries(ConnectionId(1, 1, 2), np.zeros(40), np.ones(40, dtype=bool)),
    ]
    results = granger_sweep(series, y)
    assert results[0].causal
    assert results[1].flags == (FLAG_UNANALYZABLE,)
    assert not results[1].causal


def test_sweep_rejects_length_mismatch():
    series = [LambdaSeries(ConnectionId(1, 1, 1), np.arange(10.0), np.zeros(10, dtype=bool))]
    with pytest.raises(DimensionMismatchError):
        granger_sweep(series, np.arange(12.0))


def test_sweep_worker_independent():
    rng = np.random.default_rng(7)
    target = rng.normal(size=30)
    series = [LambdaSeries(ConnectionId(1, 1, s), rng.normal(size=30), np.zeros(30, dtype=bool))
              for s in range(1, 7)]
    serial = granger_sweep(series, target)
    threaded = granger_sweep(series, target, workers=4)
    assert [(r.connection, r.p_value) for r in serial] == [(r.connection, r.p_value) for r in threaded]


def test_granger_frame_restores_results():
    x, y = coupled_var_pair(n=40, coupling=0.9, noise=0.1, seed=8)
    results = granger_sweep([LambdaSeries(ConnectionId(2, 1, 3), x, np.zeros(40, dtype=bool)),
                             LambdaSeries(ConnectionId(2, 1, 4), np.ones(40), np.ones(40, dtype=bool))],
                            y)
    frame = granger_frame(results)
    assert list(frame.columns) == ['layer', 'to', 'from', 'lag', 'f_stat', 'p_value', 'causal', 'flags']
    restored = granger_results_from_frame(frame)
    assert [r.connection for r in restored] == [ConnectionId(2, 1, 3), ConnectionId(2, 1, 4)]
    assert [r.causal for r in restored] == [r.causal for r in results]
    assert restored[1].flags == (FLAG_UNANALYZABLE,)
