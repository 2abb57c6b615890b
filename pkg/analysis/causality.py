"""
Granger Causality - bivariate nested-model F-test of whether a connection's
Lyapunov exponent series helps predict the misclassification rate
"""
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import betainc

from common.errors import (DimensionMismatchError, InvalidSpecError, RankDeficiencyError,
                           SeriesTooShortError)
from common.protocol import DEFAULT_ALPHA, DEFAULT_MAX_LAG, DEFAULT_MIN_SERIES_LEN
from network.trajectory import ConnectionId

log = logging.getLogger("Granger")

LAG_SELECTIONS = ("bic", "fixed")

FLAG_DEGENERATE = "degenerate"
FLAG_RANK = "rank_deficient"
FLAG_EXACT_FIT = "exact_fit"
FLAG_UNANALYZABLE = "unanalyzable"
FLAG_LAG_SHRUNK = "lag_shrunk"

# Unrestricted RSS below this fraction of the target energy counts as a perfect fit
EXACT_FIT_TOL = 1e-20


@dataclass(frozen=True)
class GrangerConfig:
    max_lag: int = DEFAULT_MAX_LAG
    lag_selection: str = "bic"
    fixed_lag: int = 1
    alpha: float = DEFAULT_ALPHA
    min_series_len: int = DEFAULT_MIN_SERIES_LEN

    def __post_init__(self):
        if self.max_lag < 1 or self.fixed_lag < 1:
            raise InvalidSpecError("Lags must be >= 1")
        if self.lag_selection not in LAG_SELECTIONS:
            raise InvalidSpecError(f"lag_selection must be one of {LAG_SELECTIONS}")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidSpecError("alpha must lie in (0, 1)")
        if self.min_series_len < 5:
            raise InvalidSpecError("min_series_len must be >= 5")


@dataclass
class GrangerResult:
    connection: Optional[ConnectionId]
    lag_used: int
    f_stat: float
    p_value: float
    causal: bool
    dof: Tuple[int, int]
    flags: Tuple[str, ...] = field(default_factory=tuple)


# ============================================================================
# OLS / F distribution
# ============================================================================

def ols_fit(X, y):
    """Least squares via LAPACK gelsd; returns (coefficients, residual sum of squares)"""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DimensionMismatchError(f"Design {X.shape} does not match targets {y.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvalidSpecError("Non-finite values in regression inputs")
    rows, cols = X.shape
    if rows < cols:
        raise RankDeficiencyError(f"{rows} observations for {cols} regressors")
    beta, _, rank, _ = linalg.lstsq(X, y)
    if rank < cols:
        raise RankDeficiencyError(f"Design matrix rank {rank} < {cols} columns")
    residuals = y - X @ beta
    return beta, float(residuals @ residuals)


def f_sf(f, dfn, dfd):
    """P(F > f) for F ~ F(dfn, dfd), via the regularized incomplete beta function"""
    if f <= 0:
        return 1.0
    return float(betainc(dfd / 2.0, dfn / 2.0, dfd / (dfd + dfn * f)))


def lag_matrix(series, p, start):
    """Columns series_{t-1}, ..., series_{t-p} for t = start..N-1"""
    n = len(series)
    return np.column_stack([series[start - lag:n - lag] for lag in range(1, p + 1)])


def _designs(x, y, p, start):
    n_obs = len(y) - start
    ones = np.ones((n_obs, 1))
    restricted = np.hstack([ones, lag_matrix(y, p, start)])
    unrestricted = np.hstack([restricted, lag_matrix(x, p, start)])
    return restricted, unrestricted, y[start:]


# ============================================================================
# Lag Selection
# ============================================================================

def effective_max_lag(n, max_lag):
    """Largest lag leaving the unrestricted model a residual degree of freedom"""
    return min(max_lag, (n - 2) // 3)


def _choose_lag(x, y, cfg):
    """Returns (lag, shrunk)"""
    requested = cfg.fixed_lag if cfg.lag_selection == "fixed" else cfg.max_lag
    max_lag = effective_max_lag(len(y), requested)
    if max_lag < 1:
        raise SeriesTooShortError(f"Series of length {len(y)} too short for any lag")
    shrunk = max_lag < requested
    if cfg.lag_selection == "fixed":
        return max_lag, shrunk

    n_obs = len(y) - max_lag
    best_lag, best_bic = 1, np.inf
    for p in range(1, max_lag + 1):
        _, unrestricted, target = _designs(x, y, p, max_lag)
        try:
            _, rss = ols_fit(unrestricted, target)
        except RankDeficiencyError:
            continue
        bic = n_obs * np.log(max(rss, np.finfo(float).tiny) / n_obs) + unrestricted.shape[1] * np.log(n_obs)
        if bic < best_bic:
            best_lag, best_bic = p, bic
    return best_lag, shrunk


def select_lag(x, y, cfg: GrangerConfig = GrangerConfig()) -> int:
    """BIC of the unrestricted model on the common sample, or the fixed lag"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lag, shrunk = _choose_lag(x, y, cfg)
    if shrunk:
        msg = f"Series of length {len(y)} too short for the configured lag; shrinking max lag"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return lag


# ============================================================================
# Test
# ============================================================================

def _non_causal(connection, p, dof, *flags):
    return GrangerResult(connection, p, 0.0, 1.0, False, dof, tuple(flags))


def granger_test(x, y, cfg: GrangerConfig = GrangerConfig(),
                 connection: Optional[ConnectionId] = None) -> GrangerResult:
    """Does x Granger-cause y? Degenerate and rank-deficient cases come back non-causal with a flag"""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise DimensionMismatchError(f"Series lengths differ: {len(x)} vs {len(y)}")
    if len(y) < cfg.min_series_len:
        raise SeriesTooShortError(f"Series of length {len(y)} below minimum {cfg.min_series_len}")

    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return _non_causal(connection, 0, (0, 0), FLAG_DEGENERATE)

    p, shrunk = _choose_lag(x, y, cfg)
    flags = [FLAG_LAG_SHRUNK] if shrunk else []

    n_obs = len(y) - p
    dof = (p, n_obs - 2 * p - 1)
    restricted, unrestricted, target = _designs(x, y, p, p)
    try:
        _, rss_r = ols_fit(restricted, target)
        _, rss_u = ols_fit(unrestricted, target)
    except RankDeficiencyError as e:
        log.debug(f"{connection}: {e}")
        return _non_causal(connection, p, dof, *flags, FLAG_RANK)

    gain = max(rss_r - rss_u, 0.0)
    if rss_u <= EXACT_FIT_TOL * float(target @ target):
        if gain > 0.0:
            return GrangerResult(connection, p, float(np.finfo(float).max), 0.0, True, dof,
                                 tuple(flags + [FLAG_EXACT_FIT]))
        return _non_causal(connection, p, dof, *flags, FLAG_EXACT_FIT)

    f_stat = (gain / p) / (rss_u / dof[1])
    p_value = f_sf(f_stat, *dof)
    return GrangerResult(connection, p, float(f_stat), p_value, p_value < cfg.alpha, dof, tuple(flags))


def granger_sweep(lambda_series: Sequence, misclassification, cfg: GrangerConfig = GrangerConfig(),
                  workers=1) -> List[GrangerResult]:
    """granger_test(lambda -> misclassification) for every connection"""
    target = np.asarray(misclassification, dtype=np.float64)

    def one(series):
        if series.unanalyzable:
            return _non_causal(series.connection, 0, (0, 0), FLAG_UNANALYZABLE)
        if len(series.values) != len(target):
            raise DimensionMismatchError(
                f"{series.connection}: {len(series.values)} windows vs {len(target)} accuracy windows")
        return granger_test(series.values, target, cfg, series.connection)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, lambda_series))
    else:
        results = [one(s) for s in lambda_series]

    if any(FLAG_LAG_SHRUNK in r.flags for r in results):
        log.warning(f"{len(target)} windows too few for max lag {cfg.max_lag}; lag search shrunk")
    n_causal = sum(r.causal for r in results)
    n_flagged = sum(bool(r.flags) for r in results)
    log.info(f"Granger sweep: {n_causal}/{len(results)} connections causal "
             f"(alpha={cfg.alpha}), {n_flagged} flagged")
    return results


def granger_frame(results: Sequence[GrangerResult]) -> pd.DataFrame:
    rows = [{'layer': r.connection.layer, 'to': r.connection.to, 'from': r.connection.source,
             'lag': r.lag_used, 'f_stat': r.f_stat, 'p_value': r.p_value,
             'causal': int(r.causal), 'flags': "|".join(r.flags)}
            for r in results]
    return pd.DataFrame(rows, columns=['layer', 'to', 'from', 'lag', 'f_stat', 'p_value',
                                       'causal', 'flags'])


def granger_results_from_frame(frame: pd.DataFrame) -> List[GrangerResult]:
    out = []
    for row in frame.to_dict('records'):
        flags = tuple(f for f in str(row['flags']).split("|") if f and f != "nan")
        lag = int(row['lag'])
        conn = ConnectionId(int(row['layer']), int(row['to']), int(row['from']))
        out.append(GrangerResult(conn, lag, float(row['f_stat']), float(row['p_value']),
                                 bool(row['causal']), (lag, 0), flags))
    return out
