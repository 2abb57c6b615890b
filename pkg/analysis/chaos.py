"""
Chaos - largest Lyapunov exponent of short scalar series (Rosenstein's
nearest-neighbor divergence method and a direct two-trajectory estimator),
windowed over weight difference series
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial.distance import cdist

from common.errors import (DegenerateSeriesError, InsufficientDataError, InvalidSpecError,
                           SeriesTooShortError, ZeroMagnitudeError)
from common.protocol import (DEFAULT_EMBED_DELAY, DEFAULT_EMBED_DIM, DEFAULT_FIT_RANGE,
                             DEFAULT_MIN_NEIGHBORS, DEFAULT_THEILER_WINDOW)
from network.trajectory import ConnectionId, DiffSeries, WindowedSeries, window

log = logging.getLogger("Chaos")

ESTIMATORS = ("rosenstein", "direct")

# Rows of the distance matrix computed at once
_NEIGHBOR_CHUNK = 512


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = DEFAULT_EMBED_DIM
    delay: int = DEFAULT_EMBED_DELAY
    theiler_window: int = DEFAULT_THEILER_WINDOW
    fit_range: tuple = DEFAULT_FIT_RANGE
    min_neighbors: int = DEFAULT_MIN_NEIGHBORS

    def __post_init__(self):
        object.__setattr__(self, 'fit_range', tuple(int(k) for k in self.fit_range))
        if self.dim < 1 or self.delay < 1:
            raise InvalidSpecError("Embedding dim and delay must be >= 1")
        if self.theiler_window < 0:
            raise InvalidSpecError("theiler_window must be >= 0")
        k_min, k_max = self.fit_range
        if k_min < 0 or k_max <= k_min:
            raise InvalidSpecError(f"fit_range must satisfy 0 <= k_min < k_max, got {self.fit_range}")
        if self.min_neighbors < 1:
            raise InvalidSpecError("min_neighbors must be >= 1")

    @property
    def span(self):
        return (self.dim - 1) * self.delay

    def min_length(self):
        return 2 * (self.span + self.min_neighbors)

    def check_window(self, window_len):
        if self.span >= window_len:
            raise InvalidSpecError(f"(m-1)*tau = {self.span} must be below window length {window_len}")


@dataclass
class LambdaSeries:
    connection: Optional[ConnectionId]
    values: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __len__(self):
        return len(self.values)

    @property
    def unanalyzable(self):
        return len(self.degenerate) > 0 and bool(np.all(self.degenerate))


# ============================================================================
# Estimators
# ============================================================================

def delay_embed(series, dim, delay=1) -> np.ndarray:
    """Point t = (x_t, x_{t+tau}, ..., x_{t+(m-1)tau})"""
    series = np.asarray(series, dtype=np.float64)
    span = (dim - 1) * delay
    if dim < 1 or delay < 1:
        raise InvalidSpecError("dim and delay must be >= 1")
    if len(series) < span + 1:
        raise SeriesTooShortError(f"Need at least {span + 1} samples to embed, got {len(series)}")
    return sliding_window_view(series, span + 1)[:, ::delay].copy()


def _nearest_neighbors(points, n_traj, theiler):
    """Index of each point's nearest neighbor among the first n_traj, excluding |i - j| <= theiler"""
    candidates = points[:n_traj]
    neighbors = np.empty(n_traj, dtype=np.int64)
    columns = np.arange(n_traj)
    for start in range(0, n_traj, _NEIGHBOR_CHUNK):
        rows = np.arange(start, min(start + _NEIGHBOR_CHUNK, n_traj))
        dists = cdist(points[rows], candidates)
        dists[np.abs(rows[:, None] - columns[None, :]) <= theiler] = np.inf
        neighbors[rows] = np.argmin(dists, axis=1)
    return neighbors


def divergence_curve(series, cfg: EmbeddingConfig):
    """Mean log divergence <ln d_j(k)> for k = 0..k_max; undefined entries are nan"""
    series = np.asarray(series, dtype=np.float64)
    if not np.all(np.isfinite(series)):
        raise InvalidSpecError("Series contains non-finite values")
    if np.ptp(series) == 0.0:
        raise DegenerateSeriesError("Constant series has no divergence")
    if len(series) < cfg.min_length():
        raise SeriesTooShortError(f"Series of length {len(series)} below minimum {cfg.min_length()}")

    points = delay_embed(series, cfg.dim, cfg.delay)
    k_max = cfg.fit_range[1]
    n_traj = len(points) - k_max
    if n_traj < 2 * cfg.theiler_window + 2:
        raise InsufficientDataError(
            f"{n_traj} trajectories cannot yield neighbors outside Theiler window {cfg.theiler_window}")

    neighbors = _nearest_neighbors(points, n_traj, cfg.theiler_window)
    origins = np.arange(n_traj)
    curve = np.full(k_max + 1, np.nan)
    for k in range(k_max + 1):
        d = np.linalg.norm(points[origins + k] - points[neighbors + k], axis=1)
        d = d[d > 0]
        if len(d) >= cfg.min_neighbors:
            curve[k] = np.mean(np.log(d))
    return curve


def rosenstein_le(series, cfg: EmbeddingConfig = EmbeddingConfig()) -> float:
    """Largest Lyapunov exponent in nats per iteration"""
    curve = divergence_curve(series, cfg)
    k_min, k_max = cfg.fit_range
    ks = np.arange(k_min, k_max + 1)
    ys = curve[k_min:k_max + 1]
    valid = np.isfinite(ys)
    if np.count_nonzero(valid) < 2:
        raise InsufficientDataError("Fewer than two valid divergence points in the fit range")
    slope, _ = np.polyfit(ks[valid], ys[valid], 1)
    return float(slope)


def direct_divergence_le(diff_window) -> float:
    """(1 / (W - 1)) * ln(|dw_end| / |dw_start|) for a two-trajectory difference window"""
    values = np.abs(np.asarray(diff_window, dtype=np.float64))
    if len(values) < 2:
        raise SeriesTooShortError("Direct estimate needs at least two samples")
    if values[0] == 0.0:
        raise ZeroMagnitudeError("Difference is zero at window start")
    if values[-1] == 0.0:
        raise DegenerateSeriesError("Difference collapses to zero at window end")
    return float(np.log(values[-1] / values[0]) / (len(values) - 1))


def estimate(series, estimator="rosenstein", cfg: EmbeddingConfig = EmbeddingConfig()) -> float:
    if estimator == "rosenstein":
        return rosenstein_le(series, cfg)
    if estimator == "direct":
        return direct_divergence_le(series)
    raise InvalidSpecError(f"Unknown estimator {estimator!r}; choose from {ESTIMATORS}")


# ============================================================================
# Windowed Sweep
# ============================================================================

def windowed_le(windowed: WindowedSeries, cfg: EmbeddingConfig = EmbeddingConfig(),
                estimator="rosenstein") -> LambdaSeries:
    """One exponent per window; degenerate windows record 0 and set their flag"""
    cfg.check_window(windowed.window_len)
    if estimator == "rosenstein" and windowed.window_len < cfg.min_length():
        raise SeriesTooShortError(
            f"Window length {windowed.window_len} below estimator minimum {cfg.min_length()}")

    values = np.zeros(windowed.n_windows)
    degenerate = np.zeros(windowed.n_windows, dtype=bool)
    for l, segment in enumerate(windowed.windows):
        try:
            values[l] = estimate(segment, estimator, cfg)
        except (DegenerateSeriesError, InsufficientDataError) as e:
            degenerate[l] = True
            log.debug(f"Window {l} of {windowed.source}: {e}")

    result = LambdaSeries(windowed.source, values, degenerate)
    if result.unanalyzable:
        log.debug(f"Connection {windowed.source} unanalyzable: every window degenerate")
    return result


def lambda_sweep(diffs: Sequence[DiffSeries], window_len, cfg: EmbeddingConfig = EmbeddingConfig(),
                 estimator="rosenstein", workers=1) -> List[LambdaSeries]:
    """windowed_le over every connection, optionally on a thread pool"""
    def one(d):
        return windowed_le(window(d.values, window_len, d.connection), cfg, estimator)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, diffs))
    else:
        results = [one(d) for d in diffs]

    unanalyzable = sum(r.unanalyzable for r in results)
    k = len(results[0]) if results else 0
    log.info(f"Lyapunov sweep: {len(results)} connections x {k} windows "
             f"({estimator}), {unanalyzable} unanalyzable")
    return results


def lambda_frame(series: Sequence[LambdaSeries]) -> pd.DataFrame:
    """Long format: layer, to, from, window_index, lambda, degenerate_flag"""
    rows = []
    for s in series:
        for l, (value, flag) in enumerate(zip(s.values, s.degenerate)):
            rows.append({'layer': s.connection.layer, 'to': s.connection.to,
                         'from': s.connection.source, 'window_index': l,
                         'lambda': float(value), 'degenerate_flag': int(flag)})
    return pd.DataFrame(rows, columns=['layer', 'to', 'from', 'window_index', 'lambda',
                                       'degenerate_flag'])


def lambda_series_from_frame(frame: pd.DataFrame) -> List[LambdaSeries]:
    out = []
    for (layer, to, source), group in frame.groupby(['layer', 'to', 'from'], sort=True):
        group = group.sort_values('window_index')
        out.append(LambdaSeries(ConnectionId(int(layer), int(to), int(source)),
                                group['lambda'].to_numpy(dtype=np.float64),
                                group['degenerate_flag'].to_numpy().astype(bool)))
    return out


# ============================================================================
# Sensitivity to Initial Conditions
# ============================================================================

@dataclass
class SDICSummary:
    exponents: pd.DataFrame  # layer, to, from, exponent
    positive_fraction: float
    n_defined: int


def sdic_summary(diffs: Sequence[DiffSeries]) -> SDICSummary:
    """
    Direct divergence exponent of each difference series over the whole
    replay, measured from its first nonzero iterate.
    """
    rows = []
    for d in diffs:
        magnitude = np.abs(d.values)
        nonzero = np.flatnonzero(magnitude)
        exponent = np.nan
        if len(nonzero) and magnitude[-1] > 0 and nonzero[0] < len(magnitude) - 1:
            start = nonzero[0]
            exponent = float(np.log(magnitude[-1] / magnitude[start]) / (len(magnitude) - 1 - start))
        rows.append({'layer': d.connection.layer, 'to': d.connection.to,
                     'from': d.connection.source, 'exponent': exponent})
    frame = pd.DataFrame(rows, columns=['layer', 'to', 'from', 'exponent'])
    defined = frame['exponent'].dropna()
    fraction = float((defined > 0).mean()) if len(defined) else 0.0
    log.info(f"SDIC: {len(defined)} connections with a defined exponent, "
             f"{fraction:.1%} positive")
    return SDICSummary(frame, fraction, int(len(defined)))
