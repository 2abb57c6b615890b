"""
Diagnostics - spectral (ESD power-law) analysis of weight matrices, Kernel
SHAP feature attributions and their cross-model consistency, and the
dense/sparse output gap
"""
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import comb, factorial
from scipy.stats import spearmanr

from common.errors import (DimensionMismatchError, InsufficientDataError, InvalidSpecError,
                           SingularKernelError)
from common.protocol import (ALPHA_BAND, CORRELATION_TRAP_FACTOR, DEFAULT_TOP_K,
                             MIN_ESD_EIGENVALUES, MIN_TAIL_POINTS, SHAP_EXACT_MAX_FEATURES)
from network.mlp import DenseParams, Mask, Network, effective_weights

log = logging.getLogger("Diagnostics")

FLAG_LOW_TAIL = "low_tail"
FLAG_OUT_OF_BAND = "out_of_band"
FLAG_TOO_FEW = "too_few_eigenvalues"

# Relative round-off floor for W W^T eigenvalues
EIGEN_TOL = 1e-10


# ============================================================================
# Empirical Spectral Density
# ============================================================================

def esd(weights) -> np.ndarray:
    """
    Ascending eigenvalues of W W^T / N with N the larger dimension. Round-off
    values relative to the largest (tiny negatives included) clamp to 0.
    """
    W = np.asarray(weights, dtype=np.float64)
    if W.size == 0:
        raise InvalidSpecError("Empty weight matrix")
    if not np.all(np.isfinite(W)):
        raise InvalidSpecError("Weight matrix has non-finite entries")
    eigenvalues = linalg.eigvalsh(W @ W.T / max(W.shape))
    eigenvalues[eigenvalues <= EIGEN_TOL * np.max(np.abs(eigenvalues))] = 0.0
    return np.sort(eigenvalues)


def marchenko_pastur_edge(weights) -> float:
    """Upper bulk edge sigma^2 (1 + sqrt(q))^2 for an i.i.d. matrix of the same shape and variance"""
    W = np.asarray(weights, dtype=np.float64)
    q = min(W.shape) / max(W.shape)
    return float(np.var(W) * (1.0 + np.sqrt(q)) ** 2)


@dataclass
class PowerLawFit:
    alpha: float
    xmin: float
    ks_distance: float
    n_tail: int


def _ks_distance(tail, xmin, alpha):
    n = len(tail)
    fitted = 1.0 - (tail / xmin) ** (1.0 - alpha)
    upper = np.arange(1, n + 1) / n
    lower = np.arange(0, n) / n
    return float(max(np.max(upper - fitted), np.max(fitted - lower)))


def power_law_mle(values, min_tail=2) -> PowerLawFit:
    """
    Continuous power-law fit: for every candidate xmin the MLE
    alpha = 1 + n / sum(ln(x / xmin)), keeping the xmin with the smallest
    Kolmogorov-Smirnov distance.
    """
    x = np.sort(np.asarray(values, dtype=np.float64))
    x = x[x > 0]
    best = None
    for xmin in np.unique(x)[:-1]:
        tail = x[x >= xmin]
        if len(tail) < min_tail:
            break
        total = np.sum(np.log(tail / xmin))
        if total <= 0:
            continue
        alpha = 1.0 + len(tail) / total
        d = _ks_distance(tail, xmin, alpha)
        if best is None or d < best.ks_distance:
            best = PowerLawFit(float(alpha), float(xmin), d, len(tail))
    if best is None:
        raise InsufficientDataError("No xmin candidate admits a power-law fit")
    return best


@dataclass
class ESDReport:
    layer: int
    eigenvalues: np.ndarray
    alpha: float
    xmin: float
    lambda_max: float
    alpha_w: float
    ks_distance: float
    n_tail: int = 0
    flags: List[str] = field(default_factory=list)
    shuffled_eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mp_edge: float = float("nan")
    correlation_trap: bool = False

    @property
    def in_band(self):
        return bool(ALPHA_BAND[0] <= self.alpha <= ALPHA_BAND[1])

    def to_dict(self):
        return {
            'layer': self.layer,
            'alpha': self.alpha,
            'alpha_w': self.alpha_w,
            'xmin': self.xmin,
            'lambda_max': self.lambda_max,
            'ks_distance': self.ks_distance,
            'n_tail': self.n_tail,
            'flags': list(self.flags),
            'mp_edge': self.mp_edge,
            # heuristic
            'correlation_trap': self.correlation_trap,
            'n_eigenvalues': int(len(self.eigenvalues)),
            'eigenvalues': np.asarray(self.eigenvalues, dtype=np.float64).tolist(),
            'shuffled_eigenvalues': np.asarray(self.shuffled_eigenvalues, dtype=np.float64).tolist(),
        }


def fit_power_law(eigenvalues, layer=0) -> ESDReport:
    """Power-law fit of an ESD tail; alpha_w = alpha * log10(lambda_max)"""
    eigenvalues = np.sort(np.asarray(eigenvalues, dtype=np.float64))
    positive = eigenvalues[eigenvalues > 0]
    if len(positive) < MIN_ESD_EIGENVALUES:
        raise InsufficientDataError(
            f"{len(positive)} positive eigenvalues; a power-law fit needs {MIN_ESD_EIGENVALUES}")
    fit = power_law_mle(positive)
    lambda_max = float(positive[-1])
    flags = []
    if fit.n_tail < MIN_TAIL_POINTS:
        flags.append(FLAG_LOW_TAIL)
    report = ESDReport(layer, eigenvalues, fit.alpha, fit.xmin, lambda_max,
                       fit.alpha * np.log10(lambda_max), fit.ks_distance, fit.n_tail, flags)
    if not report.in_band:
        report.flags.append(FLAG_OUT_OF_BAND)
    return report


def layer_esd(weights, layer, seed=0) -> ESDReport:
    """ESD fit plus the element-shuffled overlay and the correlation-trap heuristic"""
    W = np.asarray(weights, dtype=np.float64)
    eigenvalues = esd(W)
    try:
        report = fit_power_law(eigenvalues, layer)
    except InsufficientDataError as e:
        log.debug(f"Layer {layer}: {e}")
        positive = eigenvalues[eigenvalues > 0]
        lambda_max = float(positive[-1]) if len(positive) else 0.0
        report = ESDReport(layer, eigenvalues, float("nan"), float("nan"), lambda_max,
                           float("nan"), float("nan"), 0, [FLAG_TOO_FEW])

    shuffled = np.random.default_rng(seed).permutation(W.ravel()).reshape(W.shape)
    report.shuffled_eigenvalues = esd(shuffled)
    report.mp_edge = marchenko_pastur_edge(W)
    report.correlation_trap = bool(report.mp_edge > 0 and
                                   report.shuffled_eigenvalues[-1] > CORRELATION_TRAP_FACTOR * report.mp_edge)
    return report


def network_esd(params: DenseParams, mask: Optional[Mask] = None, seed=0) -> List[ESDReport]:
    reports = []
    for i, W in enumerate(effective_weights(params, mask), start=1):
        report = layer_esd(W, i, seed)
        reports.append(report)
        if FLAG_OUT_OF_BAND in report.flags:
            log.warning(f"Layer {i}: alpha={report.alpha:.2f} outside {ALPHA_BAND}")
        if FLAG_LOW_TAIL in report.flags:
            log.warning(f"Layer {i}: only {report.n_tail} tail eigenvalues")
    return reports


def esd_frame(reports: List[ESDReport]) -> pd.DataFrame:
    """Long-format eigenvalue lists, actual and shuffled, one row per eigenvalue"""
    parts = []
    for report in reports:
        for matrix, values in (('actual', report.eigenvalues), ('shuffled', report.shuffled_eigenvalues)):
            parts.append(pd.DataFrame({'layer': report.layer, 'matrix': matrix,
                                       'index': np.arange(len(values)),
                                       'eigenvalue': np.asarray(values, dtype=np.float64)}))
    if not parts:
        return pd.DataFrame(columns=['layer', 'matrix', 'index', 'eigenvalue'])
    return pd.concat(parts, ignore_index=True)


# ============================================================================
# Kernel SHAP
# ============================================================================

@dataclass
class ShapReport:
    importance: np.ndarray  # mean |phi| per feature
    values: np.ndarray  # (samples, outputs, features)
    expected_value: np.ndarray  # phi_0 per output
    background_size: int
    n_coalition_samples: int
    exact: bool

    def to_dict(self):
        return {
            'importance': self.importance.tolist(),
            'expected_value': self.expected_value.tolist(),
            'background_size': self.background_size,
            'n_coalition_samples': self.n_coalition_samples,
            'exact': self.exact,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _as_outputs(y):
    y = np.asarray(y, dtype=np.float64)
    return y[:, np.newaxis] if y.ndim == 1 else y


def _coalition_values(model, background, x, coalitions):
    """v(S) = mean over background of f(x_S, b_notS), one row per coalition"""
    n_bg = len(background)
    stacked = np.tile(background, (len(coalitions), 1))
    member = np.repeat(coalitions.astype(bool), n_bg, axis=0)
    stacked = np.where(member, np.tile(x, (len(stacked), 1)), stacked)
    out = _as_outputs(model(stacked))
    return out.reshape(len(coalitions), n_bg, -1).mean(axis=1)


def shapley_kernel_weight(m, s):
    """(M - 1) / (C(M, s) s (M - s))"""
    return (m - 1) / (comb(m, s) * s * (m - s))


def exact_shapley(model, background, x):
    """Brute-force Shapley values of the background-averaged game; returns (phi, phi0)"""
    m = len(x)
    coalitions = np.array(list(itertools.product([0, 1], repeat=m)), dtype=np.uint8)
    values = _coalition_values(model, background, x, coalitions)
    index = {tuple(c): k for k, c in enumerate(coalitions)}
    phi = np.zeros((values.shape[1], m))
    for i in range(m):
        for k, c in enumerate(coalitions):
            if c[i]:
                continue
            s = int(c.sum())
            weight = factorial(s) * factorial(m - s - 1) / factorial(m)
            with_i = c.copy()
            with_i[i] = 1
            phi[:, i] += weight * (values[index[tuple(with_i)]] - values[k])
    return phi, values[index[(0,) * m]]


def _sample_coalitions(m, n_samples, rng):
    """All non-trivial coalitions if the budget allows, else kernel-distributed samples with complements"""
    if n_samples >= 2 ** m - 2:
        coalitions = np.array([c for c in itertools.product([0, 1], repeat=m) if 0 < sum(c) < m],
                              dtype=np.uint8)
        weights = np.array([shapley_kernel_weight(m, int(c.sum())) for c in coalitions])
        return coalitions, weights

    sizes = np.arange(1, m)
    size_probs = (m - 1) / (sizes * (m - sizes))
    size_probs /= size_probs.sum()
    coalitions = []
    while len(coalitions) < n_samples:
        s = rng.choice(sizes, p=size_probs)
        c = np.zeros(m, dtype=np.uint8)
        c[rng.choice(m, size=s, replace=False)] = 1
        coalitions.append(c)
        coalitions.append(1 - c)
    coalitions = np.array(coalitions[:n_samples])
    # sampled in proportion to the kernel, so each draw carries equal weight
    return coalitions, np.ones(len(coalitions))


def _constrained_wls(coalitions, weights, y, total):
    """Weighted least squares with sum(phi) = total, by eliminating the last feature"""
    z = coalitions.astype(np.float64)
    last = z[:, -1]
    X = z[:, :-1] - last[:, None]
    target = y - last * total
    sqrt_w = np.sqrt(weights)
    coef, _, rank, _ = linalg.lstsq(sqrt_w[:, None] * X, sqrt_w * target)
    if rank < X.shape[1]:
        raise SingularKernelError(
            f"Kernel system rank {rank} < {X.shape[1]}; increase the number of coalition samples")
    return np.append(coef, total - coef.sum())


def kernel_shap(model: Callable, background, x, n_samples=None, seed=0):
    """
    Kernel SHAP attribution of one sample. Returns (phi[outputs, features], phi0[outputs]).
    Missing features are imputed by averaging over the background.
    """
    background = np.asarray(background, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(background) == 0:
        raise InvalidSpecError("Background set is empty")
    if background.shape[1] != len(x):
        raise DimensionMismatchError(f"Background has {background.shape[1]} features, sample {len(x)}")
    m = len(x)
    n_samples = n_samples if n_samples is not None else 2 * m + 2048
    if n_samples < 2 * m + 2:
        raise InvalidSpecError(f"n_samples must be >= {2 * m + 2}")

    ends = _coalition_values(model, background, x, np.array([np.zeros(m), np.ones(m)], dtype=np.uint8))
    phi0, fx = ends[0], ends[1]
    if m == 1:
        return (fx - phi0)[:, None], phi0

    coalitions, weights = _sample_coalitions(m, n_samples, np.random.default_rng(seed))
    values = _coalition_values(model, background, x, coalitions)
    phi = np.vstack([_constrained_wls(coalitions, weights, values[:, j] - phi0[j], fx[j] - phi0[j])
                     for j in range(values.shape[1])])
    return phi, phi0


def explain(model: Callable, background, samples, exact: Optional[bool] = None,
            n_samples=None, seed=0) -> ShapReport:
    """SHAP values for every sample; exact enumeration up to SHAP_EXACT_MAX_FEATURES features"""
    samples = np.asarray(samples, dtype=np.float64)
    m = samples.shape[1]
    exact = m <= SHAP_EXACT_MAX_FEATURES if exact is None else exact
    values, phi0 = [], None
    for i, x in enumerate(samples):
        if exact:
            phi, phi0 = exact_shapley(model, background, x)
        else:
            phi, phi0 = kernel_shap(model, background, x, n_samples, seed + i)
        values.append(phi)
    values = np.array(values)
    importance = np.abs(values).mean(axis=(0, 1))
    n_coalitions = 2 ** m if exact else (n_samples or 2 * m + 2048)
    log.debug(f"SHAP over {len(samples)} samples, {m} features ({'exact' if exact else 'kernel'})")
    return ShapReport(importance, values, np.asarray(phi0), len(background), n_coalitions, exact)


def network_model(network: Network):
    """Network outputs as the explained function (one column per output unit)"""
    return lambda X: _as_outputs(network.predict(X))


# ============================================================================
# Consistency / Closeness
# ============================================================================

@dataclass
class ConsistencyScore:
    spearman_rho: float
    topk_overlap: float


def top_k(importance, k=DEFAULT_TOP_K):
    """Indices of the k largest importances; ties go to the lower feature index"""
    return set(np.argsort(-np.asarray(importance, dtype=np.float64), kind='stable')[:k].tolist())


def consistency(imp_a, imp_b, k=DEFAULT_TOP_K) -> ConsistencyScore:
    imp_a = np.asarray(imp_a, dtype=np.float64)
    imp_b = np.asarray(imp_b, dtype=np.float64)
    if len(imp_a) != len(imp_b):
        raise DimensionMismatchError("Importance vectors differ in length")
    if len(imp_a) < 2:
        raise InvalidSpecError("Consistency needs at least two features")
    constant_a, constant_b = np.ptp(imp_a) == 0, np.ptp(imp_b) == 0
    if constant_a or constant_b:
        # a constant vector has no ranking
        rho = 1.0 if constant_a and constant_b else 0.0
    else:
        rho = spearmanr(imp_a, imp_b)[0]
    k = min(k, len(imp_a))
    overlap = len(top_k(imp_a, k) & top_k(imp_b, k)) / k
    return ConsistencyScore(float(rho), float(overlap))


def epsilon_closeness(dense: Network, sparse: Network, inputs) -> float:
    """sup over inputs of ||f_sparse(x) - f_dense(x)||_2"""
    if dense.spec != sparse.spec:
        raise DimensionMismatchError(f"Spec mismatch: {dense.spec.label()} vs {sparse.spec.label()}")
    gap = _as_outputs(sparse.predict(inputs)) - _as_outputs(dense.predict(inputs))
    return float(np.max(np.linalg.norm(gap, axis=1)))
