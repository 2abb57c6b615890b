"""
Pruning - masks from Granger results and baseline heuristics, FLOP counts,
and the two LEGCNet drivers (full-training and partial-training probe)
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from analysis.causality import GrangerConfig, GrangerResult, granger_sweep
from analysis.chaos import EmbeddingConfig, LambdaSeries, SDICSummary, lambda_sweep, sdic_summary
from common.errors import (DimensionMismatchError, InvalidSpecError, ProbeTooShortError,
                           SeriesTooShortError)
from common.protocol import DEFAULT_WINDOW_LEN, MIN_WINDOW_LEN, PT_PROBE_FRACTION
from network.mlp import (DenseParams, LayerSpec, Mask, TrainConfig, TrainResult, init_params,
                         spec_from_params)
from network.trainer import train
from network.trajectory import (AccuracySeries, ConnectionId, DiffSeries, TrajectoryStore,
                                WindowAccuracyRecorder, all_connections, diff, replay,
                                sample_connections)

log = logging.getLogger("Pruning")


class Strategy(Enum):
    DENSE = "dense"
    LEGCNET_FT = "legcnet-ft"
    LEGCNET_PT = "legcnet-pt"
    RANDOM = "random"
    MAGNITUDE = "magnitude"

    @property
    def is_legcnet(self):
        return self in (Strategy.LEGCNET_FT, Strategy.LEGCNET_PT)


@dataclass(frozen=True)
class PruneStrategy:
    kind: Strategy
    probe_epochs: Optional[int] = None  # LEGCNet-PT; None means 10% of dense epochs
    seed: int = 0  # Random

    def __post_init__(self):
        if self.probe_epochs is not None and self.probe_epochs < 1:
            raise InvalidSpecError("probe_epochs must be >= 1")


@dataclass
class PruneReport:
    mask: Mask
    n_pruned: int
    pruned_fraction: float
    flops_dense: int
    flops_sparse: int
    granger: List[GrangerResult] = field(default_factory=list)
    safety_retained: List[ConnectionId] = field(default_factory=list)

    @property
    def safety_triggered(self):
        return bool(self.safety_retained)

    def to_dict(self):
        return {
            'n_pruned': self.n_pruned,
            'pruned_fraction': self.pruned_fraction,
            'flops_dense': self.flops_dense,
            'flops_sparse': self.flops_sparse,
            'safety_triggered': self.safety_triggered,
            'safety_retained': [c.label for c in self.safety_retained],
            'n_tested': len(self.granger),
            'n_causal': sum(r.causal for r in self.granger),
            'pruned_connections': [c.label for c in pruned_connections(self.mask)],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def flops(spec: LayerSpec, mask: Optional[Mask] = None) -> int:
    """Kept connections, biases excluded"""
    if mask is None:
        return spec.n_connections
    mask.check(spec)
    return mask.n_kept


def pruned_connections(mask: Mask) -> List[ConnectionId]:
    out = []
    for layer, keep in enumerate(mask.keep, start=1):
        for to, source in zip(*np.nonzero(keep == 0)):
            out.append(ConnectionId(layer, int(to) + 1, int(source) + 1))
    return out


# ============================================================================
# Mask Construction
# ============================================================================

def _retain(keep, priority, layer, rows=None):
    """Restore the highest-priority pruned entry (within `rows` if given)"""
    candidates = np.where(keep[layer] == 0, priority[layer], -np.inf)
    if rows is not None:
        candidates = candidates[rows:rows + 1]
    flat = int(np.argmax(candidates))
    to, source = np.unravel_index(flat, candidates.shape)
    if rows is not None:
        to = rows
    keep[layer][to, source] = 1
    return ConnectionId(layer + 1, int(to) + 1, int(source) + 1)


def enforce_safety(spec: LayerSpec, keep, priority) -> List[ConnectionId]:
    """
    No layer may lose every connection and no output neuron every incoming
    connection. Violations are repaired in place by retaining the pruned
    connection with the highest priority; returns the retained connections.
    """
    retained = []
    for i in range(spec.n_layers):
        if not keep[i].any():
            retained.append(_retain(keep, priority, i))
    out = spec.n_layers - 1
    for row in range(keep[out].shape[0]):
        if not keep[out][row].any():
            retained.append(_retain(keep, priority, out, rows=row))
    if retained:
        log.warning(f"Safety retention kept {len(retained)} connections: "
                    f"{', '.join(c.label for c in retained)}")
    return retained


def _report(spec, keep, granger=(), retained=()):
    mask = Mask(keep)
    sparse = flops(spec, mask)
    dense = spec.n_connections
    n_pruned = dense - sparse
    return PruneReport(mask, n_pruned, n_pruned / dense, dense, sparse, list(granger), list(retained))


def legcnet_mask(granger: Sequence[GrangerResult], spec: LayerSpec) -> PruneReport:
    """Prune exactly the connections whose exponent series Granger-causes misclassification"""
    keep = [k.copy() for k in Mask.ones(spec).keep]
    priority = [np.full(shape, -np.inf) for shape in spec.shapes]
    for r in granger:
        r.connection.check(spec)
        layer, to, source = r.connection.index
        priority[layer][to, source] = r.p_value
        if r.causal:
            keep[layer][to, source] = 0
    retained = enforce_safety(spec, keep, priority)
    report = _report(spec, keep, granger, retained)
    log.info(f"LEGCNet mask: {report.n_pruned}/{report.flops_dense} pruned "
             f"({report.pruned_fraction:.1%})")
    return report


def _check_n_prune(spec, n_prune):
    if not 0 <= n_prune <= spec.n_connections:
        raise InvalidSpecError(f"n_prune {n_prune} outside [0, {spec.n_connections}]")


def _keep_from_order(spec, order, n_prune):
    """Prune the first n_prune connections of `order` (flat indices across layers)"""
    flat_keep = np.ones(spec.n_connections, dtype=np.uint8)
    flat_keep[order[:n_prune]] = 0
    return [k.copy() for k in _unflatten(spec, flat_keep)]


def _unflatten(spec, flat):
    out, offset = [], 0
    for rows, cols in spec.shapes:
        out.append(flat[offset:offset + rows * cols].reshape(rows, cols))
        offset += rows * cols
    return out


def random_mask(spec: LayerSpec, n_prune, seed=0) -> PruneReport:
    """Uniformly random subset of n_prune connections"""
    _check_n_prune(spec, n_prune)
    order = np.random.default_rng(seed).permutation(spec.n_connections)
    keep = _keep_from_order(spec, order, n_prune)
    rank = np.empty(spec.n_connections)
    rank[order] = np.arange(spec.n_connections)
    retained = enforce_safety(spec, keep, _unflatten(spec, rank))
    return _report(spec, keep, retained=retained)


def magnitude_mask(params: DenseParams, n_prune, spec: Optional[LayerSpec] = None) -> PruneReport:
    """Smallest |w| globally; ties go to the lexicographically first (layer, to, from)"""
    spec = spec or spec_from_params(params)
    _check_n_prune(spec, n_prune)
    magnitude = np.concatenate([np.abs(w).ravel() for w in params.weights])
    # Flat order already is (layer, to, from) lexicographic; a stable sort keeps it for ties
    order = np.argsort(magnitude, kind='stable')
    keep = _keep_from_order(spec, order, n_prune)
    retained = enforce_safety(spec, keep, _unflatten(spec, magnitude))
    return _report(spec, keep, retained=retained)


# ============================================================================
# LEGCNet Drivers
# ============================================================================

@dataclass(frozen=True)
class AnalysisConfig:
    """Everything between the recorded runs and the Granger sweep"""
    window_len: int = DEFAULT_WINDOW_LEN
    embedding: EmbeddingConfig = EmbeddingConfig()
    granger: GrangerConfig = GrangerConfig()
    estimator: str = "rosenstein"
    series: str = "difference"  # or "raw"
    misclassification: str = "train"  # or "test"
    track_sample: Optional[int] = None  # None tracks every connection
    probe_fraction: float = PT_PROBE_FRACTION
    workers: int = 1

    def __post_init__(self):
        if self.window_len < MIN_WINDOW_LEN:
            raise InvalidSpecError(f"window_len must be >= {MIN_WINDOW_LEN}")
        if self.series not in ("difference", "raw"):
            raise InvalidSpecError(f"Unknown series source {self.series!r}")
        if self.misclassification not in ("train", "test"):
            raise InvalidSpecError(f"Unknown misclassification source {self.misclassification!r}")
        if not 0.0 < self.probe_fraction <= 1.0:
            raise InvalidSpecError("probe_fraction must lie in (0, 1]")

    def tracked(self, spec: LayerSpec, seed=0):
        if self.track_sample is None:
            return all_connections(spec)
        return sample_connections(spec, self.track_sample, seed)


@dataclass
class LegcnetOutcome:
    report: PruneReport
    sparse: TrainResult
    dense: TrainResult
    params0: DenseParams
    lambdas: List[LambdaSeries]
    accuracy: AccuracySeries
    sdic: SDICSummary
    base: TrajectoryStore
    pert: TrajectoryStore
    probe_epochs: Optional[int] = None


def default_probe_epochs(dense_epochs, fraction=PT_PROBE_FRACTION):
    return max(1, math.ceil(fraction * dense_epochs))


def analysis_series(base: TrajectoryStore, pert: TrajectoryStore, source) -> List[DiffSeries]:
    if source == "raw":
        return [DiffSeries(c, base.series(c).copy()) for c in base.connections]
    return diff(base, pert)


def run_legcnet(data, spec: LayerSpec, cfg: TrainConfig, strategy: PruneStrategy,
                analysis: AnalysisConfig = AnalysisConfig(),
                params0: Optional[DenseParams] = None) -> LegcnetOutcome:
    """
    Dense recorded run, perturbed replay, windowed exponents, Granger sweep,
    prune, then retrain the sparse network from params0 with the same seed
    and hyperparameters.
    """
    if not strategy.kind.is_legcnet:
        raise InvalidSpecError(f"run_legcnet needs a LEGCNet strategy, got {strategy.kind.value}")
    params0 = params0 if params0 is not None else init_params(spec, cfg)
    partial = strategy.kind is Strategy.LEGCNET_PT

    probe = None
    if partial:
        probe = strategy.probe_epochs or (
            lambda result: default_probe_epochs(result.epochs_run, analysis.probe_fraction))

    accuracy = WindowAccuracyRecorder(spec, data, analysis.window_len)
    r = replay(spec, params0, data, cfg, tracked=analysis.tracked(spec, cfg.seed),
               probe_epochs=probe, base_sinks=[accuracy], run_id=strategy.kind.value)

    report, lambdas, windows, sdic = analyze_replay(spec, r.base, r.pert, accuracy.series(),
                                                    analysis, partial)
    sparse = train(spec, params0, report.mask, data, cfg)
    log.info(f"{strategy.kind.value}: dense acc={r.base_result.accuracy:.4f} "
             f"({r.base_result.epochs_run} epochs), sparse acc={sparse.accuracy:.4f} "
             f"({sparse.epochs_run} epochs), {report.n_pruned} pruned")
    return LegcnetOutcome(report, sparse, r.base_result, params0, lambdas, windows, sdic,
                          r.base, r.pert, r.probe_epochs)


def analyze_replay(spec: LayerSpec, base: TrajectoryStore, pert: TrajectoryStore,
                   accuracy: AccuracySeries, analysis: AnalysisConfig = AnalysisConfig(),
                   partial=False):
    """
    Windowed exponents, Granger sweep and mask from recorded stores.
    Returns (report, lambdas, accuracy windows, sdic).
    """
    n_iterations = base.n_iterations
    k = n_iterations // analysis.window_len
    if k < analysis.granger.min_series_len:
        msg = (f"{n_iterations} iterates give {k} windows of {analysis.window_len}; "
               f"Granger test needs {analysis.granger.min_series_len}. "
               f"Use a smaller window or more {'probe ' if partial else ''}epochs")
        if partial:
            raise ProbeTooShortError(msg)
        raise SeriesTooShortError(msg)
    if len(accuracy) < k:
        raise DimensionMismatchError(f"{len(accuracy)} accuracy windows for {k} trajectory windows")

    series = analysis_series(base, pert, analysis.series)
    sdic = sdic_summary(diff(base, pert))
    lambdas = lambda_sweep(series, analysis.window_len, analysis.embedding, analysis.estimator,
                           analysis.workers)
    windows = accuracy.truncate(k)
    granger = granger_sweep(lambdas, windows.misclassification(analysis.misclassification),
                            analysis.granger, analysis.workers)
    return legcnet_mask(granger, spec), lambdas, windows, sdic


def run_baseline(data, spec: LayerSpec, cfg: TrainConfig, strategy: PruneStrategy, n_prune,
                 params0: DenseParams, dense: TrainResult):
    """Random or magnitude mask at matched sparsity, retrained from params0"""
    if strategy.kind is Strategy.RANDOM:
        report = random_mask(spec, n_prune, strategy.seed)
    elif strategy.kind is Strategy.MAGNITUDE:
        report = magnitude_mask(dense.final_params, n_prune, spec)
    else:
        raise InvalidSpecError(f"{strategy.kind.value} is not a baseline strategy")
    sparse = train(spec, params0, report.mask, data, cfg)
    log.info(f"{strategy.kind.value}: {report.n_pruned} pruned, sparse acc={sparse.accuracy:.4f} "
             f"({sparse.epochs_run} epochs)")
    return report, sparse
