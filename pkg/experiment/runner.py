"""
Runner - executes strategy x seed cells of an experiment and records every
intermediate artifact under the config-hashed run directory
"""
import logging
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from analysis.causality import granger_frame
from analysis.chaos import lambda_frame
from analysis.diagnostics import (consistency, epsilon_closeness, esd_frame, explain, network_esd,
                                  network_model)
from common.errors import InvalidSpecError, LegcnetError
from common.protocol import pack_mask, pack_params, pack_trajectory
from experiment import artifacts
from experiment.artifacts import RunLayout, atomic_write_bytes, read_json, write_frame, write_json
from experiment.config import ExperimentConfig
from experiment.pruning import (AnalysisConfig, PruneStrategy, Strategy, analyze_replay, flops,
                                run_baseline, run_legcnet)
from network.datasets import (DataSplit, load_bundled, load_csv, load_idx, select_classes, split,
                              stratified_sample, synthetic)
from network.mlp import (DenseParams, LayerSpec, Mask, Network, TrainResult, init_params,
                         spec_from_params)
from network.trainer import train
from network.trajectory import AccuracySeries, TrajectoryStore

log = logging.getLogger("Runner")

STATUS_OK = "ok"
STATUS_FAILED = "failed"

# Train/test split is fixed across seeds; seeds vary the initialization only
SPLIT_SEED = 0


# ============================================================================
# Data / Network
# ============================================================================

def load_dataset(cfg: ExperimentConfig) -> DataSplit:
    ds = cfg.dataset
    if ds.kind == "csv":
        if ds.path is None:
            raise InvalidSpecError("[dataset] path is required for csv datasets")
        data = load_csv(ds.path, ds.label_column, ds.categorical, ds.drop, ds.delimiter, name=cfg.name)
    elif ds.kind == "idx":
        if ds.images is None or ds.labels is None:
            raise InvalidSpecError("[dataset] images and labels are required for idx datasets")
        data = load_idx(ds.images, ds.labels, ds.limit, name=cfg.name)
    elif ds.kind == "bundled":
        data = load_bundled(ds.bundled, ds.drop, name=cfg.name)
    else:
        data = synthetic(ds.synthetic, seed=SPLIT_SEED, n_samples=ds.n_samples)
    if ds.classes:
        data = select_classes(data, ds.classes)
    return split(data, ds.test_fraction, SPLIT_SEED, ds.normalization)


def layer_spec(cfg: ExperimentConfig, data: DataSplit) -> LayerSpec:
    return LayerSpec.for_classes(data.train.n_features, cfg.hidden, data.train.n_classes)


# ============================================================================
# Cells
# ============================================================================

@dataclass
class CellResult:
    seed: int
    strategy: Strategy
    row: Dict
    wall_clock: float = 0.0

    @property
    def ok(self):
        return self.row.get('status') == STATUS_OK


@dataclass
class SeedContext:
    """State shared by the cells of one seed; cells run sequentially"""
    cfg: ExperimentConfig
    data: DataSplit
    spec: LayerSpec
    seed: int
    layout: RunLayout
    params0: Optional[DenseParams] = None
    dense: Optional[TrainResult] = None
    dense_importance: Optional[np.ndarray] = None
    pruned_counts: Dict[Strategy, int] = field(default_factory=dict)

    def file(self, strategy, name):
        return self.layout.cell_file(self.seed, strategy, name)


def _base_row(ctx: SeedContext, strategy: Strategy):
    return {
        'dataset': ctx.cfg.name,
        'architecture': ctx.spec.label(),
        'hidden': list(ctx.cfg.hidden),
        'seed': ctx.seed,
        'strategy': strategy.value,
        'config_hash': ctx.cfg.config_hash,
        'status': STATUS_FAILED,
        'error': "",
    }


def _metrics(row, result: TrainResult, spec: LayerSpec, mask: Optional[Mask]):
    row.update({
        'flops_dense': spec.n_connections,
        'flops_sparse': flops(spec, mask),
        'epochs': result.epochs_run,
        'iterations': result.iterations,
        'converged': result.converged,
        'accuracy': result.accuracy,
        'f1': result.f1,
        'per_class_f1': list(result.per_class_f1),
    })


def _diagnostics(ctx: SeedContext, strategy: Strategy, result: TrainResult, mask: Optional[Mask]):
    """ESD per layer, SHAP importance and closeness to the dense network"""
    diag = ctx.cfg.diagnostics
    out = {}
    if diag.esd:
        reports = network_esd(result.final_params, mask, ctx.seed)
        write_json(ctx.file(strategy, artifacts.ESD_FILE), [r.to_dict() for r in reports])
        write_frame(ctx.file(strategy, artifacts.ESD_EIGENVALUES_FILE), esd_frame(reports),
                    float_format="%.17g")
        out['esd'] = [{'layer': r.layer, 'alpha': r.alpha, 'alpha_w': r.alpha_w, 'flags': r.flags}
                      for r in reports]

    sparse = Network(ctx.spec, result.final_params, mask if mask is not None else Mask.ones(ctx.spec))
    if strategy is not Strategy.DENSE:
        dense = Network(ctx.spec, ctx.dense.final_params, Mask.ones(ctx.spec))
        out['epsilon_closeness'] = epsilon_closeness(dense, sparse, ctx.data.test.features)

    if diag.shap and ctx.data.train.n_features >= 2:
        background = stratified_sample(ctx.data.train, diag.shap_background, ctx.seed).features
        samples = ctx.data.test.features[:diag.shap_explain]
        shap = explain(network_model(sparse), background, samples, n_samples=diag.shap_samples,
                       seed=ctx.seed)
        write_json(ctx.file(strategy, artifacts.SHAP_FILE), shap.to_dict())
        out['shap_importance'] = shap.importance.tolist()
        if strategy is Strategy.DENSE:
            ctx.dense_importance = shap.importance
        elif ctx.dense_importance is not None:
            score = consistency(ctx.dense_importance, shap.importance, diag.top_k)
            out['shap_spearman_rho'] = score.spearman_rho
            out['shap_topk_overlap'] = score.topk_overlap
    return out


def _save_params(path, params: DenseParams):
    atomic_write_bytes(path, pack_params(params.weights, params.biases))


def _save_store(path, store: TrajectoryStore):
    atomic_write_bytes(path, pack_trajectory(store.run_id, store.connections, store.iterations,
                                             store.values))


def _export_csv(ctx: SeedContext, strategy: Strategy, params: DenseParams, **stores):
    """Plain-CSV copies of the final layers and any trajectories, when the config asks for them"""
    if not ctx.cfg.export_csv:
        return
    directory = ctx.layout.cell_dir(ctx.seed, strategy) / artifacts.CSV_EXPORT_DIR
    params.to_csv(directory)
    for name, store in stores.items():
        store.to_csv(directory / f"{name}.csv")


def _run_dense(ctx: SeedContext, row):
    cfg = ctx.cfg.train_config(ctx.seed)
    ctx.params0 = init_params(ctx.spec, cfg)
    _save_params(ctx.file(Strategy.DENSE, artifacts.PARAMS0_FILE), ctx.params0)
    ctx.dense = train(ctx.spec, ctx.params0, None, ctx.data, cfg)
    _save_params(ctx.file(Strategy.DENSE, artifacts.FINAL_PARAMS_FILE), ctx.dense.final_params)
    _export_csv(ctx, Strategy.DENSE, ctx.dense.final_params)
    _metrics(row, ctx.dense, ctx.spec, None)
    row.update({'n_pruned': 0, 'pruned_fraction': 0.0})
    row.update(_diagnostics(ctx, Strategy.DENSE, ctx.dense, None))


def _record_prune(ctx, strategy, row, report, sparse, **stores):
    atomic_write_bytes(ctx.file(strategy, artifacts.MASK_FILE), pack_mask(report.mask.keep))
    write_json(ctx.file(strategy, artifacts.PRUNE_FILE), report.to_dict())
    _save_params(ctx.file(strategy, artifacts.FINAL_PARAMS_FILE), sparse.final_params)
    _export_csv(ctx, strategy, sparse.final_params, **stores)
    _metrics(row, sparse, ctx.spec, report.mask)
    row.update({'n_pruned': report.n_pruned, 'pruned_fraction': report.pruned_fraction,
                'safety_triggered': report.safety_triggered,
                'dense_epochs': ctx.dense.epochs_run})
    row.update(_diagnostics(ctx, strategy, sparse, report.mask))
    ctx.pruned_counts[strategy] = report.n_pruned


def _write_analysis(ctx, strategy, lambdas, accuracy: AccuracySeries, report, sdic):
    write_frame(ctx.file(strategy, artifacts.LAMBDA_FILE), lambda_frame(lambdas))
    # analyze re-reads these windows, so they must round-trip exactly
    write_frame(ctx.file(strategy, artifacts.ACCURACY_FILE), accuracy.to_frame(), float_format="%.17g")
    write_frame(ctx.file(strategy, artifacts.GRANGER_FILE), granger_frame(report.granger))
    write_frame(ctx.file(strategy, artifacts.SDIC_FILE), sdic.exponents)


def _run_legcnet(ctx: SeedContext, strategy: Strategy, row):
    cfg = ctx.cfg.train_config(ctx.seed)
    probe = ctx.cfg.probe_epochs if strategy is Strategy.LEGCNET_PT else None
    outcome = run_legcnet(ctx.data, ctx.spec, cfg, PruneStrategy(strategy, probe_epochs=probe),
                          ctx.cfg.analysis, ctx.params0)
    _save_store(ctx.file(strategy, artifacts.BASE_TRAJECTORY_FILE), outcome.base)
    _save_store(ctx.file(strategy, artifacts.PERT_TRAJECTORY_FILE), outcome.pert)
    _write_analysis(ctx, strategy, outcome.lambdas, outcome.accuracy, outcome.report, outcome.sdic)
    _record_prune(ctx, strategy, row, outcome.report, outcome.sparse,
                  base=outcome.base, pert=outcome.pert)
    row.update({
        'probe_epochs': outcome.probe_epochs,
        'n_windows': len(outcome.accuracy),
        'n_causal': sum(r.causal for r in outcome.report.granger),
        'pruned_gc_misclassification': outcome.report.n_pruned,
        'sdic_positive_fraction': outcome.sdic.positive_fraction,
    })


def _baseline_count(ctx: SeedContext):
    for source in (Strategy.LEGCNET_FT, Strategy.LEGCNET_PT):
        if source in ctx.pruned_counts:
            return ctx.pruned_counts[source]
    raise InvalidSpecError("Random and magnitude pruning need a completed LEGCNet cell "
                           "in the same seed to match its sparsity")


def _run_baseline(ctx: SeedContext, strategy: Strategy, row):
    cfg = ctx.cfg.train_config(ctx.seed)
    report, sparse = run_baseline(ctx.data, ctx.spec, cfg, PruneStrategy(strategy, seed=ctx.seed),
                                  _baseline_count(ctx), ctx.params0, ctx.dense)
    _record_prune(ctx, strategy, row, report, sparse)


def run_cell(ctx: SeedContext, strategy: Strategy) -> CellResult:
    """One strategy for one seed; any failure is recorded, never raised"""
    row = _base_row(ctx, strategy)
    start = time.perf_counter()
    try:
        if strategy is Strategy.DENSE:
            _run_dense(ctx, row)
        elif ctx.dense is None:
            raise InvalidSpecError("Dense run for this seed failed")
        elif strategy.is_legcnet:
            _run_legcnet(ctx, strategy, row)
        else:
            _run_baseline(ctx, strategy, row)
        row['status'] = STATUS_OK
        log.info(f"seed {ctx.seed} {strategy.value}: ok")
    except Exception as e:
        row['status'] = STATUS_FAILED
        row['error'] = f"{type(e).__name__}: {e}"
        log.error(f"seed {ctx.seed} {strategy.value}: failed ({row['error']})")
        log.debug(traceback.format_exc())
    write_json(ctx.file(strategy, artifacts.CELL_NAME), row)
    return CellResult(ctx.seed, strategy, row, time.perf_counter() - start)


def cell_order(strategies) -> List[Strategy]:
    """Dense first, then LEGCNet, then the baselines that reuse its pruned count"""
    wanted = set(strategies)
    if wanted - {Strategy.DENSE}:
        wanted.add(Strategy.DENSE)
    return [s for s in Strategy if s in wanted]


def run_seed(cfg: ExperimentConfig, data: DataSplit, seed, layout: RunLayout) -> List[CellResult]:
    ctx = SeedContext(cfg, data, layer_spec(cfg, data), seed, layout)
    return [run_cell(ctx, strategy) for strategy in cell_order(cfg.strategies)]


# ============================================================================
# Run
# ============================================================================

class ExperimentRunner:
    """Runs every seed of a config; seeds may run concurrently"""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.layout = RunLayout(cfg.run_dir)
        self.results: List[CellResult] = []

    def run(self) -> List[CellResult]:
        cfg = self.cfg
        log.info(f"Run {cfg.name} ({cfg.config_hash[:12]}) -> {self.layout.run_dir}")
        self.layout.run_dir.mkdir(parents=True, exist_ok=True)
        artifacts.atomic_write_text(self.layout.run_dir / "config.ini", cfg.canonical)
        data = load_dataset(cfg)
        started = time.perf_counter()

        if cfg.workers > 1 and len(cfg.seeds) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                per_seed = list(pool.map(lambda s: run_seed(cfg, data, s, self.layout), cfg.seeds))
        else:
            per_seed = [run_seed(cfg, data, s, self.layout) for s in cfg.seeds]
        self.results = [cell for cells in per_seed for cell in cells]

        self.write_manifest(time.perf_counter() - started)
        failed = [c for c in self.results if not c.ok]
        log.info(f"{len(self.results) - len(failed)}/{len(self.results)} cells succeeded")
        return self.results

    def write_manifest(self, total_seconds):
        cells = [{'seed': c.seed, 'strategy': c.strategy.value, 'status': c.row['status'],
                  'error': c.row['error'], 'wall_clock_seconds': c.wall_clock}
                 for c in self.results]
        write_json(self.layout.manifest_path, {
            'name': self.cfg.name,
            'config_hash': self.cfg.config_hash,
            'seeds': list(self.cfg.seeds),
            'strategies': [s.value for s in self.cfg.strategies],
            'wall_clock_seconds': total_seconds,
            'cells': cells,
            'checksums': self.layout.checksums(),
        })

    @property
    def all_ok(self):
        return all(c.ok for c in self.results)


# ============================================================================
# Stage Reruns
# ============================================================================

def _load_spec(layout, seed):
    return spec_from_params(DenseParams.load(layout.cell_file(seed, Strategy.DENSE, artifacts.PARAMS0_FILE)))


def analyze(cfg: ExperimentConfig, analysis: Optional[AnalysisConfig] = None) -> int:
    """
    Recompute exponents, Granger results and masks from stored trajectories
    and accuracy windows. Returns the number of cells that failed.
    """
    layout = RunLayout(cfg.run_dir)
    analysis = analysis or cfg.analysis
    failures = 0
    for seed in cfg.seeds:
        for strategy in (s for s in cell_order(cfg.strategies) if s.is_legcnet):
            try:
                spec = _load_spec(layout, seed)
                base = TrajectoryStore.load(layout.cell_file(seed, strategy, artifacts.BASE_TRAJECTORY_FILE), spec)
                pert = TrajectoryStore.load(layout.cell_file(seed, strategy, artifacts.PERT_TRAJECTORY_FILE), spec)
                accuracy = AccuracySeries.from_frame(
                    pd.read_csv(layout.cell_file(seed, strategy, artifacts.ACCURACY_FILE)))
                report, lambdas, windows, sdic = analyze_replay(
                    spec, base, pert, accuracy, analysis, strategy is Strategy.LEGCNET_PT)
                ctx = SeedContext(cfg, None, spec, seed, layout)
                _write_analysis(ctx, strategy, lambdas, windows, report, sdic)
                atomic_write_bytes(ctx.file(strategy, artifacts.MASK_FILE), pack_mask(report.mask.keep))
                write_json(ctx.file(strategy, artifacts.PRUNE_FILE), report.to_dict())
                log.info(f"seed {seed} {strategy.value}: reanalyzed, {report.n_pruned} pruned")
            except (LegcnetError, OSError) as e:
                failures += 1
                log.error(f"seed {seed} {strategy.value}: analysis failed ({e})")
    return failures


def diagnose(cfg: ExperimentConfig) -> int:
    """Recompute ESD and SHAP diagnostics from stored checkpoints into each cell record"""
    layout = RunLayout(cfg.run_dir)
    data = load_dataset(cfg)
    failures = 0
    for seed in cfg.seeds:
        ctx = SeedContext(cfg, data, layer_spec(cfg, data), seed, layout)
        for strategy in cell_order(cfg.strategies):
            cell_path = ctx.file(strategy, artifacts.CELL_NAME)
            try:
                row = read_json(cell_path)
                if row["status"] != STATUS_OK or (strategy is not Strategy.DENSE and ctx.dense is None):
                    continue
                final = DenseParams.load(ctx.file(strategy, artifacts.FINAL_PARAMS_FILE))
                mask = None
                if strategy is not Strategy.DENSE:
                    mask = Mask.load(ctx.file(strategy, artifacts.MASK_FILE))
                result = TrainResult(final, row['epochs'], [], row['accuracy'], row['f1'])
                if strategy is Strategy.DENSE:
                    ctx.dense = result
                row.update(_diagnostics(ctx, strategy, result, mask))
                write_json(cell_path, row)
                log.info(f"seed {seed} {strategy.value}: diagnostics updated")
            except (LegcnetError, OSError, KeyError) as e:
                failures += 1
                log.error(f"seed {seed} {strategy.value}: diagnostics failed ({e})")
    return failures
