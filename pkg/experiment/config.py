"""
Experiment Config - INI experiment files, defaults and the config hash
"""
import configparser
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from analysis.causality import GrangerConfig
from analysis.chaos import EmbeddingConfig
from common.errors import ConfigError, LegcnetError
from common.protocol import (DEFAULT_ALPHA, DEFAULT_BATCH_SIZE, DEFAULT_CONVERGENCE_TOL,
                             DEFAULT_EMBED_DELAY, DEFAULT_EMBED_DIM, DEFAULT_FIT_RANGE,
                             DEFAULT_INIT_SIGMA, DEFAULT_LEARNING_RATE, DEFAULT_MAX_EPOCHS,
                             DEFAULT_MAX_LAG, DEFAULT_MIN_NEIGHBORS, DEFAULT_MIN_SERIES_LEN,
                             DEFAULT_PATIENCE, DEFAULT_PERTURBATION, DEFAULT_SHAP_BACKGROUND,
                             DEFAULT_SHAP_EXPLAIN, DEFAULT_THEILER_WINDOW, DEFAULT_TOP_K,
                             DEFAULT_WINDOW_LEN, PT_PROBE_FRACTION)
from experiment.pruning import AnalysisConfig, Strategy
from network.mlp import InitScheme, TrainConfig

CONFIG_HASH_LENGTH = 12

# Keys left out of the config hash; the run directory is not part of an experiment
UNHASHED_KEYS = {('experiment', 'output_dir')}

# section -> key -> default (as text); also the canonical key order for hashing
DEFAULTS = {
    'experiment': {
        'name': 'experiment',
        'seeds': '0',
        'strategies': 'dense,legcnet-ft,legcnet-pt,random,magnitude',
        'output_dir': 'out',
        'workers': '1',
        'export_csv': 'no',
    },
    'dataset': {
        'kind': 'csv',
        'path': '',
        'label_column': 'label',
        'categorical': '',
        'drop': '',
        'classes': '',
        'delimiter': ',',
        'images': '',
        'labels': '',
        'limit': '',
        'bundled': 'iris',
        'synthetic': 'blobs',
        'n_samples': '200',
        'test_fraction': '0.2',
        'normalization': 'zscore',
    },
    'network': {
        'hidden': '6',
    },
    'training': {
        'learning_rate': str(DEFAULT_LEARNING_RATE),
        'batch_size': str(DEFAULT_BATCH_SIZE),
        'max_epochs': str(DEFAULT_MAX_EPOCHS),
        'convergence_tol': str(DEFAULT_CONVERGENCE_TOL),
        'patience': str(DEFAULT_PATIENCE),
        'init': 'uniform',
        'init_sigma': str(DEFAULT_INIT_SIGMA),
        'perturbation_delta': str(DEFAULT_PERTURBATION),
    },
    'chaos': {
        'window_len': str(DEFAULT_WINDOW_LEN),
        'embed_dim': str(DEFAULT_EMBED_DIM),
        'delay': str(DEFAULT_EMBED_DELAY),
        'theiler_window': str(DEFAULT_THEILER_WINDOW),
        'fit_min': str(DEFAULT_FIT_RANGE[0]),
        'fit_max': str(DEFAULT_FIT_RANGE[1]),
        'min_neighbors': str(DEFAULT_MIN_NEIGHBORS),
        'estimator': 'rosenstein',
        'series': 'difference',
        'track_sample': '',
    },
    'granger': {
        'max_lag': str(DEFAULT_MAX_LAG),
        'lag_selection': 'bic',
        'fixed_lag': '1',
        'alpha': str(DEFAULT_ALPHA),
        'min_series_len': str(DEFAULT_MIN_SERIES_LEN),
        'misclassification': 'train',
    },
    'pruning': {
        'probe_epochs': '',
        'probe_fraction': str(PT_PROBE_FRACTION),
    },
    'diagnostics': {
        'esd': 'yes',
        'shap': 'yes',
        'shap_background': str(DEFAULT_SHAP_BACKGROUND),
        'shap_explain': str(DEFAULT_SHAP_EXPLAIN),
        'shap_samples': '',
        'top_k': str(DEFAULT_TOP_K),
    },
}


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "csv"  # csv, idx, bundled or synthetic
    path: Optional[Path] = None
    label_column: str = "label"
    categorical: Tuple[str, ...] = ()
    drop: Tuple[str, ...] = ()
    classes: Tuple[str, ...] = ()
    delimiter: str = ","
    images: Optional[Path] = None
    labels: Optional[Path] = None
    limit: Optional[int] = None
    bundled: str = "iris"
    synthetic: str = "blobs"
    n_samples: int = 200
    test_fraction: float = 0.2
    normalization: str = "zscore"


@dataclass(frozen=True)
class DiagnosticsConfig:
    esd: bool = True
    shap: bool = True
    shap_background: int = DEFAULT_SHAP_BACKGROUND
    shap_explain: int = DEFAULT_SHAP_EXPLAIN
    shap_samples: Optional[int] = None
    top_k: int = DEFAULT_TOP_K


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    dataset: DatasetConfig
    hidden: Tuple[int, ...]
    training: TrainConfig
    analysis: AnalysisConfig
    diagnostics: DiagnosticsConfig
    strategies: Tuple[Strategy, ...]
    seeds: Tuple[int, ...]
    output_dir: Path
    workers: int = 1
    probe_epochs: Optional[int] = None
    export_csv: bool = False
    canonical: str = field(default="", compare=False)
    fingerprint: str = field(default="", compare=False)

    @property
    def config_hash(self):
        return hashlib.sha256(self.fingerprint.encode('utf-8')).hexdigest()

    @property
    def run_dir(self) -> Path:
        return self.output_dir / f"{self.name}-{self.config_hash[:CONFIG_HASH_LENGTH]}"

    def train_config(self, seed) -> TrainConfig:
        return replace(self.training, seed=seed)


# ============================================================================
# Parsing
# ============================================================================

def _split(text) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _optional_int(text):
    return int(text) if text.strip() else None


def _flag(text):
    return text.strip().lower() in ("yes", "true", "1", "on")


def _resolve(base: Path, text) -> Optional[Path]:
    if not text.strip():
        return None
    path = Path(text)
    return path if path.is_absolute() else (base / path)


def parse_strategies(names: Sequence[str]) -> Tuple[Strategy, ...]:
    try:
        strategies = tuple(Strategy(name) for name in names)
    except ValueError as e:
        raise ConfigError(f"{e}; choose from {[s.value for s in Strategy]}") from e
    if not strategies:
        raise ConfigError("At least one strategy is required")
    return strategies


def canonical_text(values, exclude=frozenset()) -> str:
    """Sorted section/key rendering of fully defaulted values"""
    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        for key in sorted(values[section]):
            if (section, key) in exclude:
                continue
            lines.append(f"{key} = {values[section][key]}")
    return "\n".join(lines) + "\n"


def _merged(parser, overrides):
    unknown = [s for s in parser.sections() if s not in DEFAULTS]
    if unknown:
        raise ConfigError(f"Unknown config sections: {unknown}")
    values = {}
    for section, defaults in DEFAULTS.items():
        values[section] = dict(defaults)
        if parser.has_section(section):
            for key, value in parser.items(section):
                if key not in defaults:
                    raise ConfigError(f"Unknown key {key!r} in [{section}]")
                values[section][key] = value.strip()
    for (section, key), value in overrides.items():
        values[section][key] = value
    return values


def build_config(values, base: Path) -> ExperimentConfig:
    exp, ds, net = values['experiment'], values['dataset'], values['network']
    tr, ch, gr = values['training'], values['chaos'], values['granger']
    pr, dg = values['pruning'], values['diagnostics']

    dataset = DatasetConfig(
        kind=ds['kind'], path=_resolve(base, ds['path']), label_column=ds['label_column'],
        categorical=tuple(_split(ds['categorical'])), drop=tuple(_split(ds['drop'])),
        classes=tuple(_split(ds['classes'])),
        delimiter=ds['delimiter'], images=_resolve(base, ds['images']),
        labels=_resolve(base, ds['labels']), limit=_optional_int(ds['limit']),
        bundled=ds['bundled'], synthetic=ds['synthetic'], n_samples=int(ds['n_samples']),
        test_fraction=float(ds['test_fraction']), normalization=ds['normalization'])
    if dataset.kind not in ("csv", "idx", "bundled", "synthetic"):
        raise ConfigError(f"Unknown dataset kind {dataset.kind!r}")

    training = TrainConfig(
        learning_rate=float(tr['learning_rate']), batch_size=int(tr['batch_size']),
        max_epochs=int(tr['max_epochs']), convergence_tol=float(tr['convergence_tol']),
        patience=int(tr['patience']), init=InitScheme(tr['init']),
        init_sigma=float(tr['init_sigma']), perturbation_delta=float(tr['perturbation_delta']))

    analysis = AnalysisConfig(
        window_len=int(ch['window_len']),
        embedding=EmbeddingConfig(int(ch['embed_dim']), int(ch['delay']), int(ch['theiler_window']),
                                  (int(ch['fit_min']), int(ch['fit_max'])), int(ch['min_neighbors'])),
        granger=GrangerConfig(int(gr['max_lag']), gr['lag_selection'], int(gr['fixed_lag']),
                              float(gr['alpha']), int(gr['min_series_len'])),
        estimator=ch['estimator'], series=ch['series'], misclassification=gr['misclassification'],
        track_sample=_optional_int(ch['track_sample']),
        probe_fraction=float(pr['probe_fraction']), workers=int(exp['workers']))

    diagnostics = DiagnosticsConfig(
        esd=_flag(dg['esd']), shap=_flag(dg['shap']),
        shap_background=int(dg['shap_background']), shap_explain=int(dg['shap_explain']),
        shap_samples=_optional_int(dg['shap_samples']), top_k=int(dg['top_k']))

    seeds = tuple(int(s) for s in _split(exp['seeds']))
    if not seeds:
        raise ConfigError("At least one seed is required")

    return ExperimentConfig(
        name=exp['name'], dataset=dataset, hidden=tuple(int(h) for h in _split(net['hidden'])),
        training=training, analysis=analysis, diagnostics=diagnostics,
        strategies=parse_strategies(_split(exp['strategies'])), seeds=seeds,
        output_dir=_resolve(Path.cwd(), exp['output_dir']), workers=int(exp['workers']),
        probe_epochs=_optional_int(pr['probe_epochs']), export_csv=_flag(exp['export_csv']),
        canonical=canonical_text(values),
        fingerprint=canonical_text(values, UNHASHED_KEYS))


def load_config(path, overrides=None) -> ExperimentConfig:
    """
    Parse an INI experiment file; overrides maps (section, key) -> text and
    takes part in the config hash, output_dir excepted.
    """
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e

    values = _merged(parser, overrides or {})
    try:
        return build_config(values, path.parent)
    except ConfigError:
        raise
    except (LegcnetError, ValueError, KeyError) as e:
        raise ConfigError(f"Invalid config {path}: {e}") from e


def cli_overrides(out=None, seeds=None, strategies=None, workers=None):
    overrides = {}
    if out is not None:
        overrides[('experiment', 'output_dir')] = str(out)
    if seeds is not None:
        overrides[('experiment', 'seeds')] = ",".join(str(s) for s in seeds)
    if strategies:
        overrides[('experiment', 'strategies')] = ",".join(strategies)
    if workers is not None:
        overrides[('experiment', 'workers')] = str(workers)
    return overrides
