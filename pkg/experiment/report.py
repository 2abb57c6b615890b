"""
Report - comparison tables built from the recorded cell rows
T1: dense vs LEGCNet-FT, T2: LEGCNet-FT vs LEGCNet-PT, T3: random and
magnitude baselines, T4: per-layer ESD alpha / alpha_w per model
"""
import logging
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from common.errors import InvalidSpecError, MissingRowsError
from experiment.artifacts import RunLayout, read_json, write_frame
from experiment.pruning import Strategy

log = logging.getLogger("Report")

TABLES = ("T1", "T2", "T3", "T4")
VARIANTS = ("median", "best", "seeds")

MODEL_NAMES = {
    Strategy.DENSE: "Dense",
    Strategy.LEGCNET_FT: "LEGCNet-FT",
    Strategy.LEGCNET_PT: "LEGCNet-PT",
    Strategy.RANDOM: "Random",
    Strategy.MAGNITUDE: "Magnitude",
}

# (header, strategy, row field, scale)
T1_COLUMNS = [
    ("Flops - DN", Strategy.DENSE, 'flops_sparse', 1),
    ("Flops - LEGCNet-FT", Strategy.LEGCNET_FT, 'flops_sparse', 1),
    ("Non causal Weights", Strategy.LEGCNET_FT, 'n_pruned', 1),
    ("Epochs DN", Strategy.DENSE, 'epochs', 1),
    ("Epochs LEGCNet-FT", Strategy.LEGCNET_FT, 'epochs', 1),
    ("Accuracy DN", Strategy.DENSE, 'accuracy', 1),
    ("Accuracy LEGCNet-FT", Strategy.LEGCNET_FT, 'accuracy', 1),
    ("F1-score DN", Strategy.DENSE, 'f1', 1),
    ("F1-score LEGCNet-FT", Strategy.LEGCNET_FT, 'f1', 1),
    ("%Pruned LEGCNet-FT", Strategy.LEGCNET_FT, 'pruned_fraction', 100),
]

T2_COLUMNS = [
    ("Flops (SN) - LEGCNet-FT", Strategy.LEGCNET_FT, 'flops_sparse', 1),
    ("Flops (SN) - LEGCNet-PT", Strategy.LEGCNET_PT, 'flops_sparse', 1),
    ("Epochs (SN) LEGCNet-FT", Strategy.LEGCNET_FT, 'epochs', 1),
    ("Epochs (SN) LEGCNet-PT", Strategy.LEGCNET_PT, 'epochs', 1),
    ("Accuracy (SN) LEGCNet-FT", Strategy.LEGCNET_FT, 'accuracy', 1),
    ("Accuracy (SN) LEGCNet-PT", Strategy.LEGCNET_PT, 'accuracy', 1),
    ("F1-score (SN) LEGCNet-FT", Strategy.LEGCNET_FT, 'f1', 1),
    ("F1-score (SN) LEGCNet-PT", Strategy.LEGCNET_PT, 'f1', 1),
    ("%Pruned LEGCNet-PT", Strategy.LEGCNET_PT, 'pruned_fraction', 100),
]

T3_COLUMNS = [
    ("Epochs (SN) Random", Strategy.RANDOM, 'epochs', 1),
    ("Accuracy (SN) Random", Strategy.RANDOM, 'accuracy', 1),
    ("Accuracy (SN) Magnitude", Strategy.MAGNITUDE, 'accuracy', 1),
    ("F1-score (SN) Random", Strategy.RANDOM, 'f1', 1),
    ("F1-score (SN) Magnitude", Strategy.MAGNITUDE, 'f1', 1),
]

# first column header and the accuracy column used to pick the best seed
TABLE_LAYOUT = {
    'T1': ("Dataset (hidden neurons)", T1_COLUMNS, "Accuracy LEGCNet-FT"),
    'T2': ("Data(Epochs*)", T2_COLUMNS, "Accuracy (SN) LEGCNet-PT"),
    'T3': ("Data", T3_COLUMNS, "Accuracy (SN) Random"),
}


# ============================================================================
# Rows
# ============================================================================

def load_rows(layout: RunLayout) -> List[Dict]:
    """Every recorded cell row, ordered by (seed, strategy)"""
    rows = [read_json(path) for _, _, path in layout.cells()]
    order = {s.value: i for i, s in enumerate(Strategy)}
    return sorted(rows, key=lambda r: (r['seed'], order.get(r['strategy'], len(order))))


def run_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    """Scalar fields of every row, one row per cell"""
    scalar = [{k: v for k, v in row.items() if not isinstance(v, (list, dict))} for row in rows]
    return pd.DataFrame(scalar)


def required_strategies(table_id) -> List[Strategy]:
    if table_id == 'T4':
        return list(Strategy)
    _, columns, _ = TABLE_LAYOUT[table_id]
    return sorted({s for _, s, _, _ in columns}, key=list(Strategy).index)


def _ok_rows(rows):
    return {(r['seed'], r['strategy']): r for r in rows if r.get('status') == "ok"}


def check_rows(rows, seeds, table_id):
    """Raise MissingRowsError naming every (seed, strategy) the table needs but lacks"""
    ok = _ok_rows(rows)
    missing = [f"seed {seed}/{s.value}" for seed in seeds for s in required_strategies(table_id)
               if (seed, s.value) not in ok]
    if missing:
        for item in missing:
            log.error(f"{table_id}: missing {item}")
        raise MissingRowsError(missing)
    return ok


# ============================================================================
# Tables
# ============================================================================

def _label(ok, name, table_id, probe=None):
    first = next(iter(ok.values()))
    if table_id == 'T1':
        return f"{name} ({','.join(str(h) for h in first['hidden'])})"
    if table_id == 'T2' and probe is not None and not np.isnan(probe):
        return f"{name} ({probe:g})"
    return name


def _per_seed(ok, seeds, columns) -> pd.DataFrame:
    records = []
    for seed in seeds:
        record = {'seed': seed}
        for header, strategy, key, scale in columns:
            record[header] = ok[(seed, strategy.value)][key] * scale
        records.append(record)
    return pd.DataFrame(records).set_index('seed')


def _probe_epochs(ok, seeds):
    return pd.Series([ok[(s, Strategy.LEGCNET_PT.value)].get('probe_epochs') for s in seeds],
                     index=pd.Index(seeds, name='seed'), dtype=float)


def comparison_table(rows, name, seeds, table_id, variant="median") -> pd.DataFrame:
    """T1-T3 in one of three variants: median over seeds, best seed, or one row per seed"""
    if variant not in VARIANTS:
        raise InvalidSpecError(f"Unknown variant {variant!r}; choose from {VARIANTS}")
    ok = check_rows(rows, seeds, table_id)
    first_header, columns, key = TABLE_LAYOUT[table_id]
    frame = _per_seed(ok, seeds, columns)
    probes = _probe_epochs(ok, seeds) if table_id == 'T2' else None

    if variant == "median":
        table = frame.median().to_frame().T
        probe = float(probes.median()) if probes is not None else None
        labels = [_label(ok, name, table_id, probe)]
    elif variant == "best":
        # idxmax returns the first (lowest) seed on ties
        best = frame[key].idxmax()
        table = frame.loc[[best]]
        labels = [_label(ok, name, table_id, probes[best] if probes is not None else None)]
    else:
        table = frame
        labels = [_label(ok, name, table_id, probes[s] if probes is not None else None)
                  for s in frame.index]
    table = table.reset_index(drop=True)
    table.insert(0, first_header, labels)
    if variant == "seeds":
        table.insert(1, "Seed", list(frame.index))
    return table


def _layer_headers(architecture):
    sizes = [int(s) for s in architecture.split("-")]
    return [f"Layer{i}: {a}-{b}" for i, (a, b) in enumerate(zip(sizes, sizes[1:]), start=1)]


def esd_table(rows, seeds, variant="median") -> pd.DataFrame:
    """T4: alpha and alpha_w per layer for every model"""
    if variant not in VARIANTS:
        raise InvalidSpecError(f"Unknown variant {variant!r}; choose from {VARIANTS}")
    ok = check_rows(rows, seeds, 'T4')
    without_esd = [f"seed {seed}/{strategy}" for (seed, strategy), r in ok.items()
                   if seed in seeds and not r.get('esd')]
    if without_esd:
        raise MissingRowsError([f"{item} (no ESD)" for item in without_esd])

    layers = _layer_headers(next(iter(ok.values()))['architecture'])
    records = []
    for strategy in Strategy:
        for seed in seeds:
            row = ok[(seed, strategy.value)]
            record = {'Model': MODEL_NAMES[strategy], 'Seed': seed, 'accuracy': row['accuracy']}
            for header, esd in zip(layers, row['esd']):
                record[f"{header} alpha"] = esd['alpha']
                record[f"{header} alpha_w"] = esd['alpha_w']
            records.append(record)
    frame = pd.DataFrame(records)

    if variant == "median":
        table = frame.drop(columns=['Seed', 'accuracy']).groupby('Model', sort=False).median()
        return table.reset_index()
    if variant == "best":
        best = frame.loc[frame.groupby('Model', sort=False)['accuracy'].idxmax()]
        return best.drop(columns=['Seed', 'accuracy']).reset_index(drop=True)
    return frame.drop(columns=['accuracy'])


def build_table(rows, name, seeds, table_id, variant="median") -> pd.DataFrame:
    if table_id not in TABLES:
        raise InvalidSpecError(f"Unknown table {table_id!r}; choose from {TABLES}")
    if table_id == 'T4':
        return esd_table(rows, seeds, variant)
    return comparison_table(rows, name, seeds, table_id, variant)


def write_tables(layout: RunLayout, name, seeds, tables: Sequence[str] = TABLES,
                 variants: Sequence[str] = ("median", "best")) -> Dict[str, List[str]]:
    """
    Writes <table>-<variant>.csv for every table whose rows are present plus
    runs.csv with every cell. Returns {table: missing rows} for the tables
    that could not be built.
    """
    rows = load_rows(layout)
    write_frame(layout.run_dir / "runs.csv", run_frame(rows))
    problems = {}
    for table_id in tables:
        try:
            for variant in variants:
                table = build_table(rows, name, seeds, table_id, variant)
                write_frame(layout.table_path(table_id, variant), table)
            log.info(f"{table_id}: written ({', '.join(variants)})")
        except MissingRowsError as e:
            problems[table_id] = e.missing
    return problems


def median_gap(rows, seeds, metric='accuracy', strategy=Strategy.LEGCNET_FT):
    """Median over seeds of |sparse - dense| for a metric"""
    ok = _ok_rows(rows)
    gaps = [abs(ok[(s, strategy.value)][metric] - ok[(s, Strategy.DENSE.value)][metric])
            for s in seeds if (s, strategy.value) in ok and (s, Strategy.DENSE.value) in ok]
    return float(np.median(gaps)) if gaps else float("nan")
