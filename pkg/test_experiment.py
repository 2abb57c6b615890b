"""
Experiment Tests - config files, report tables and end-to-end CLI runs
"""
from pathlib import Path

import pandas as pd
import pytest

from common.errors import ConfigError, InvalidSpecError, MissingRowsError
from experiment.artifacts import RunLayout, read_json, write_json
from experiment.config import cli_overrides, load_config, parse_strategies
from experiment.experiment_main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from experiment.pruning import Strategy
from experiment.report import build_table, comparison_table, esd_table, median_gap, write_tables
from experiment.runner import ExperimentRunner, cell_order

CONFIG_DIR = Path(__file__).parent / "configs"
FIXTURE_DIR = Path(__file__).parent / "fixtures"

# 160 training samples at batch 16: 10 steps per epoch, so 60 epochs give
# 601 iterates (12 windows of 50) and the 30-epoch probe gives 6 windows
BLOBS_INI = """
[experiment]
name = blobs
seeds = 0,1
export_csv = yes

[dataset]
kind = synthetic
synthetic = blobs
n_samples = 200

[network]
hidden = 4

[training]
max_epochs = 60
convergence_tol = 1e-12
patience = 100

[chaos]
window_len = 50

[granger]
max_lag = 2

[pruning]
probe_epochs = 30
"""


def _write_config(directory, text=BLOBS_INI, name="blobs.ini"):
    path = Path(directory) / name
    path.write_text(text)
    return path


# ============================================================================
# Config
# ============================================================================

@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.name == path.stem
    assert cfg.seeds[0] == 0
    assert cfg.run_dir.name.startswith(f"{cfg.name}-")


def test_iris3f_drops_sepal_width():
    cfg = load_config(CONFIG_DIR / "iris3f.ini")
    assert cfg.dataset.drop == ("sepal width (cm)",)


def test_class_subset_and_csv_export_keys(tmp_path):
    cfg = load_config(_write_config(tmp_path))
    assert cfg.export_csv
    assert cfg.dataset.classes == ()
    subset = load_config(CONFIG_DIR / "iris.ini", {('dataset', 'classes'): 'versicolor, virginica'})
    assert subset.dataset.classes == ("versicolor", "virginica")
    assert not subset.export_csv


def test_defaults_and_hash(tmp_path):
    path = _write_config(tmp_path)
    cfg = load_config(path)
    assert cfg.hidden == (4,)
    assert cfg.training.max_epochs == 60
    assert cfg.training.batch_size == 16
    assert cfg.analysis.window_len == 50
    assert cfg.analysis.granger.max_lag == 2
    assert cfg.probe_epochs == 30
    assert cfg.strategies == tuple(Strategy)
    assert cfg.config_hash == load_config(path).config_hash
    assert len(cfg.run_dir.name) == len("blobs-") + 12


def test_overrides_change_the_hash(tmp_path):
    path = _write_config(tmp_path)
    base = load_config(path)
    seeded = load_config(path, cli_overrides(seeds=[3, 4]))
    assert seeded.seeds == (3, 4)
    assert seeded.config_hash != base.config_hash
    moved = load_config(path, cli_overrides(out=tmp_path / "elsewhere"))
    assert moved.run_dir.parent == tmp_path / "elsewhere"


def test_output_dir_is_not_hashed(tmp_path):
    path = _write_config(tmp_path)
    base = load_config(path)
    moved = load_config(path, cli_overrides(out=tmp_path / "elsewhere"))
    assert moved.config_hash == base.config_hash
    assert moved.run_dir.name == base.run_dir.name
    assert "output_dir" in moved.canonical
    assert "output_dir" not in moved.fingerprint


@pytest.mark.parametrize("text", [
    "[experiment]\nname = x\n[nonsense]\nkey = 1\n",
    "[experiment]\ncolour = blue\n",
    "[experiment]\nstrategies = dense,everything\n",
    "[experiment]\nseeds = \n",
    "[dataset]\nkind = parquet\n",
    "[training]\nlearning_rate = -1\n",
    "[chaos]\nwindow_len = 20\n",
])
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(_write_config(tmp_path, text))


def test_missing_config(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.ini")


def test_strategy_names():
    assert parse_strategies(["legcnet-pt", "random"]) == (Strategy.LEGCNET_PT, Strategy.RANDOM)
    with pytest.raises(ConfigError):
        parse_strategies([])


def test_cell_order_adds_dense():
    assert cell_order([Strategy.MAGNITUDE, Strategy.LEGCNET_FT]) == [
        Strategy.DENSE, Strategy.LEGCNET_FT, Strategy.MAGNITUDE]
    assert cell_order([Strategy.DENSE]) == [Strategy.DENSE]


# ============================================================================
# Report Tables
# ============================================================================

def _row(seed, strategy, accuracy, n_pruned=0, status="ok"):
    row = {
        'dataset': 'iris', 'architecture': '4-6-3', 'hidden': [6], 'seed': seed,
        'strategy': strategy.value, 'status': status,
        'flops_dense': 42, 'flops_sparse': 42 - n_pruned, 'n_pruned': n_pruned,
        'pruned_fraction': n_pruned / 42, 'epochs': 100 + seed,
        'accuracy': accuracy, 'f1': accuracy - 0.01,
        'esd': [{'layer': 1, 'alpha': 2.0 + seed, 'alpha_w': 1.0, 'flags': []},
                {'layer': 2, 'alpha': 3.0, 'alpha_w': 1.5, 'flags': []}],
    }
    if strategy is Strategy.LEGCNET_PT:
        row['probe_epochs'] = 10
    return row


def _rows(ft_accuracy=(0.9, 0.8, 0.95)):
    rows = []
    for seed, ft in enumerate(ft_accuracy):
        rows.append(_row(seed, Strategy.DENSE, 0.92))
        rows.append(_row(seed, Strategy.LEGCNET_FT, ft, n_pruned=6 + seed))
        rows.append(_row(seed, Strategy.LEGCNET_PT, ft - 0.05, n_pruned=4))
        rows.append(_row(seed, Strategy.RANDOM, 0.7, n_pruned=6 + seed))
        rows.append(_row(seed, Strategy.MAGNITUDE, 0.85, n_pruned=6 + seed))
    return rows


def test_median_table():
    table = comparison_table(_rows(), "iris", [0, 1, 2], 'T1')
    assert len(table) == 1
    assert table.loc[0, "Dataset (hidden neurons)"] == "iris (6)"
    assert table.loc[0, "Accuracy LEGCNet-FT"] == pytest.approx(0.9)
    assert table.loc[0, "Flops - DN"] == 42
    assert table.loc[0, "Non causal Weights"] == 7
    assert table.loc[0, "%Pruned LEGCNet-FT"] == pytest.approx(100 * 7 / 42)


def test_best_seed_table():
    table = comparison_table(_rows(), "iris", [0, 1, 2], 'T1', variant="best")
    assert table.loc[0, "Epochs DN"] == 102
    # ties resolve to the lowest seed
    tied = comparison_table(_rows((0.95, 0.8, 0.95)), "iris", [0, 1, 2], 'T1', variant="best")
    assert tied.loc[0, "Epochs DN"] == 100


def test_per_seed_table_and_probe_label():
    table = comparison_table(_rows(), "iris", [0, 1, 2], 'T2', variant="seeds")
    assert table["Seed"].tolist() == [0, 1, 2]
    assert table["Data(Epochs*)"].tolist() == ["iris (10)"] * 3
    assert table["Accuracy (SN) LEGCNet-PT"].tolist() == pytest.approx([0.85, 0.75, 0.9])


def test_missing_rows_are_named():
    rows = [r for r in _rows() if not (r['seed'] == 1 and r['strategy'] == 'legcnet-ft')]
    rows.append(_row(2, Strategy.RANDOM, 0.7, status="failed"))
    rows = [r for r in rows if not (r['seed'] == 2 and r['strategy'] == 'random' and r['status'] == 'ok')]
    with pytest.raises(MissingRowsError) as info:
        build_table(rows, "iris", [0, 1, 2], 'T1')
    assert info.value.missing == ["seed 1/legcnet-ft"]
    with pytest.raises(MissingRowsError) as info:
        build_table(rows, "iris", [0, 1, 2], 'T3')
    assert info.value.missing == ["seed 2/random"]
    # T2 does not need the baselines but does need every LEGCNet-FT row
    with pytest.raises(MissingRowsError):
        build_table(rows, "iris", [0, 1, 2], 'T2')


def test_esd_table():
    median = esd_table(_rows(), [0, 1, 2])
    assert median["Model"].tolist() == ["Dense", "LEGCNet-FT", "LEGCNet-PT", "Random", "Magnitude"]
    assert median["Layer1: 4-6 alpha"].tolist() == [3.0] * 5
    assert median["Layer2: 6-3 alpha_w"].tolist() == [1.5] * 5
    best = esd_table(_rows(), [0, 1, 2], variant="best")
    # seed 2 has the best LEGCNet-FT accuracy
    assert best.loc[1, "Layer1: 4-6 alpha"] == 4.0


def test_esd_table_needs_esd_rows():
    rows = _rows()
    del rows[0]['esd']
    with pytest.raises(MissingRowsError):
        esd_table(rows, [0, 1, 2])


def test_unknown_table_or_variant():
    with pytest.raises(InvalidSpecError):
        build_table(_rows(), "iris", [0], 'T9')
    with pytest.raises(InvalidSpecError):
        build_table(_rows(), "iris", [0], 'T1', variant="mean")


def test_median_gap():
    assert median_gap(_rows(), [0, 1, 2]) == pytest.approx(0.03)
    assert median_gap(_rows(), [0, 1, 2], strategy=Strategy.LEGCNET_PT) == pytest.approx(0.07)


def test_write_tables_reports_problems(tmp_path):
    layout = RunLayout(tmp_path / "run")
    for row in _rows():
        if row['strategy'] != 'magnitude':
            write_json(layout.cell_file(row['seed'], row['strategy'], "cell.json"), row)
    problems = write_tables(layout, "iris", [0, 1, 2])
    assert list(problems) == ['T3', 'T4']
    assert "seed 0/magnitude" in problems['T3']
    assert layout.table_path('T1', 'median').exists()
    assert layout.table_path('T2', 'best').exists()
    assert not layout.table_path('T3', 'median').exists()
    assert len(pd.read_csv(layout.run_dir / "runs.csv")) == 12


# ============================================================================
# CLI
# ============================================================================

def test_usage_errors(tmp_path):
    path = _write_config(tmp_path)
    assert main(['run', '--config', str(path), '--strategy', 'prune-everything']) == EXIT_USAGE
    assert main(['run', '--config', str(tmp_path / "absent.ini")]) == EXIT_USAGE
    with pytest.raises(SystemExit):
        main(['run'])


def test_report_without_cells_fails(tmp_path):
    path = _write_config(tmp_path)
    assert main(['report', '--config', str(path), '--out', str(tmp_path / "out")]) == EXIT_FAILED


def test_baseline_without_legcnet_cell_fails(tmp_path):
    path = _write_config(tmp_path)
    out = tmp_path / "out"
    argv = ['run', '--config', str(path), '--out', str(out), '--seeds', '0', '--strategy', 'random']
    assert main(argv) == EXIT_FAILED
    cfg = load_config(path, cli_overrides(out=out, seeds=[0], strategies=['random']))
    layout = RunLayout(cfg.run_dir)
    assert read_json(layout.cell_file(0, Strategy.DENSE, "cell.json"))['status'] == "ok"
    row = read_json(layout.cell_file(0, Strategy.RANDOM, "cell.json"))
    assert row['status'] == "failed"
    assert row['error'].startswith("InvalidSpecError")


@pytest.fixture(scope="module")
def blobs_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("blobs")
    path = _write_config(root)
    out = root / "out"
    code = main(['run', '--config', str(path), '--out', str(out)])
    cfg = load_config(path, cli_overrides(out=out))
    return code, path, out, RunLayout(cfg.run_dir)


def test_run_records_every_cell(blobs_run):
    code, _, _, layout = blobs_run
    assert code == EXIT_OK
    manifest = read_json(layout.manifest_path)
    assert len(manifest['cells']) == 10
    assert {c['status'] for c in manifest['cells']} == {"ok"}
    assert any(name.endswith("mask.lgcm") for name in manifest['checksums'])
    assert (layout.run_dir / "config.ini").exists()


def test_run_rows(blobs_run):
    _, _, _, layout = blobs_run
    for seed in (0, 1):
        dense = read_json(layout.cell_file(seed, Strategy.DENSE, "cell.json"))
        ft = read_json(layout.cell_file(seed, Strategy.LEGCNET_FT, "cell.json"))
        pt = read_json(layout.cell_file(seed, Strategy.LEGCNET_PT, "cell.json"))
        random_ = read_json(layout.cell_file(seed, Strategy.RANDOM, "cell.json"))
        assert dense['architecture'] == "2-4-1"
        assert dense['flops_sparse'] == 12
        assert dense['epochs'] == 60
        assert len(dense['shap_importance']) == 2
        assert ft['n_windows'] == 12
        assert pt['n_windows'] == 6
        assert pt['probe_epochs'] == 30
        assert ft['flops_sparse'] == 12 - ft['n_pruned']
        assert random_['n_pruned'] == ft['n_pruned']
        assert ft['epsilon_closeness'] >= 0.0
        assert 'shap_spearman_rho' in ft


def test_run_exports_spectra_and_csv(blobs_run):
    _, _, _, layout = blobs_run
    cell = layout.cell_dir(0, Strategy.LEGCNET_FT)
    reports = read_json(cell / "esd.json")
    frame = pd.read_csv(cell / "esd.csv", float_precision="round_trip")
    assert [r["layer"] for r in reports] == [1, 2]
    for report in reports:
        assert len(report["eigenvalues"]) == report["n_eigenvalues"]
        for matrix, key in (("actual", "eigenvalues"), ("shuffled", "shuffled_eigenvalues")):
            rows = frame[(frame["layer"] == report["layer"]) & (frame["matrix"] == matrix)]
            assert len(rows) > 0
            assert rows["eigenvalue"].tolist() == report[key]
    for name in ("layer1.csv", "layer2.csv", "base.csv", "pert.csv"):
        assert (cell / "csv" / name).exists()
    assert (layout.cell_dir(0, Strategy.DENSE) / "csv" / "layer1.csv").exists()
    base = pd.read_csv(cell / "csv" / "base.csv", index_col="iteration")
    assert len(base) >= 12 * 50


def test_run_writes_tables(blobs_run):
    _, _, _, layout = blobs_run
    for table_id in ('T1', 'T2', 'T3', 'T4'):
        for variant in ('median', 'best'):
            assert layout.table_path(table_id, variant).exists()
    t1 = pd.read_csv(layout.table_path('T1', 'median'))
    assert t1.loc[0, "Flops - DN"] == 12
    assert t1.loc[0, "Dataset (hidden neurons)"] == "blobs (4)"


def test_report_subcommand(blobs_run):
    _, path, out, layout = blobs_run
    argv = ['report', '--config', str(path), '--out', str(out), '--table', 'T1', '--variant', 'seeds']
    assert main(argv) == EXIT_OK
    assert len(pd.read_csv(layout.table_path('T1', 'seeds'))) == 2


def test_analyze_reproduces_masks(blobs_run):
    _, path, out, layout = blobs_run
    strategies = (Strategy.LEGCNET_FT, Strategy.LEGCNET_PT)
    before = {(s, st): layout.cell_file(s, st, "mask.lgcm").read_bytes()
              for s in (0, 1) for st in strategies}
    granger = layout.cell_file(0, Strategy.LEGCNET_FT, "granger.csv").read_text()
    assert main(['analyze', '--config', str(path), '--out', str(out)]) == EXIT_OK
    after = {(s, st): layout.cell_file(s, st, "mask.lgcm").read_bytes()
             for s in (0, 1) for st in strategies}
    assert after == before
    assert layout.cell_file(0, Strategy.LEGCNET_FT, "granger.csv").read_text() == granger


def test_diagnose_rewrites_rows(blobs_run):
    _, path, out, layout = blobs_run
    before = read_json(layout.cell_file(1, Strategy.MAGNITUDE, "cell.json"))
    assert main(['diagnose', '--config', str(path), '--out', str(out)]) == EXIT_OK
    after = read_json(layout.cell_file(1, Strategy.MAGNITUDE, "cell.json"))
    assert after['shap_importance'] == before['shap_importance']
    assert after['epsilon_closeness'] == before['epsilon_closeness']


def test_rerun_is_reproducible(blobs_run, tmp_path):
    _, path, _, layout = blobs_run
    out = tmp_path / "again"
    assert main(['run', '--config', str(path), '--out', str(out)]) == EXIT_OK
    again = RunLayout(load_config(path, cli_overrides(out=out)).run_dir)
    for seed in (0, 1):
        for strategy in Strategy:
            for name in ("mask.lgcm", "final.lgcp") if strategy is not Strategy.DENSE else ("final.lgcp",):
                assert (again.cell_file(seed, strategy, name).read_bytes()
                        == layout.cell_file(seed, strategy, name).read_bytes())
            a = read_json(again.cell_file(seed, strategy, "cell.json"))
            b = read_json(layout.cell_file(seed, strategy, "cell.json"))
            assert (a['accuracy'], a['f1'], a['n_pruned']) == (b['accuracy'], b['f1'], b['n_pruned'])
    for table_id in ('T1', 'T2', 'T3', 'T4'):
        assert again.table_path(table_id).read_bytes() == layout.table_path(table_id).read_bytes()


def _data_present(path):
    return path is not None and path.exists()


def _banknote_config(overrides):
    cfg = load_config(CONFIG_DIR / "banknote.ini")
    if _data_present(cfg.dataset.path):
        return load_config(CONFIG_DIR / "banknote.ini", overrides)
    # versicolor and virginica overlap: a four-feature binary task of the same shape
    stand_in = {('experiment', 'name'): 'banknote', ('dataset', 'classes'): 'versicolor,virginica',
                ('network', 'hidden'): '8'}
    return load_config(CONFIG_DIR / "iris.ini", {**overrides, **stand_in})


def _cancer_config(overrides):
    cfg = load_config(CONFIG_DIR / "cancer.ini")
    if _data_present(cfg.dataset.path):
        return load_config(CONFIG_DIR / "cancer.ini", overrides)
    bundled = {('dataset', 'kind'): 'bundled', ('dataset', 'bundled'): 'breast_cancer',
               ('dataset', 'drop'): ''}
    return load_config(CONFIG_DIR / "cancer.ini", {**overrides, **bundled})


def _mnist_config(overrides):
    cfg = load_config(CONFIG_DIR / "mnist.ini")
    if _data_present(cfg.dataset.images) and _data_present(cfg.dataset.labels):
        return load_config(CONFIG_DIR / "mnist.ini", overrides)
    fixture = {('dataset', 'images'): str(FIXTURE_DIR / "mnist-100-images-idx3-ubyte.gz"),
               ('dataset', 'labels'): str(FIXTURE_DIR / "mnist-100-labels-idx1-ubyte.gz"),
               ('dataset', 'limit'): '100', ('experiment', 'workers'): '1'}
    return load_config(CONFIG_DIR / "mnist.ini", {**overrides, **fixture})


@pytest.mark.slow
@pytest.mark.parametrize("config", ["iris", "banknote"])
def test_sparse_matches_dense(tmp_path, config):
    overrides = cli_overrides(out=tmp_path, strategies=['dense', 'legcnet-ft'])
    if config == "banknote":
        cfg = _banknote_config(overrides)
    else:
        cfg = load_config(CONFIG_DIR / "iris.ini", overrides)
    runner = ExperimentRunner(cfg)
    runner.run()
    assert runner.all_ok
    rows = [c.row for c in runner.results]
    assert median_gap(rows, cfg.seeds) <= 0.02
    ft = [r for r in rows if r['strategy'] == 'legcnet-ft']
    assert sum(r['pruned_fraction'] > 0 for r in ft) >= 3
    dense_epochs = sorted(r['epochs'] for r in rows if r['strategy'] == 'dense')
    sparse_epochs = sorted(r['epochs'] for r in ft)
    assert sparse_epochs[len(ft) // 2] <= dense_epochs[len(ft) // 2]


@pytest.mark.slow
def test_cancer_importance_survives_causal_pruning(tmp_path):
    overrides = cli_overrides(out=tmp_path, strategies=['dense', 'legcnet-ft', 'random'])
    runner = ExperimentRunner(_cancer_config(overrides))
    runner.run()
    assert runner.all_ok
    rho = {s: sorted(c.row['shap_spearman_rho'] for c in runner.results if c.strategy is s)
           for s in (Strategy.LEGCNET_FT, Strategy.RANDOM)}
    median = {s: values[len(values) // 2] for s, values in rho.items()}
    assert median[Strategy.LEGCNET_FT] >= median[Strategy.RANDOM]


@pytest.mark.slow
def test_mnist_first_layer_has_finite_alpha(tmp_path):
    overrides = cli_overrides(out=tmp_path, strategies=['dense'])
    runner = ExperimentRunner(_mnist_config(overrides))
    runner.run()
    assert runner.all_ok
    layers = runner.results[0].row['esd']
    assert [layer['layer'] for layer in layers] == [1, 2, 3]
    assert 1.0 < layers[0]['alpha'] < float("inf")
