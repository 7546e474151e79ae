import json
import math

import numpy as np
import pytest

from seqfraud.features import AGG_NAMES, ModelRegistry, enrich_arrays
from seqfraud.forest import load_forest
from seqfraud.hmm import FitConfig
from seqfraud.model_selection import GridSpec
from seqfraud.pipeline import (
    FEATURE_SETS,
    UNSEEN_CODE,
    ExperimentConfig,
    feature_columns,
    fit_encoders,
    raw_columns,
    read_transactions,
    run_experiment,
    split_boundaries,
    temporal_split,
    train_registry,
    write_transactions,
)
from seqfraud.sequencer import Transaction
from seqfraud.synthgen import GenConfig

SMOKE_GEN = GenConfig(n_cards=200, n_terminals=40, n_days=7, target_fraud_rate=0.04,
                      fraud_card_fraction=0.25, fraud_terminal_fraction=0.1, seed=3)
SMOKE_GRID = GridSpec(n_trees=(10, 20), max_depth=(6, None), mtry=("sqrt",), min_samples_leaf=(1,))
SMOKE_FIT = FitConfig(max_iterations=15, n_restarts=2)


def tx(i, ts, fraud=False, **kw):
    return Transaction(i, ts, kw.get("card", "c"), kw.get("term", "t"), 1.0,
                       kw.get("country", "BE"), kw.get("card_type", "debit"), fraud)


def test_split_sizes_distinct_timestamps():
    txns = [tx(i, 100 + i) for i in range(10)]
    assert [len(p) for p in temporal_split(txns)] == [6, 2, 2]


def test_split_all_same_timestamp_goes_to_train():
    txns = [tx(i, 500) for i in range(10)]
    assert [len(p) for p in temporal_split(txns)] == [10, 0, 0]


def test_split_boundaries_match_direct_quantiles():
    rng = np.random.default_rng(0)
    for _ in range(30):
        ts = np.sort(rng.integers(0, 50, int(rng.integers(1, 40))))
        fr = rng.dirichlet(np.ones(3))
        cuts = split_boundaries(ts, fr)
        # smallest sample value whose empirical CDF reaches the cumulative fraction
        for c, q in zip(cuts, np.cumsum(fr)[:2]):
            want = min(v for v in ts if np.mean(ts <= v) >= q - 1e-9)
            assert c == want
        txns = [tx(i, int(v)) for i, v in enumerate(ts)]
        parts = temporal_split(txns, fr)
        assert sum(map(len, parts)) == len(txns)
        flat = [t.tx_id for p in parts for t in p]
        assert flat == list(range(len(txns)))


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        temporal_split([tx(1, 5), tx(0, 4)])
    with pytest.raises(ValueError):
        split_boundaries([1, 2, 3], (0.5, 0.6, -0.1))


def test_transactions_csv_round_trip(tmp_path, small_txns):
    path = tmp_path / "tx.csv"
    write_transactions(path, small_txns)
    assert read_transactions(path) == small_txns
    assert path.read_text().splitlines()[0] == \
        "tx_id,timestamp,card_id,terminal_id,amount,country,card_type,is_fraud"


def test_transactions_csv_rejects_bad_rows(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("tx_id,timestamp,card_id,terminal_id,amount,country,card_type,is_fraud\n"
                    "1,5,c,t,2.0,BE,debit,yes\n")
    with pytest.raises(ValueError, match=":2:"):
        read_transactions(path)


def test_raw_columns_and_unseen_categories():
    train = [tx(0, 0, country="FR"), tx(1, 3600 * 25, country="BE")]
    enc = fit_encoders(train)
    assert enc["country"] == ["BE", "FR"]
    cols = raw_columns([tx(2, 3600 * 30, country="NL")], enc)
    assert cols["country_code"][0] == UNSEEN_CODE
    assert cols["hour"][0] == 6
    assert cols["day_of_week"][0] == 4  # 1970-01-02 was a Friday
    assert cols["log_amount"][0] == math.log(2.0)


def test_feature_sets():
    assert len(feature_columns("raw")) == 5
    assert len(feature_columns("raw+aggCH+aggTM+HMM")) == 5 + 8 + 10
    with pytest.raises(ValueError):
        feature_columns("raw+bogus")


def test_empty_corpus_names_perspective():
    txns = [tx(i, i * 10, card=f"c{i % 3}") for i in range(30)]
    with pytest.raises(ValueError, match="ch_compromised_amount"):
        train_registry(txns, n_states=2)


def test_registry_uses_training_data_only(small_txns):
    train, _, _ = temporal_split(small_txns)
    a, _ = train_registry(train, n_states=2, fit=SMOKE_FIT, master_seed=1)
    b, _ = train_registry(small_txns[:len(train)], n_states=2, fit=SMOKE_FIT, master_seed=1)
    for p in a.models:
        assert np.array_equal(a[p].emissions.means, b[p].emissions.means)


def test_categorical_registry(small_txns):
    train, _, _ = temporal_split(small_txns)
    reg, _ = train_registry(train, n_states=2, fit=SMOKE_FIT, emission="categorical",
                            n_symbols=10, master_seed=1)
    for m in reg.models.values():
        assert m.kind == "categorical" and m.bin_edges is not None
    cols = enrich_arrays(small_txns[:500], reg)
    assert np.all(np.isfinite(cols["hmm_1"]))


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    cfg = ExperimentConfig(seed=7, gen=SMOKE_GEN, n_states=3, fit=SMOKE_FIT, grid=SMOKE_GRID,
                           output_dir=str(out))
    return run_experiment(cfg), out


def test_smoke_run_report(smoke_run):
    report, out = smoke_run
    assert [r["feature_set"] for r in report.rows] == list(FEATURE_SETS)
    assert report.row("raw+aggCH")["relative_gain_vs_baseline"] == 0.0
    hmm_row = report.row("raw+aggCH+HMM")
    base = report.row("raw+aggCH")["test_pr_auc"]
    assert hmm_row["relative_gain_vs_baseline"] == pytest.approx(
        (hmm_row["test_pr_auc"] - base) / base)
    assert len(report.hmm) == 8
    doc = json.loads((out / "report.json").read_text())
    assert doc == json.loads(report.to_json())
    assert "runtime" not in doc and json.loads((out / "runtime.json").read_text())
    assert "raw+aggCH+HMM" in (out / "report.txt").read_text()


def test_smoke_run_artifacts_reload(smoke_run, small_txns):
    report, out = smoke_run
    reg = ModelRegistry.load(out / "models")
    assert len(reg.models) == 8
    forest = load_forest(out / "forests" / "raw+aggCH.json")
    assert forest.feature_names == feature_columns("raw+aggCH")
    assert forest.params.n_trees == report.row("raw+aggCH")["best_params"]["n_trees"]
    curve = (out / "pr_curves" / "raw.csv").read_text().splitlines()
    assert curve[0] == "threshold,recall,precision"


def test_run_errors_when_test_has_no_fraud():
    cfg = ExperimentConfig(seed=1, gen=GenConfig(n_cards=30, n_terminals=5, n_days=3,
                                                 target_fraud_rate=0.001, seed=2),
                           grid=SMOKE_GRID, fit=SMOKE_FIT)
    with pytest.raises(ValueError):
        run_experiment(cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(seed=1)
    with pytest.raises(ValueError):
        ExperimentConfig(seed=1, gen=SMOKE_GEN, split=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        ExperimentConfig(seed=1, gen=SMOKE_GEN, window_size=0)
    assert AGG_NAMES[0] in feature_columns("raw+aggCH")
