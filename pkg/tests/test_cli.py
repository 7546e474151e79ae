import json

import pytest

from seqfraud.cli import main
from seqfraud.features import read_enriched_csv
from seqfraud.pipeline import read_transactions

GEN = ["--n-cards", "200", "--n-terminals", "40", "--n-days", "14", "--fraud-rate", "0.03",
       "--fraud-card-fraction", "0.25", "--fraud-terminal-fraction", "0.1"]
HMM = ["--n-states", "2", "--max-iter", "10", "--restarts", "1"]
GRID = ["--n-trees", "5,10", "--max-depth", "4,none", "--mtry", "sqrt", "--min-leaf", "1"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--out", str(d / "tx.csv"), "--seed", "5", *GEN]) == 0
    return d


def test_gen(workdir):
    txns = read_transactions(workdir / "tx.csv")
    assert len(txns) > 1000 and any(t.is_fraud for t in txns)


def test_staged_commands(workdir, capsys):
    d = workdir
    assert main(["train-hmm", "--input", str(d / "tx.csv"), "--out-dir", str(d / "models"),
                 "--seed", "1", *HMM]) == 0
    assert (d / "models" / "registry.json").exists()
    assert main(["enrich", "--input", str(d / "tx.csv"), "--models", str(d / "models"),
                 "--out-dir", str(d / "enriched")]) == 0
    parts = [read_enriched_csv(d / "enriched" / f"enriched_{n}.csv")
             for n in ("train", "valid", "test")]
    assert sum(map(len, parts)) == len(read_transactions(d / "tx.csv"))
    assert main(["fit", "--train", str(d / "enriched" / "enriched_train.csv"),
                 "--valid", str(d / "enriched" / "enriched_valid.csv"),
                 "--feature-set", "raw+aggCH+HMM", "--out", str(d / "forest.json"), *GRID]) == 0
    capsys.readouterr()
    assert main(["eval", "--model", str(d / "forest.json"),
                 "--test", str(d / "enriched" / "enriched_test.csv"),
                 "--curve", str(d / "curve.csv")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("test PR-AUC ")
    assert 0.0 <= float(out.split()[-1]) <= 1.0
    assert (d / "curve.csv").exists()


def test_enrich_no_split(workdir):
    d = workdir
    if not (d / "models").exists():
        main(["train-hmm", "--input", str(d / "tx.csv"), "--out-dir", str(d / "models"), *HMM])
    assert main(["enrich", "--input", str(d / "tx.csv"), "--models", str(d / "models"),
                 "--out-dir", str(d / "all"), "--no-split"]) == 0
    assert (d / "all" / "enriched.csv").exists()


def test_run(workdir):
    d = workdir
    assert main(["run", "--seed", "3", "--input", str(d / "tx.csv"), "--out-dir", str(d / "run"),
                 "--feature-sets", "raw,raw+aggCH,raw+aggCH+HMM", *HMM, *GRID]) == 0
    doc = json.loads((d / "run" / "report.json").read_text())
    assert [r["feature_set"] for r in doc["feature_sets"]] == ["raw", "raw+aggCH", "raw+aggCH+HMM"]


def test_run_requires_seed(workdir):
    with pytest.raises(SystemExit):
        main(["run", "--out-dir", str(workdir / "x")])


def test_errors_return_nonzero(workdir, capsys):
    assert main(["eval", "--model", str(workdir / "missing.json"),
                 "--test", str(workdir / "tx.csv")]) == 1
    assert "error:" in capsys.readouterr().err
