"""End-to-end experiment: split, train the 8 HMMs, enrich, grid-search, ablate."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .features import AGG_NAMES, HIST_NAMES, HMM_NAMES, ModelRegistry, enrich_arrays
from .forest import RandomForest, fit_forest, save_forest
from .hmm import CATEGORICAL, GAUSSIAN, FitConfig, fit_baum_welch_detailed, quantile_bin_edges
from .metrics import pr_curve
from .model_selection import GridSpec, grid_search
from .sequencer import PERSPECTIVES, Transaction, build_training_corpora, chronological
from .synthgen import GenConfig, generate

log = logging.getLogger(__name__)

CSV_HEADER = ("tx_id", "timestamp", "card_id", "terminal_id", "amount", "country",
              "card_type", "is_fraud")

RAW_FEATURES = ("log_amount", "hour", "day_of_week", "country_code", "card_type_code")
FEATURE_GROUPS = {
    "raw": RAW_FEATURES,
    "aggCH": AGG_NAMES[:4],
    "aggTM": AGG_NAMES[4:],
    "HMM": HMM_NAMES + HIST_NAMES,
}
FEATURE_SETS = ("raw", "raw+aggCH", "raw+aggCH+aggTM", "raw+aggCH+HMM", "raw+aggCH+aggTM+HMM")
BASELINE = "raw+aggCH"
UNSEEN_CODE = -1


def feature_columns(feature_set: str) -> list[str]:
    cols = []
    for group in feature_set.split("+"):
        if group not in FEATURE_GROUPS:
            raise ValueError(f"unknown feature group {group!r} in {feature_set!r}")
        cols.extend(FEATURE_GROUPS[group])
    return cols


# --------------------------------------------------------------------------
# CSV ingestion

def read_transactions(path) -> list[Transaction]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            if row[7] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: is_fraud must be 0 or 1")
            out.append(Transaction(int(row[0]), int(row[1]), row[2], row[3], float(row[4]),
                                   row[5], row[6], row[7] == "1"))
    return out


def write_transactions(path, txns: Sequence[Transaction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t in txns:
            w.writerow([t.tx_id, t.timestamp, t.card_id, t.terminal_id, repr(float(t.amount)),
                        t.country, t.card_type, int(t.is_fraud)])


# --------------------------------------------------------------------------
# temporal split

def split_boundaries(timestamps: Sequence[int], fractions) -> list[int]:
    """Timestamps at the empirical (inverted-CDF) quantiles of the cumulative
    fractions; a transaction goes right of a boundary only if strictly later."""
    fractions = tuple(fractions)
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must be positive and sum to 1")
    ts = np.sort(np.asarray(timestamps))
    n = len(ts)
    cuts = []
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        k = max(1, math.ceil(round(acc * n, 9)))
        cuts.append(int(ts[k - 1]))
    return cuts


def temporal_split(txns: Sequence[Transaction], fractions=(0.6, 0.2, 0.2)):
    """Contiguous time segments (train, valid, test) for chronologically
    sorted transactions."""
    txns = list(txns)
    if any((a.timestamp, a.tx_id) > (b.timestamp, b.tx_id) for a, b in zip(txns, txns[1:])):
        raise ValueError("temporal_split needs transactions sorted by (timestamp, tx_id)")
    if not txns:
        return tuple([] for _ in fractions)
    cuts = split_boundaries([t.timestamp for t in txns], fractions)
    parts = [[] for _ in fractions]
    for t in txns:
        k = sum(t.timestamp > c for c in cuts)
        parts[k].append(t)
    return tuple(parts)


# --------------------------------------------------------------------------
# design matrices

def fit_encoders(train: Sequence[Transaction]) -> dict:
    return {"country": sorted({t.country for t in train}),
            "card_type": sorted({t.card_type for t in train})}


def raw_columns(txns: Sequence[Transaction], encoders: dict) -> dict:
    codes = {k: {v: i for i, v in enumerate(vocab)} for k, vocab in encoders.items()}
    ts = np.array([t.timestamp for t in txns], dtype=np.int64)
    return {
        "log_amount": np.log1p(np.array([t.amount for t in txns], dtype=np.float64)),
        "hour": (ts // 3600) % 24,
        # epoch day 0 was a Thursday; Monday = 0
        "day_of_week": (ts // 86_400 + 3) % 7,
        "country_code": np.array([codes["country"].get(t.country, UNSEEN_CODE) for t in txns]),
        "card_type_code": np.array([codes["card_type"].get(t.card_type, UNSEEN_CODE)
                                    for t in txns]),
    }


def design_matrix(columns: dict, names: Sequence[str], rows=None) -> np.ndarray:
    X = np.column_stack([np.asarray(columns[n], dtype=np.float64) for n in names])
    return X if rows is None else X[rows]


# --------------------------------------------------------------------------
# HMM training

def derive_seed(master: int, *key: int) -> int:
    state = np.random.SeedSequence(master, spawn_key=key).generate_state(1, np.uint64)[0]
    return int(state >> np.uint64(1))


@dataclass
class HmmDiagnostics:
    perspective: str
    n_sequences: int
    n_observations: int
    n_iterations: int
    converged: bool
    log_likelihood: float
    restart_log_likelihoods: list


def train_registry(train: Sequence[Transaction], n_states: int = 5, window_size: int = 3,
                   fit: FitConfig = FitConfig(), emission: str = GAUSSIAN,
                   n_symbols: int = 30, master_seed: Optional[int] = None, n_jobs: int = 1):
    """Fit one HMM per perspective on the training transactions.

    Returns the registry and per-perspective fit diagnostics.  Each
    perspective's restarts use a seed derived from ``(master_seed, index)``.
    """
    if emission not in (GAUSSIAN, CATEGORICAL):
        raise ValueError(f"unknown emission kind {emission!r}")
    corpora = build_training_corpora(train)
    for p in PERSPECTIVES:
        if not corpora[p]:
            raise ValueError(
                f"empty training corpus for perspective {p.name}; the training split needs "
                "fraud on both cards and terminals and actors with >= 2 transactions "
                "(use more data or a higher fraud rate)")

    def one(i):
        p = PERSPECTIVES[i]
        cfg = fit if master_seed is None else replace(fit, seed=derive_seed(master_seed, 1, i))
        edges = None
        if emission == CATEGORICAL:
            edges = quantile_bin_edges(np.concatenate(corpora[p]), n_symbols)
            corpus = [np.searchsorted(edges, s, side="left") for s in corpora[p]]
        else:
            corpus = corpora[p]
        return fit_baum_welch_detailed(corpus, n_states, cfg, kind=emission, bin_edges=edges)

    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(len(PERSPECTIVES))))
    else:
        results = [one(i) for i in range(len(PERSPECTIVES))]

    models, diags = {}, []
    for p, res in zip(PERSPECTIVES, results):
        models[p] = res.model
        best = res.restarts[res.best_restart]
        diags.append(HmmDiagnostics(
            p.name, len(corpora[p]), int(sum(len(s) for s in corpora[p])),
            best.n_iterations, best.converged, res.log_likelihood,
            [r.final_log_likelihood for r in res.restarts]))
    return ModelRegistry(models, window_size), diags


# --------------------------------------------------------------------------
# experiment

@dataclass
class ExperimentConfig:
    seed: int
    input_path: Optional[str] = None
    gen: Optional[GenConfig] = None
    split: tuple = (0.6, 0.2, 0.2)
    window_size: int = 3
    n_states: int = 5
    emission: str = GAUSSIAN
    n_symbols: int = 30
    fit: FitConfig = field(default_factory=FitConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    feature_sets: tuple = FEATURE_SETS
    output_dir: Optional[str] = None
    n_jobs: int = 1

    def __post_init__(self):
        if (self.input_path is None) == (self.gen is None):
            raise ValueError("give exactly one of input_path or gen")
        if len(self.split) != 3 or any(f <= 0 for f in self.split) \
                or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must be three positive numbers summing to 1")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        for fs in self.feature_sets:
            feature_columns(fs)


@dataclass
class ExperimentReport:
    rows: list
    hmm: list
    splits: dict
    config: dict
    warnings: list
    runtime: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Everything except wall-clock timings, so reruns compare equal."""
        return {"version": __version__, "config": self.config, "splits": self.splits,
                "warnings": self.warnings, "hmm": self.hmm, "feature_sets": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["feature_set"] == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        lines = [f"{'feature set':<24} {'test PR-AUC':>12} {'vs ' + BASELINE:>16}",
                 "-" * 54]
        for r in self.rows:
            delta = r["relative_gain_vs_baseline"]
            delta_s = "n/a" if delta is None else f"{100 * delta:+.1f}%"
            lines.append(f"{r['feature_set']:<24} {r['test_pr_auc']:>12.4f} {delta_s:>16}")
        return "\n".join(lines) + "\n"


def _config_echo(cfg: ExperimentConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("output_dir")
    doc.pop("n_jobs")
    return json.loads(json.dumps(doc, default=list))


def load_dataset(cfg: ExperimentConfig) -> list[Transaction]:
    txns = read_transactions(cfg.input_path) if cfg.input_path else generate(cfg.gen)
    return chronological(txns)


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    """Run the full ablation and, if ``cfg.output_dir`` is set, write
    report.json, report.txt, runtime.json, models/ and forests/."""
    clock = {}
    t0 = time.perf_counter()
    txns = load_dataset(cfg)
    train, valid, test = temporal_split(txns, cfg.split)
    warnings = []
    splits = {}
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        n_pos = sum(t.is_fraud for t in part)
        splits[name] = {"n_transactions": len(part), "n_fraud": n_pos,
                        "first_timestamp": part[0].timestamp if part else None,
                        "last_timestamp": part[-1].timestamp if part else None}
        if n_pos == 0:
            warnings.append(f"{name} split has no fraudulent transactions")
            log.warning("%s split has no fraudulent transactions", name)
    for name, part in (("validation", valid), ("test", test)):
        if not any(t.is_fraud for t in part):
            raise ValueError(f"cannot evaluate PR-AUC: the {name} split has no fraud")
    clock["load_split_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    fit_cfg = cfg.fit
    registry, diags = train_registry(train, cfg.n_states, cfg.window_size, fit_cfg,
                                     cfg.emission, cfg.n_symbols, cfg.seed, cfg.n_jobs)
    clock["hmm_fit_s"] = time.perf_counter() - t0
    log.info("trained 8 HMMs in %.1fs", clock["hmm_fit_s"])

    t0 = time.perf_counter()
    # features of every split use the whole chronological table; each row
    # only sees earlier transactions of its own card and terminal
    columns = enrich_arrays(txns, registry)
    encoders = fit_encoders(train)
    columns.update(raw_columns(txns, encoders))
    labels = np.array([t.is_fraud for t in txns])
    n_tr, n_va = len(train), len(valid)
    idx = {"train": slice(0, n_tr), "valid": slice(n_tr, n_tr + n_va),
           "test": slice(n_tr + n_va, len(txns))}
    clock["enrich_s"] = time.perf_counter() - t0

    grid = replace(cfg.grid, seed=derive_seed(cfg.seed, 2))
    rows, forests, curves = [], {}, {}
    t0 = time.perf_counter()
    for fs in cfg.feature_sets:
        names = feature_columns(fs)
        X = design_matrix(columns, names)
        tr = (X[idx["train"]], labels[idx["train"]])
        va = (X[idx["valid"]], labels[idx["valid"]])
        best, report = grid_search(tr, va, grid, names, n_jobs=cfg.n_jobs)
        model = fit_forest(*tr, best, names, n_jobs=cfg.n_jobs, encoders=encoders)
        curve = pr_curve(model.predict_proba(X[idx["test"]]), labels[idx["test"]])
        forests[fs], curves[fs] = model, curve
        rows.append({
            "feature_set": fs,
            "features": names,
            "test_pr_auc": curve.auc,
            "best_params": asdict(best),
            "validation_grid": [{"params": asdict(p), "pr_auc": a} for p, a in report],
        })
        log.info("%s: test PR-AUC %.4f", fs, curve.auc)
    clock["forest_s"] = time.perf_counter() - t0

    base = next((r["test_pr_auc"] for r in rows if r["feature_set"] == BASELINE), None)
    for r in rows:
        r["relative_gain_vs_baseline"] = (
            None if not base else (r["test_pr_auc"] - base) / base)

    report = ExperimentReport(rows, [asdict(d) for d in diags], splits, _config_echo(cfg),
                              warnings, clock)
    if cfg.output_dir:
        write_outputs(cfg.output_dir, report, registry, forests, curves)
    return report


def write_outputs(out_dir, report: ExperimentReport, registry: ModelRegistry,
                  forests: dict[str, RandomForest], curves: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.table())
    with open(os.path.join(out_dir, "runtime.json"), "w", encoding="utf-8") as fh:
        json.dump(report.runtime, fh, indent=1)
    registry.save(os.path.join(out_dir, "models"))
    os.makedirs(os.path.join(out_dir, "forests"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "pr_curves"), exist_ok=True)
    for fs, model in forests.items():
        save_forest(model, os.path.join(out_dir, "forests", f"{fs}.json"))
        curves[fs].to_csv(os.path.join(out_dir, "pr_curves", f"{fs}.csv"))
