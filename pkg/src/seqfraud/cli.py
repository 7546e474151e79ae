"""Command line entry point: ``seqfraud <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .features import (
    AGG_NAMES,
    HMM_NAMES,
    ModelRegistry,
    enrich_dataset,
    read_enriched_csv,
    write_enriched_csv,
)
from .forest import fit_forest, load_forest, save_forest
from .hmm import CATEGORICAL, GAUSSIAN, FitConfig
from .metrics import pr_curve
from .model_selection import GridSpec, grid_search
from .pipeline import (
    FEATURE_SETS,
    ExperimentConfig,
    design_matrix,
    feature_columns,
    fit_encoders,
    raw_columns,
    read_transactions,
    run_experiment,
    temporal_split,
    train_registry,
    write_transactions,
)
from .sequencer import chronological
from .synthgen import GenConfig, generate


def _csv_list(cast):
    def parse(text):
        return tuple(cast(v) for v in text.split(","))
    return parse


def _depth(v):
    return None if v.lower() in ("none", "inf", "unbounded") else int(v)


def _mtry(v):
    return v if v in ("sqrt", "third") else int(v)


def _split(text):
    parts = tuple(float(v) for v in text.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated fractions")
    return parts


def _add_gen_args(p):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--n-cards", type=int, default=1000)
    g.add_argument("--n-terminals", type=int, default=200)
    g.add_argument("--n-days", type=int, default=30)
    g.add_argument("--txns-per-day", type=float, default=1.5,
                   help="mean transactions per card per day")
    g.add_argument("--fraud-rate", type=float, default=0.01)
    g.add_argument("--fraud-card-fraction", type=float, default=0.1)
    g.add_argument("--fraud-terminal-fraction", type=float, default=0.05)


def _gen_config(args, seed):
    return GenConfig(n_cards=args.n_cards, n_terminals=args.n_terminals, n_days=args.n_days,
                     mean_txns_per_card_per_day=args.txns_per_day,
                     fraud_card_fraction=args.fraud_card_fraction,
                     fraud_terminal_fraction=args.fraud_terminal_fraction,
                     target_fraud_rate=args.fraud_rate, seed=seed)


def _add_hmm_args(p):
    g = p.add_argument_group("HMM")
    g.add_argument("--split", type=_split, default=(0.6, 0.2, 0.2))
    g.add_argument("--n-states", type=int, default=5)
    g.add_argument("--window-size", type=int, default=3)
    g.add_argument("--emission", choices=(GAUSSIAN, CATEGORICAL), default=GAUSSIAN)
    g.add_argument("--n-symbols", type=int, default=30)
    g.add_argument("--max-iter", type=int, default=100)
    g.add_argument("--restarts", type=int, default=5)
    g.add_argument("--tol", type=float, default=1e-6)


def _fit_config(args, seed):
    return FitConfig(max_iterations=args.max_iter, convergence_tol=args.tol,
                     n_restarts=args.restarts, seed=seed)


def _add_grid_args(p):
    g = p.add_argument_group("forest grid")
    g.add_argument("--n-trees", type=_csv_list(int), default=(100, 300))
    g.add_argument("--max-depth", type=_csv_list(_depth), default=(8, 16, None))
    g.add_argument("--mtry", type=_csv_list(_mtry), default=("sqrt", "third"))
    g.add_argument("--min-leaf", type=_csv_list(int), default=(1, 5))
    g.add_argument("--max-bins", type=_depth, default=255,
                   help="bins per feature for split search; 'none' for exact CART")


def _grid(args, seed):
    return GridSpec(n_trees=args.n_trees, max_depth=args.max_depth, mtry=args.mtry,
                    min_samples_leaf=args.min_leaf, max_bins=args.max_bins, seed=seed)


def cmd_gen(args):
    txns = generate(_gen_config(args, args.seed))
    write_transactions(args.out, txns)
    n_fraud = sum(t.is_fraud for t in txns)
    print(f"wrote {len(txns)} transactions ({n_fraud} fraudulent) to {args.out}")


def cmd_train_hmm(args):
    txns = chronological(read_transactions(args.input))
    train, _, _ = temporal_split(txns, args.split)
    registry, diags = train_registry(train, args.n_states, args.window_size,
                                     _fit_config(args, args.seed), args.emission,
                                     args.n_symbols, args.seed, args.n_jobs)
    registry.save(args.out_dir)
    for d in diags:
        print(f"{d.perspective:<26} seqs={d.n_sequences:<6} iters={d.n_iterations:<4} "
              f"loglik={d.log_likelihood:.3f}")


def cmd_enrich(args):
    txns = chronological(read_transactions(args.input))
    registry = ModelRegistry.load(args.models)
    rows = enrich_dataset(txns, registry)
    os.makedirs(args.out_dir, exist_ok=True)
    if args.no_split:
        write_enriched_csv(os.path.join(args.out_dir, "enriched.csv"), rows)
        return
    by_id = {r.transaction.tx_id: r for r in rows}
    for name, part in zip(("train", "valid", "test"), temporal_split(txns, args.split)):
        path = os.path.join(args.out_dir, f"enriched_{name}.csv")
        write_enriched_csv(path, [by_id[t.tx_id] for t in part])
        print(f"wrote {len(part)} rows to {path}")


def _columns(rows, encoders):
    cols = raw_columns([r.transaction for r in rows], encoders)
    for name in AGG_NAMES:
        cols[name] = [getattr(r.aggregates, name) for r in rows]
    for i, name in enumerate(HMM_NAMES):
        cols[name] = [r.hmm.values[i] for r in rows]
    cols["hist_len_ch"] = [r.hmm.hist_len_ch for r in rows]
    cols["hist_len_tm"] = [r.hmm.hist_len_tm for r in rows]
    return cols


def cmd_fit(args):
    train = read_enriched_csv(args.train)
    valid = read_enriched_csv(args.valid)
    encoders = fit_encoders([r.transaction for r in train])
    names = feature_columns(args.feature_set)
    X_tr = design_matrix(_columns(train, encoders), names)
    X_va = design_matrix(_columns(valid, encoders), names)
    y_tr = np.array([r.label for r in train])
    y_va = np.array([r.label for r in valid])
    best, report = grid_search((X_tr, y_tr), (X_va, y_va), _grid(args, args.seed), names,
                               n_jobs=args.n_jobs)
    for p, auc in report:
        print(f"valid PR-AUC {auc:.4f}  {p}")
    model = fit_forest(X_tr, y_tr, best, names, n_jobs=args.n_jobs, encoders=encoders)
    save_forest(model, args.out)
    print(f"best: {best}\nsaved forest to {args.out}")


def cmd_eval(args):
    model = load_forest(args.model)
    rows = read_enriched_csv(args.test)
    X = design_matrix(_columns(rows, model.encoders), model.feature_names)
    curve = pr_curve(model.predict_proba(X), [r.label for r in rows])
    if args.curve:
        curve.to_csv(args.curve)
    print(f"test PR-AUC {curve.auc:.6f}")


def cmd_run(args):
    if args.input is None:
        gen = _gen_config(args, args.seed)
    else:
        gen = None
    cfg = ExperimentConfig(
        seed=args.seed, input_path=args.input, gen=gen, split=args.split,
        window_size=args.window_size, n_states=args.n_states, emission=args.emission,
        n_symbols=args.n_symbols, fit=_fit_config(args, args.seed), grid=_grid(args, args.seed),
        feature_sets=args.feature_sets, output_dir=args.out_dir, n_jobs=args.n_jobs)
    report = run_experiment(cfg)
    sys.stdout.write(report.table())
    print(json.dumps(report.runtime))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqfraud", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic transaction CSV")
    _add_gen_args(p)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-hmm", help="fit the 8 perspective HMMs on the training split")
    p.add_argument("--input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)
    _add_hmm_args(p)
    p.set_defaults(func=cmd_train_hmm)

    p = sub.add_parser("enrich", help="write enriched CSVs (one per split)")
    p.add_argument("--input", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--split", type=_split, default=(0.6, 0.2, 0.2))
    p.add_argument("--no-split", action="store_true", help="write a single enriched.csv")
    p.set_defaults(func=cmd_enrich)

    p = sub.add_parser("fit", help="grid-search a forest on enriched train/valid CSVs")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--feature-set", default="raw+aggCH+HMM")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-jobs", type=int, default=1)
    _add_grid_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="PR-AUC of a saved forest on an enriched CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--curve", help="write PR curve points to this CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full experiment with feature-set ablation")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--input", help="transaction CSV; synthetic data is generated if omitted")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--feature-sets", type=_csv_list(str), default=FEATURE_SETS)
    p.add_argument("--n-jobs", type=int, default=1)
    _add_gen_args(p)
    _add_hmm_args(p)
    _add_grid_args(p)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
