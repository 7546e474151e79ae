"""Aggregate (24h) and HMM likelihood features for every transaction.

Per-transaction functions (``aggregate_features``, ``hmm_features``) are the
reference definitions.  ``enrich_dataset`` computes the same values for a
whole table with per-actor sweeps and batched HMM scoring.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .hmm import HiddenMarkovModel, load_model, log_likelihood, log_likelihood_batch, save_model
from .sequencer import (
    PERSPECTIVES,
    ActorHistory,
    ActorKind,
    Perspective,
    SignalKind,
    Transaction,
    group_by_actor,
    transform,
    windows,
)

DAY_SECONDS = 86_400

AGG_NAMES = ("aggch1", "aggch2", "aggch3", "aggch4", "aggtm1", "aggtm2", "aggtm3", "aggtm4")
HMM_NAMES = tuple(f"hmm_{i + 1}" for i in range(len(PERSPECTIVES)))
HIST_NAMES = ("hist_len_ch", "hist_len_tm")
RAW_COLUMNS = ("tx_id", "timestamp", "card_id", "terminal_id", "amount", "country", "card_type")
ENRICHED_HEADER = RAW_COLUMNS + AGG_NAMES + HMM_NAMES + HIST_NAMES + ("label",)


@dataclass(frozen=True)
class AggregateFeatureSet:
    aggch1: int
    aggch2: float
    aggch3: int
    aggch4: float
    aggtm1: int
    aggtm2: float
    aggtm3: int
    aggtm4: float

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, n) for n in AGG_NAMES)


@dataclass(frozen=True)
class HmmFeatureSet:
    values: tuple
    hist_len_ch: int
    hist_len_tm: int


@dataclass(frozen=True)
class EnrichedTransaction:
    transaction: Transaction
    aggregates: AggregateFeatureSet
    hmm: HmmFeatureSet

    @property
    def label(self) -> bool:
        return self.transaction.is_fraud


@dataclass(frozen=True, eq=False)
class ModelRegistry:
    models: dict
    window_size: int = 3

    def __post_init__(self):
        missing = [p.name for p in PERSPECTIVES if p not in self.models]
        if missing:
            raise ValueError(f"model registry is missing perspectives: {', '.join(missing)}")
        if len(self.models) != len(PERSPECTIVES):
            raise ValueError("model registry must hold exactly 8 models")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        for p, m in self.models.items():
            if m.signal_transform != "log1p":
                raise ValueError(f"{p.name}: unsupported signal transform {m.signal_transform!r}")

    def __getitem__(self, p: Perspective) -> HiddenMarkovModel:
        return self.models[p]

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        for p in PERSPECTIVES:
            save_model(self.models[p], os.path.join(directory, f"{p.name}.json"))
        with open(os.path.join(directory, "registry.json"), "w", encoding="utf-8") as fh:
            json.dump({"window_size": self.window_size,
                       "perspectives": [p.name for p in PERSPECTIVES]}, fh, indent=1)

    @classmethod
    def load(cls, directory) -> "ModelRegistry":
        with open(os.path.join(directory, "registry.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        models = {}
        for name in meta["perspectives"]:
            models[Perspective.from_name(name)] = load_model(
                os.path.join(directory, f"{name}.json"))
        return cls(models, meta["window_size"])


# --------------------------------------------------------------------------
# single-transaction definitions

def _window_sums(history: ActorHistory, pos: int, keep=lambda t: True):
    t_now = history.transactions[pos].timestamp
    count, total = 0, 0.0
    for i in range(pos, -1, -1):
        t = history.transactions[i]
        if t.timestamp <= t_now - DAY_SECONDS:
            break
        if keep(t):
            count += 1
            total += t.amount
    return count, total


def aggregate_features(tx: int, ch_history: ActorHistory, tm_history: ActorHistory) -> AggregateFeatureSet:
    """Counts and amount sums over (t - 24h, t], current transaction included.

    Card-holder side: all of the card's transactions, then those in the
    current country.  Terminal side: all of the terminal's transactions, then
    those made with the current card type.
    """
    pc = ch_history.position(tx)
    pt = tm_history.position(tx)
    cur = ch_history.transactions[pc]
    ch1, ch2 = _window_sums(ch_history, pc)
    ch3, ch4 = _window_sums(ch_history, pc, lambda t: t.country == cur.country)
    tm1, tm2 = _window_sums(tm_history, pt)
    tm3, tm4 = _window_sums(tm_history, pt, lambda t: t.card_type == cur.card_type)
    return AggregateFeatureSet(ch1, ch2, ch3, ch4, tm1, tm2, tm3, tm4)


def _score_window(model: HiddenMarkovModel, window: np.ndarray) -> float:
    if window.size == 0:
        return 0.0
    return log_likelihood(model, model.encode(window)) / window.size


def hmm_features(tx: int, ch_history: ActorHistory, tm_history: ActorHistory,
                 registry: ModelRegistry) -> HmmFeatureSet:
    """Length-normalised log-likelihood of the transaction's recent window
    under each of the 8 models; 0.0 when the window is empty."""
    w = registry.window_size
    hist = {ActorKind.CARD_HOLDER: ch_history, ActorKind.TERMINAL: tm_history}
    values = []
    for p in PERSPECTIVES:
        if p not in registry.models:
            raise ValueError(f"no model for perspective {p.name}")
        win = windows(hist[p.actor], tx, p.signal, w)
        values.append(_score_window(registry[p], win))
    return HmmFeatureSet(tuple(values),
                         min(ch_history.position(tx) + 1, w),
                         min(tm_history.position(tx) + 1, w))


# --------------------------------------------------------------------------
# whole-table enrichment

def _rolling(ts: np.ndarray, amounts: np.ndarray):
    """Count and sum over (t - 24h, t] ending at each row of a sorted history.

    Two-pointer sweep.  Sums are differences of extended-precision prefix
    sums, so they carry no add/subtract drift along long histories.
    """
    n = len(ts)
    counts = np.empty(n, dtype=np.int64)
    sums = np.empty(n)
    prefix = np.concatenate(([0.0], np.cumsum(amounts, dtype=np.longdouble)))
    lo = 0
    for i in range(n):
        while ts[lo] <= ts[i] - DAY_SECONDS:
            lo += 1
        counts[i] = i - lo + 1
        sums[i] = float(prefix[i + 1] - prefix[lo])
    return counts, sums


def _grouped_rolling(ts, amounts, keys):
    """``_rolling`` restricted to rows sharing the same key."""
    counts = np.empty(len(ts), dtype=np.int64)
    sums = np.empty(len(ts))
    keys = np.asarray(keys)
    for k in np.unique(keys):
        rows = np.flatnonzero(keys == k)
        c, s = _rolling(ts[rows], amounts[rows])
        counts[rows] = c
        sums[rows] = s
    return counts, sums


def _window_table(obs: np.ndarray, end: np.ndarray, length: np.ndarray, w: int):
    """Left-aligned (N, w) windows ``obs[end-length+1 .. end]``; padding
    repeats the last valid cell so it stays a legal observation."""
    j = np.arange(w)[None, :]
    start = end - length + 1
    idx = start[:, None] + np.minimum(j, np.maximum(length - 1, 0)[:, None])
    if obs.size == 0:
        return np.zeros((len(end), w))
    return obs[np.clip(idx, 0, obs.size - 1)]


def _history_windows(h: ActorHistory, w: int):
    n = len(h)
    pos = np.arange(n)
    amount_obs = transform(h.amounts)
    amount_len = np.minimum(pos + 1, w)
    amounts = _window_table(amount_obs, pos, amount_len, w)
    delta_obs = transform(np.diff(h.timestamps))
    # delta k is attributed to transaction k + 1
    delta_len = np.minimum(pos, w)
    deltas = _window_table(delta_obs, pos - 1, delta_len, w)
    return {SignalKind.AMOUNT: (amounts, amount_len),
            SignalKind.TIME_DELTA: (deltas, delta_len)}


def _score_table(model: HiddenMarkovModel, values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    ll = log_likelihood_batch(model, model.encode(values), lengths)
    out = np.zeros(len(lengths))
    scored = lengths > 0
    out[scored] = ll[scored] / lengths[scored]
    return out


def enrich_arrays(txns: Sequence[Transaction], registry: ModelRegistry | None) -> dict:
    """Feature columns for ``txns`` (input order), keyed by column name.

    With ``registry=None`` only the aggregate columns are computed.
    """
    row_of = {t.tx_id: i for i, t in enumerate(txns)}
    if len(row_of) != len(txns):
        raise ValueError("duplicate tx_id in input")
    n = len(txns)
    cols = {name: np.zeros(n, dtype=np.int64 if name in ("aggch1", "aggch3", "aggtm1", "aggtm3")
                           else np.float64) for name in AGG_NAMES}
    if registry is not None:
        for name in HMM_NAMES:
            cols[name] = np.zeros(n)
        for name in HIST_NAMES:
            cols[name] = np.zeros(n, dtype=np.int64)

    for kind, prefix, attr in ((ActorKind.CARD_HOLDER, "aggch", "country"),
                               (ActorKind.TERMINAL, "aggtm", "card_type")):
        histories = group_by_actor(txns, kind)
        for h in histories:
            rows = np.array([row_of[t.tx_id] for t in h.transactions])
            ts, amounts = h.timestamps, h.amounts
            c, s = _rolling(ts, amounts)
            cols[prefix + "1"][rows], cols[prefix + "2"][rows] = c, s
            c, s = _grouped_rolling(ts, amounts, [getattr(t, attr) for t in h.transactions])
            cols[prefix + "3"][rows], cols[prefix + "4"][rows] = c, s

        if registry is None:
            continue
        w = registry.window_size
        tables = {s: ([], []) for s in SignalKind}
        row_parts = []
        for h in histories:
            row_parts.append(np.array([row_of[t.tx_id] for t in h.transactions]))
            for s, (vals, lens) in _history_windows(h, w).items():
                tables[s][0].append(vals)
                tables[s][1].append(lens)
        if not histories:
            continue
        rows = np.concatenate(row_parts)
        hist_name = "hist_len_ch" if kind is ActorKind.CARD_HOLDER else "hist_len_tm"
        cols[hist_name][rows] = np.concatenate(tables[SignalKind.AMOUNT][1])
        for i, p in enumerate(PERSPECTIVES):
            if p.actor is not kind:
                continue
            vals = np.concatenate(tables[p.signal][0])
            lens = np.concatenate(tables[p.signal][1])
            cols[HMM_NAMES[i]][rows] = _score_table(registry[p], vals, lens)
    return cols


def enrich_dataset(txns: Sequence[Transaction], registry: ModelRegistry) -> list[EnrichedTransaction]:
    """Attach aggregate and HMM features to each transaction (same order).

    Features of a transaction only look at transactions of the same card or
    terminal that precede it in (timestamp, tx_id) order.
    """
    txns = list(txns)
    cols = enrich_arrays(txns, registry)
    out = []
    for i, t in enumerate(txns):
        agg = AggregateFeatureSet(*(cols[n][i].item() for n in AGG_NAMES))
        hmm = HmmFeatureSet(tuple(float(cols[n][i]) for n in HMM_NAMES),
                            int(cols["hist_len_ch"][i]), int(cols["hist_len_tm"][i]))
        out.append(EnrichedTransaction(t, agg, hmm))
    return out


def write_enriched_csv(path, rows: Iterable[EnrichedTransaction]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(ENRICHED_HEADER)
        for r in rows:
            t = r.transaction
            writer.writerow([
                t.tx_id, t.timestamp, t.card_id, t.terminal_id, repr(float(t.amount)),
                t.country, t.card_type,
                *(repr(float(v)) if isinstance(v, float) else v for v in r.aggregates.as_tuple()),
                *(repr(float(v)) for v in r.hmm.values),
                r.hmm.hist_len_ch, r.hmm.hist_len_tm, int(r.label),
            ])


def read_enriched_csv(path) -> list[EnrichedTransaction]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ENRICHED_HEADER:
            raise ValueError(f"{path}: unexpected enriched CSV header")
        out = []
        for row in reader:
            label = row["label"] == "1"
            t = Transaction(int(row["tx_id"]), int(row["timestamp"]), row["card_id"],
                            row["terminal_id"], float(row["amount"]), row["country"],
                            row["card_type"], label)
            agg = AggregateFeatureSet(
                *(int(row[n]) if n[-1] in "13" else float(row[n]) for n in AGG_NAMES))
            hmm = HmmFeatureSet(tuple(float(row[n]) for n in HMM_NAMES),
                                int(row["hist_len_ch"]), int(row["hist_len_tm"]))
            out.append(EnrichedTransaction(t, agg, hmm))
        return out
