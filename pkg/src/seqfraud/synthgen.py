"""Seeded synthetic card-transaction stream with planted fraud campaigns.

Genuine traffic: every card has its own log-normal amount habit, daily rate
and a small set of favourite terminals; purchase times follow a two-peak
daily profile.  Fraud: a compromised card gets bursts of 1-3 low "test"
amounts followed by 2-5 high amounts, minutes apart, mostly on compromised
terminals at any hour.

Random streams are keyed by ``(seed, stream, index)`` through
``numpy.random.SeedSequence`` so each card's traffic does not depend on how
many cards precede it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sequencer import Transaction

DAY = 86_400
_Z10 = -1.2815515655446004  # standard normal 10th percentile
_Z95 = 1.6448536269514722

_GENUINE, _FRAUD, _TERMINALS = 0, 1, 2


@dataclass(frozen=True)
class GenConfig:
    n_cards: int = 1000
    n_terminals: int = 200
    n_days: int = 30
    mean_txns_per_card_per_day: float = 1.5
    fraud_card_fraction: float = 0.1
    fraud_terminal_fraction: float = 0.05
    target_fraud_rate: float = 0.01
    seed: int = 42
    countries: tuple = ("BE", "FR", "NL", "DE", "LU")
    card_types: tuple = ("debit", "credit", "prepaid")

    def __post_init__(self):
        for name in ("n_cards", "n_terminals", "n_days", "seed"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mean_txns_per_card_per_day <= 0:
            raise ValueError("mean_txns_per_card_per_day must be positive")
        for name in ("fraud_card_fraction", "fraud_terminal_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 <= self.target_fraud_rate < 1.0:
            raise ValueError("target_fraud_rate must lie in [0, 1)")
        if not self.countries or not self.card_types:
            raise ValueError("countries and card_types must be non-empty")


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _country_weights(n: int) -> np.ndarray:
    w = np.r_[4.0, np.ones(n - 1)] if n > 1 else np.ones(1)
    return w / w.sum()


def _terminal_table(cfg: GenConfig):
    rng = _rng(cfg.seed, _TERMINALS)
    country = rng.choice(len(cfg.countries), size=cfg.n_terminals,
                         p=_country_weights(len(cfg.countries)))
    popularity = 1.0 / (1.0 + rng.permutation(cfg.n_terminals)) ** 0.8
    return country, popularity / popularity.sum()


def _card_habits(cfg: GenConfig, card: int, popularity: np.ndarray):
    rng = _rng(cfg.seed, _GENUINE, card)
    habit = {
        "card_type": int(rng.integers(len(cfg.card_types))),
        "rate": rng.gamma(2.0, cfg.mean_txns_per_card_per_day / 2.0),
        "mu": rng.normal(3.2, 0.6),
        "sigma": rng.uniform(0.3, 0.7),
    }
    k = min(int(rng.integers(2, 7)), cfg.n_terminals)
    habit["favourites"] = rng.choice(cfg.n_terminals, size=k, replace=False, p=popularity)
    return rng, habit


def _genuine_events(cfg: GenConfig, rng, habit, popularity):
    counts = rng.poisson(habit["rate"], size=cfg.n_days)
    n = int(counts.sum())
    day = np.repeat(np.arange(cfg.n_days), counts)
    evening = rng.random(n) < 0.45
    hour = np.where(evening, rng.normal(18.5, 2.0, n), rng.normal(12.5, 2.5, n))
    sec = np.clip((hour * 3600).astype(np.int64), 0, DAY - 1)
    ts = day * DAY + sec
    amount = np.maximum(np.round(rng.lognormal(habit["mu"], habit["sigma"], n), 2), 0.01)
    usual = rng.random(n) < 0.9
    terminal = np.where(usual,
                        rng.choice(habit["favourites"], size=n),
                        rng.choice(cfg.n_terminals, size=n, p=popularity))
    return ts, terminal, amount


def generate(config: GenConfig) -> list[Transaction]:
    """Deterministic synthetic transactions sorted by (timestamp, tx_id)."""
    cfg = config
    if cfg.n_days == 0 or cfg.n_cards == 0:
        return []
    if cfg.n_terminals == 0:
        raise ValueError("infeasible config: cards need at least one terminal")
    n_fraud_cards = int(round(cfg.fraud_card_fraction * cfg.n_cards))
    if cfg.target_fraud_rate > 0 and n_fraud_cards == 0:
        raise ValueError("infeasible config: target_fraud_rate > 0 but no card can be compromised")

    term_country, popularity = _terminal_table(cfg)
    cards = []
    for c in range(cfg.n_cards):
        rng, habit = _card_habits(cfg, c, popularity)
        ts, term, amt = _genuine_events(cfg, rng, habit, popularity)
        cards.append({"habit": habit, "ts": [ts], "term": [term], "amt": [amt],
                      "fraud": [np.zeros(len(ts), dtype=bool)]})
    n_genuine = sum(len(c["ts"][0]) for c in cards)

    n_fraud = int(round(cfg.target_fraud_rate * n_genuine / (1.0 - cfg.target_fraud_rate)))
    if n_fraud:
        frng = _rng(cfg.seed, _FRAUD)
        victims = frng.choice(cfg.n_cards, size=n_fraud_cards, replace=False)
        n_bad_terms = max(1, int(round(cfg.fraud_terminal_fraction * cfg.n_terminals)))
        bad_terms = frng.choice(cfg.n_terminals, size=n_bad_terms, replace=False)
        placed, k = 0, 0
        horizon = cfg.n_days * DAY
        while placed < n_fraud:
            card = cards[victims[k % n_fraud_cards]]
            k += 1
            ts, term, amt = _campaign(frng, card, bad_terms, cfg.n_terminals, horizon)
            take = min(len(ts), n_fraud - placed)
            card["ts"].append(ts[:take])
            card["term"].append(term[:take])
            card["amt"].append(amt[:take])
            card["fraud"].append(np.ones(take, dtype=bool))
            placed += take

    rows = []
    for c, card in enumerate(cards):
        ts = np.concatenate(card["ts"])
        order = np.argsort(ts, kind="stable")
        ts = ts[order]
        # strictly increasing per card
        for i in range(1, len(ts)):
            if ts[i] <= ts[i - 1]:
                ts[i] = ts[i - 1] + 1
        term = np.concatenate(card["term"])[order]
        amt = np.concatenate(card["amt"])[order]
        fraud = np.concatenate(card["fraud"])[order]
        for i in range(len(ts)):
            rows.append((int(ts[i]), c, i, int(term[i]), float(amt[i]), bool(fraud[i])))
    rows.sort()

    ctype = [cfg.card_types[c["habit"]["card_type"]] for c in cards]
    width_c, width_t = len(str(cfg.n_cards - 1)), len(str(cfg.n_terminals - 1))
    return [Transaction(tx_id, ts, f"C{c:0{width_c}d}", f"T{t:0{width_t}d}", amt,
                        cfg.countries[term_country[t]], ctype[c], fraud)
            for tx_id, (ts, c, _, t, amt, fraud) in enumerate(rows)]


def _campaign(rng, card, bad_terms, n_terminals, horizon):
    habit = card["habit"]
    genuine = card["amt"][0]
    low = np.exp(habit["mu"] + _Z10 * habit["sigma"])
    high = np.exp(habit["mu"] + _Z95 * habit["sigma"])
    if genuine.size:
        low = min(low, float(np.quantile(genuine, 0.10)))
        high = max(high, float(np.quantile(genuine, 0.95)))
    n_test = int(rng.integers(1, 4))
    n_high = int(rng.integers(2, 6))
    gaps = np.r_[0, rng.integers(20, 300, n_test - 1), rng.integers(60, 1200, 1),
                 rng.integers(30, 600, n_high - 1)]
    start = int(rng.integers(0, max(1, horizon - 3 * 3600)))
    ts = start + np.cumsum(gaps).astype(np.int64)
    amount = np.r_[low * rng.uniform(0.1, 0.9, n_test), high * rng.uniform(1.5, 4.0, n_high)]
    amount = np.maximum(np.round(amount, 2), 0.01)
    home = bad_terms[rng.integers(len(bad_terms))]
    other = rng.integers(n_terminals, size=len(ts))
    term = np.where(rng.random(len(ts)) < 0.8, home, other)
    return ts, term, amount
