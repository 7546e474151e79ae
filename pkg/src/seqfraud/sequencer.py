"""Per-actor transaction histories, perspective corpora and scoring windows."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple

import numpy as np


@dataclass(frozen=True, slots=True)
class Transaction:
    tx_id: int
    timestamp: int
    card_id: str
    terminal_id: str
    amount: float
    country: str
    card_type: str
    is_fraud: bool

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f"transaction {self.tx_id}: negative amount")
        if self.timestamp < 0:
            raise ValueError(f"transaction {self.tx_id}: negative timestamp")


class ActorKind(str, Enum):
    CARD_HOLDER = "ch"
    TERMINAL = "tm"


class SignalKind(str, Enum):
    AMOUNT = "amount"
    TIME_DELTA = "timedelta"


class HistoryLabel(str, Enum):
    GENUINE = "genuine"
    COMPROMISED = "compromised"


class Perspective(NamedTuple):
    actor: ActorKind
    history: HistoryLabel
    signal: SignalKind

    @property
    def name(self) -> str:
        return f"{self.actor.value}_{self.history.value}_{self.signal.value}"

    @classmethod
    def from_name(cls, name: str) -> "Perspective":
        actor, history, signal = name.split("_")
        return cls(ActorKind(actor), HistoryLabel(history), SignalKind(signal))


# card-holder perspectives first, then terminal; genuine before compromised;
# amount before time-delta
PERSPECTIVES: tuple[Perspective, ...] = tuple(
    Perspective(a, h, s)
    for a in (ActorKind.CARD_HOLDER, ActorKind.TERMINAL)
    for h in (HistoryLabel.GENUINE, HistoryLabel.COMPROMISED)
    for s in (SignalKind.AMOUNT, SignalKind.TIME_DELTA)
)


def actor_key(tx: Transaction, kind: ActorKind) -> str:
    return tx.card_id if kind is ActorKind.CARD_HOLDER else tx.terminal_id


@dataclass(frozen=True, eq=False)
class ActorHistory:
    actor_id: str
    kind: ActorKind
    transactions: tuple
    _position: dict = field(init=False, repr=False)

    def __post_init__(self):
        txs = tuple(self.transactions)
        object.__setattr__(self, "transactions", txs)
        object.__setattr__(self, "_position", {t.tx_id: i for i, t in enumerate(txs)})
        for prev, cur in zip(txs, txs[1:]):
            if (prev.timestamp, prev.tx_id) >= (cur.timestamp, cur.tx_id):
                raise ValueError(f"history of {self.actor_id} is not chronological")
        for t in txs:
            if actor_key(t, self.kind) != self.actor_id:
                raise ValueError(f"transaction {t.tx_id} does not belong to {self.actor_id}")

    def __len__(self) -> int:
        return len(self.transactions)

    def position(self, tx_id: int) -> int:
        try:
            return self._position[tx_id]
        except KeyError:
            raise KeyError(f"transaction {tx_id} not in history of {self.actor_id}") from None

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([t.timestamp for t in self.transactions], dtype=np.int64)

    @property
    def amounts(self) -> np.ndarray:
        return np.array([t.amount for t in self.transactions], dtype=np.float64)

    @property
    def compromised(self) -> bool:
        return any(t.is_fraud for t in self.transactions)


def chronological(txns: Iterable[Transaction]) -> list[Transaction]:
    return sorted(txns, key=lambda t: (t.timestamp, t.tx_id))


def group_by_actor(txns: Iterable[Transaction], kind: ActorKind) -> list[ActorHistory]:
    """One chronological history per card (or terminal), ordered by actor id."""
    buckets: dict[str, list[Transaction]] = defaultdict(list)
    seen = set()
    for t in txns:
        if t.tx_id in seen:
            raise ValueError(f"duplicate tx_id {t.tx_id}")
        seen.add(t.tx_id)
        buckets[actor_key(t, kind)].append(t)
    return [ActorHistory(actor, kind, tuple(chronological(buckets[actor])))
            for actor in sorted(buckets)]


def transform(x) -> np.ndarray:
    return np.log1p(np.asarray(x, dtype=np.float64))


def extract_signal(history: ActorHistory, signal: SignalKind) -> np.ndarray:
    """Amounts as ln(1 + amount), or ln(1 + seconds since the previous
    transaction); the time-delta sequence is one shorter than the history."""
    if signal is SignalKind.AMOUNT:
        return transform(history.amounts)
    return transform(np.diff(history.timestamps))


def partition_perspectives(histories: Iterable[ActorHistory]):
    genuine, compromised = [], []
    for h in histories:
        (compromised if h.compromised else genuine).append(h)
    return genuine, compromised


def build_training_corpora(txns: Iterable[Transaction]) -> dict[Perspective, list[np.ndarray]]:
    txns = list(txns)
    corpora: dict[Perspective, list[np.ndarray]] = {p: [] for p in PERSPECTIVES}
    for kind in ActorKind:
        genuine, compromised = partition_perspectives(group_by_actor(txns, kind))
        parts = {HistoryLabel.GENUINE: genuine, HistoryLabel.COMPROMISED: compromised}
        for p in PERSPECTIVES:
            if p.actor is not kind:
                continue
            for h in parts[p.history]:
                seq = extract_signal(h, p.signal)
                if seq.size:
                    corpora[p].append(seq)
    return corpora


def windows(history: ActorHistory, target_tx: int, signal: SignalKind, w: int) -> np.ndarray:
    """The last ``min(w, available)`` observations ending at ``target_tx``."""
    if w < 1:
        raise ValueError("window size must be >= 1")
    pos = history.position(target_tx)
    txs = history.transactions
    if signal is SignalKind.AMOUNT:
        lo = max(0, pos - w + 1)
        return transform([t.amount for t in txs[lo:pos + 1]])
    lo = max(1, pos - w + 1)
    return transform([txs[i].timestamp - txs[i - 1].timestamp for i in range(lo, pos + 1)])
