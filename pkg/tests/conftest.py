import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from seqfraud.hmm import FitConfig  # noqa: E402
from seqfraud.pipeline import temporal_split, train_registry  # noqa: E402
from seqfraud.synthgen import GenConfig, generate  # noqa: E402

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


SMALL_GEN = GenConfig(n_cards=200, n_terminals=40, n_days=21, target_fraud_rate=0.02,
                      fraud_card_fraction=0.2, fraud_terminal_fraction=0.1, seed=11)


@pytest.fixture(scope="session")
def small_txns():
    return generate(SMALL_GEN)


@pytest.fixture(scope="session")
def small_registry(small_txns):
    train, _, _ = temporal_split(small_txns)
    registry, _ = train_registry(train, n_states=3, fit=FitConfig(max_iterations=30, n_restarts=2),
                                 master_seed=5)
    return registry
