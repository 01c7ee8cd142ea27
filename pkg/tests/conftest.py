import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from trompt.model import CATEGORICAL, NUMERICAL, FeatureColumn, ModelConfig, TromptModel  # noqa: E402


def small_model(B=4, kinds=("n", "n", "c"), P=2, d=4, L=2, T=2, seed=0, cardinality=3, dtype=np.float64, **overrides):
    """A tiny model plus a matching random batch ``X``."""
    columns = [
        FeatureColumn(f"col{j}", CATEGORICAL if k == "c" else NUMERICAL, cardinality if k == "c" else 0)
        for j, k in enumerate(kinds)
    ]
    cfg = ModelConfig(d=d, P=P, L=L, T=T, C=len(columns), **overrides)
    model = TromptModel(cfg, columns, dtype=dtype).init(seed)
    rng = np.random.default_rng(seed + 1)
    X = np.empty((B, len(columns)))
    for j, col in enumerate(columns):
        X[:, j] = rng.integers(0, col.cardinality, B) if col.kind == CATEGORICAL else rng.standard_normal(B)
    return model, X


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, title, passed, detail):
    ACCEPTANCE[number] = (title, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} :: {detail}")
