import numpy as np
import pytest

from owrf.core import Dataset
from owrf.trees import GrowConfig, grow_forest

ACCEPTANCE_LINES = []


def toy_data(n=20, p=3, seed=0, noise=1.0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, p))
    y = 4 * X[:, 0] - 2 * X[:, -1] + noise * rng.standard_normal(n)
    return Dataset(X, y)


def toy_forest(n=20, p=3, m=3, seed=0, kind="cart", n_min=3):
    data = toy_data(n, p, seed)
    if kind == "cart":
        cfg = GrowConfig(q=1, n_min=n_min, kind="cart")
    else:
        cfg = GrowConfig(q=1, n_min=n_min, kind="sut", prob_seq=np.full(p, 1.0 / p))
    return data, grow_forest(data, cfg, m, seed)


@pytest.fixture
def record_acceptance():
    def record(label, passed, detail=""):
        status = "UNVERIFIED" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status}  {label}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
