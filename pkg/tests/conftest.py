import numpy as np
import pytest

from factorlab.data import PriceTable
from factorlab.synthetic import business_days


def make_table(closes, tickers=None) -> PriceTable:
    closes = np.asarray(closes, dtype=float)
    n, D = closes.shape
    tickers = tickers or tuple(f"T{i}" for i in range(n))
    return PriceTable(tuple(tickers), business_days(D), closes)


def random_table(rng, n=3, D=80, vol=0.02) -> PriceTable:
    steps = 1.0 + vol * rng.standard_normal((n, D - 1))
    closes = rng.uniform(10, 100, size=(n, 1)) * np.hstack([np.ones((n, 1)), np.cumprod(steps, axis=1)])
    return make_table(closes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
