"""Deterministic synthetic price tables for tests, demos and smoke runs."""

from __future__ import annotations

import io
from datetime import date, timedelta

import numpy as np

from .data import PriceTable, dump_price_table, load_price_table


def business_days(n: int, start: str = "2015-01-02") -> tuple[str, ...]:
    """``n`` consecutive weekdays starting on or after ``start``."""
    d = date.fromisoformat(start)
    out = []
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d.isoformat())
        d += timedelta(days=1)
    return tuple(out)


def drift_table(num_days: int = 600, drift: float = 0.002, start_price: float = 100.0,
                start: str = "2015-01-02") -> PriceTable:
    """Two assets: ``DRIFT`` compounds by ``1 + drift`` every day, ``FLAT`` never moves.

    Prices are built by repeated multiplication so every daily ratio is the same float.
    """
    p = np.empty(num_days)
    p[0] = start_price
    for d in range(1, num_days):
        p[d] = p[d - 1] * (1.0 + drift)
    closes = np.vstack([p, np.full(num_days, start_price)])
    return PriceTable(("DRIFT", "FLAT"), business_days(num_days, start), closes)


def random_walk_table(n: int = 29, num_days: int = 1000, seed: int = 0, vol: float = 0.015,
                      start: str = "2015-01-02") -> PriceTable:
    """Geometric random walks with per-asset drift, tickers ``S01``..``Snn``."""
    rng = np.random.default_rng(seed)
    mu = rng.normal(0.0003, 0.0005, size=(n, 1))
    steps = mu + vol * rng.standard_normal((n, num_days - 1))
    logp = np.hstack([np.zeros((n, 1)), np.cumsum(steps, axis=1)])
    closes = rng.uniform(20.0, 200.0, size=(n, 1)) * np.exp(logp)
    tickers = tuple(f"S{i + 1:02d}" for i in range(n))
    return PriceTable(tickers, business_days(num_days, start), closes)


def random_walk_csv(n: int = 30, num_days: int = 1000, seed: int = 0,
                    gap_ticker: int | None = None, gap_day: int | None = None) -> str:
    """Long-format CSV text; if ``gap_ticker`` is set that ticker misses ``gap_day``."""
    table = random_walk_table(n, num_days, seed)
    buf = io.StringIO()
    dump_price_table(table, buf)
    if gap_ticker is None:
        return buf.getvalue()
    missing = f"{table.dates[num_days // 2 if gap_day is None else gap_day]},{table.tickers[gap_ticker]},"
    return "".join(line for line in buf.getvalue().splitlines(keepends=True)
                   if not line.startswith(missing))


def dataset_29(num_days: int = 1000, seed: int = 0) -> PriceTable:
    """30 raw tickers, one with a missing day, so ingestion keeps 29."""
    return load_price_table(random_walk_csv(30, num_days, seed, gap_ticker=7))
