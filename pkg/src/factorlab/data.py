"""Price ingestion, trading-period grid and the ratio/covariance matrices built on it.

Day indices are 0-based columns of ``PriceTable.closes``. A grid anchors period 1
on the decision day ``first_decision_index``: day ``k`` of period ``t`` is column
``first_decision_index + (t - 1) * K + k`` and the decision close of period ``t``
(the previous period's last day) is column ``first_decision_index + (t - 1) * K``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from datetime import date
from typing import Iterable, TextIO

import numpy as np

RAW = "raw"
PERCENT = "percent"


class DataError(ValueError):
    """Raised for unusable market data (parse failures, empty tables, bad prices)."""


@dataclass(frozen=True)
class DropRecord:
    ticker: str
    reason: str

    def line(self) -> str:
        return f"DROPPED {self.ticker} {self.reason}"


@dataclass(frozen=True, eq=False)
class PriceTable:
    tickers: tuple[str, ...]
    dates: tuple[str, ...]
    closes: np.ndarray  # n x D
    dropped: tuple[DropRecord, ...] = ()

    def __post_init__(self):
        closes = np.asarray(self.closes, dtype=float)
        if closes.ndim != 2 or closes.shape != (len(self.tickers), len(self.dates)):
            raise DataError(
                f"closes shape {closes.shape} does not match "
                f"{len(self.tickers)} tickers x {len(self.dates)} dates"
            )
        if closes.size == 0:
            raise DataError("empty price table")
        if not np.all(np.isfinite(closes)) or np.any(closes <= 0):
            raise DataError("prices must be finite and strictly positive")
        if len(set(self.dates)) != len(self.dates) or list(self.dates) != sorted(self.dates):
            raise DataError("dates must be strictly increasing")
        closes.setflags(write=False)
        object.__setattr__(self, "closes", closes)

    @property
    def n(self) -> int:
        return len(self.tickers)

    @property
    def num_days(self) -> int:
        return len(self.dates)

    def __eq__(self, other):
        if not isinstance(other, PriceTable):
            return NotImplemented
        return (
            self.tickers == other.tickers
            and self.dates == other.dates
            and self.closes.tobytes() == other.closes.tobytes()
        )

    def date_index(self, day: str) -> int:
        """Index of the first trading day on or after ``day``."""
        for i, d in enumerate(self.dates):
            if d >= day:
                return i
        raise DataError(f"no trading day on or after {day}")

    def select(self, tickers: Iterable[str]) -> "PriceTable":
        idx = [self.tickers.index(t) for t in tickers]
        return PriceTable(
            tuple(self.tickers[i] for i in idx), self.dates, self.closes[idx], self.dropped
        )


@dataclass(frozen=True)
class PeriodGrid:
    K: int
    M: int
    first_decision_index: int
    num_periods: int

    def __post_init__(self):
        if self.K < 1 or self.M < 1:
            raise ValueError("K and M must be positive")
        if self.first_decision_index < 0 or self.num_periods < 0:
            raise ValueError("first_decision_index and num_periods must be non-negative")

    def day_index(self, t: int, k: int) -> int:
        return self.first_decision_index + (t - 1) * self.K + k

    def decision_index(self, t: int) -> int:
        """Column of p_{t-1}, the close on which period ``t`` is traded."""
        return self.first_decision_index + (t - 1) * self.K

    def check(self, table: PriceTable) -> None:
        """Full grid invariants against ``table``: enough lookback and enough future days."""
        if self.first_decision_index < self.K * self.M:
            raise DataError(
                f"first_decision_index {self.first_decision_index} < K*M = {self.K * self.M}"
            )
        last = self.first_decision_index + self.num_periods * self.K
        if last > table.num_days - 1:
            raise DataError(
                f"grid needs day {last} but table has {table.num_days} days"
            )

    @classmethod
    def fit(cls, table: PriceTable, K: int, M: int, first_decision_index: int | None = None,
            num_periods: int | None = None, last_day_index: int | None = None) -> "PeriodGrid":
        """Grid starting at the earliest valid decision day unless told otherwise, with as
        many whole periods as fit up to ``last_day_index`` (default: the last column)."""
        d0 = K * M if first_decision_index is None else first_decision_index
        end = table.num_days - 1 if last_day_index is None else last_day_index
        avail = (end - d0) // K
        if num_periods is None:
            num_periods = avail
        elif num_periods > avail:
            raise DataError(f"requested {num_periods} periods but only {avail} fit")
        grid = cls(K, M, d0, max(num_periods, 0))
        grid.check(table)
        return grid


@dataclass(frozen=True)
class CovarianceEstimate:
    sigma: np.ndarray
    scale_mode: str = RAW


def _parse_date(text: str, lineno: int) -> str:
    try:
        return date.fromisoformat(text.strip()).isoformat()
    except ValueError:
        raise DataError(f"line {lineno}: unparseable date {text!r}") from None


def load_price_table(source: TextIO | str, tickers: Iterable[str] | None = None) -> PriceTable:
    """Read ``date,ticker,adj_close`` rows into an aligned table.

    Tickers missing any date that another ticker has are dropped (see ``table.dropped``).
    ``source`` may be an open text stream or the text itself.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    allow = None if tickers is None else set(tickers)
    reader = csv.reader(source)
    header = None
    prices: dict[str, dict[str, float]] = defaultdict(dict)
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row) or row[0].lstrip().startswith("#"):
            continue
        if header is None:
            header = [c.strip().lower() for c in row]
            if header[:3] != ["date", "ticker", "adj_close"]:
                raise DataError(f"line {lineno}: expected header date,ticker,adj_close")
            continue
        if len(row) < 3:
            raise DataError(f"line {lineno}: expected 3 fields, got {len(row)}")
        day = _parse_date(row[0], lineno)
        ticker = row[1].strip()
        if not ticker:
            raise DataError(f"line {lineno}: empty ticker")
        try:
            price = float(row[2])
        except ValueError:
            raise DataError(f"line {lineno}: unparseable price {row[2]!r}") from None
        if allow is not None and ticker not in allow:
            continue
        if not math.isfinite(price) or price <= 0:
            raise DataError(f"line {lineno}: non-positive price {row[2]!r} for {ticker}")
        if day in prices[ticker]:
            raise DataError(f"line {lineno}: duplicate row for {ticker} on {day}")
        prices[ticker][day] = price

    if not prices:
        raise DataError("no rows")
    all_dates = sorted(set().union(*(p.keys() for p in prices.values())))
    kept, dropped = [], []
    for ticker in sorted(prices):
        missing = len(all_dates) - len(prices[ticker])
        if missing:
            dropped.append(DropRecord(ticker, f"missing_dates={missing}"))
        else:
            kept.append(ticker)
    if not kept:
        raise DataError("no tickers left after dropping incomplete series")
    closes = np.array([[prices[t][d] for d in all_dates] for t in kept], dtype=float)
    return PriceTable(tuple(kept), tuple(all_dates), closes, tuple(dropped))


def dump_price_table(table: PriceTable, out: TextIO) -> None:
    """Write ``table`` in the input format; floats use shortest round-trip repr."""
    out.write("date,ticker,adj_close\n")
    for j, d in enumerate(table.dates):
        for i, t in enumerate(table.tickers):
            out.write(f"{d},{t},{float(table.closes[i, j])!r}\n")


def _column(table: PriceTable, day: int) -> np.ndarray:
    if not 0 <= day < table.num_days:
        raise IndexError(f"day index {day} outside table of {table.num_days} days")
    return table.closes[:, day].copy()


def price_vector(table: PriceTable, grid: PeriodGrid, t: int, k: int) -> np.ndarray:
    """Adjusted closes on day ``k`` (1..K) of period ``t``; ``k = K`` is p_t."""
    if not 1 <= k <= grid.K:
        raise IndexError(f"k={k} outside 1..{grid.K}")
    return _column(table, grid.day_index(t, k))


def decision_prices(table: PriceTable, grid: PeriodGrid, t: int) -> np.ndarray:
    """p_{t-1}: the close of the previous period's last day."""
    return _column(table, grid.decision_index(t))


def relative_ratios(table: PriceTable, grid: PeriodGrid, t: int, k: int) -> np.ndarray:
    """z_{t_k}: today's close over the previous trading day's close."""
    if not 1 <= k <= grid.K:
        raise IndexError(f"k={k} outside 1..{grid.K}")
    day = grid.day_index(t, k)
    if day - 1 < 0:
        raise IndexError(f"period {t} day {k} has no previous trading day")
    return _column(table, day) / _column(table, day - 1)


def fluctuation_matrix(table: PriceTable, grid: PeriodGrid, t: int) -> np.ndarray:
    """U_t as an n x K block, column k-1 holding z_{t_k}."""
    return np.column_stack([relative_ratios(table, grid, t, k) for k in range(1, grid.K + 1)])


def history_matrix(table: PriceTable, grid: PeriodGrid, t: int) -> np.ndarray:
    """X_t = [U_{t-M}, ..., U_{t-1}], n x K*M, oldest block first."""
    if grid.day_index(t - grid.M, 1) - 1 < 0:
        raise IndexError(f"period {t} lacks {grid.M} periods of lookback")
    return np.hstack([fluctuation_matrix(table, grid, s) for s in range(t - grid.M, t)])


def covariance(history: np.ndarray, mode: str = RAW) -> CovarianceEstimate:
    """Window covariance of returns with the (K*M - n - 1) denominator.

    ``mode="percent"`` maps ratios r to (r - 1) * 100 before centering.
    """
    X = np.asarray(history, dtype=float)
    n, cols = X.shape
    denom = cols - n - 1
    if denom <= 0:
        raise ValueError(f"covariance denominator K*M - n - 1 = {denom} must be positive")
    if mode == RAW:
        R = X - 1.0
    elif mode == PERCENT:
        R = (X - 1.0) * 100.0
    else:
        raise ValueError(f"unknown scale mode {mode!r}")
    C = R - R.mean(axis=1, keepdims=True)
    sigma = C @ C.T / denom
    sigma = 0.5 * (sigma + sigma.T)
    return CovarianceEstimate(sigma, mode)
