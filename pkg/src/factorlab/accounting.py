"""Integer-share portfolio bookkeeping.

Positions are whole shares (negative means short), cash may go negative (margin),
and every order executes at the decision-day close.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_ALPHA = 0.001
DEFAULT_INVEST_AMOUNT = 1e6
DEFAULT_LEVERAGE = 1.0


def check_weights(w, leverage_limit: float = DEFAULT_LEVERAGE, atol: float = 1e-9) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or not np.all(np.isfinite(w)):
        raise ValueError("weights must be a finite 1-d vector")
    gross = float(np.abs(w).sum())
    if gross > leverage_limit + atol:
        raise ValueError(f"gross exposure {gross:.6g} exceeds leverage limit {leverage_limit}")
    return w


@dataclass(frozen=True)
class PortfolioSnapshot:
    cash: float
    positions: np.ndarray
    invest_amount: float
    period: int = 0

    def __post_init__(self):
        if not self.invest_amount > 0:
            raise ValueError("invest_amount must be positive")
        q = np.asarray(self.positions, dtype=np.int64)
        object.__setattr__(self, "positions", q)

    @classmethod
    def flat(cls, n: int, invest_amount: float = DEFAULT_INVEST_AMOUNT) -> "PortfolioSnapshot":
        return cls(float(invest_amount), np.zeros(n, dtype=np.int64), float(invest_amount), 0)


def target_positions(w, T: float, p_prev) -> np.ndarray:
    """q_i = floor(T * w_i / p_i), rounding toward -inf for shorts too."""
    p_prev = np.asarray(p_prev, dtype=float)
    if T <= 0 or np.any(p_prev <= 0):
        raise ValueError("investment amount and prices must be positive")
    return np.floor(T * np.asarray(w, dtype=float) / p_prev).astype(np.int64)


def market_order(q_new, q_old) -> np.ndarray:
    q_new = np.asarray(q_new, dtype=np.int64)
    q_old = np.asarray(q_old, dtype=np.int64)
    if q_new.shape != q_old.shape:
        raise ValueError(f"position length mismatch: {q_new.shape} vs {q_old.shape}")
    return q_new - q_old


def total_value(snap: PortfolioSnapshot, p) -> float:
    return float(snap.cash + snap.positions @ np.asarray(p, dtype=float))


def portfolio_value(T: float, v_now: float, v_prev_end: float) -> float:
    """Investment amount plus the change in total value since the last period closed."""
    return T + (v_now - v_prev_end)


def apply_rebalance(snap: PortfolioSnapshot, w, p_prev, T: float, alpha: float = DEFAULT_ALPHA):
    """Trade to the floored target at ``p_prev``.

    Returns ``(new_snapshot, dq, cost)``; cost = alpha * |dq| . p_prev is paid from cash.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    p_prev = np.asarray(p_prev, dtype=float)
    q_new = target_positions(w, T, p_prev)
    dq = market_order(q_new, snap.positions)
    turnover = float(np.abs(dq) @ p_prev)
    cost = alpha * turnover
    cash = snap.cash - float(dq @ p_prev) - cost
    return PortfolioSnapshot(cash, q_new, T, snap.period + 1), dq, cost
