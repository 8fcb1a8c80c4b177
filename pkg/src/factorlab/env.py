"""Fixed-horizon trading MDP over a PriceTable.

Each step trades to the target weights at the decision close, holds for K days, and
returns the scalar reward together with the per-asset reward factor matrix.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .accounting import (
    DEFAULT_ALPHA,
    DEFAULT_INVEST_AMOUNT,
    DEFAULT_LEVERAGE,
    PortfolioSnapshot,
    apply_rebalance,
    check_weights,
    portfolio_value,
    total_value,
)
from .baselines import BaselineProvider, baseline_weights
from .data import PERCENT, RAW, DataError, PeriodGrid, PriceTable, covariance, history_matrix


@dataclass(frozen=True)
class State:
    X: np.ndarray  # n x K*M
    w_au: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        w = np.asarray(self.w_au, dtype=float)
        if X.ndim != 2 or w.shape != (X.shape[0],):
            raise ValueError(f"state shapes disagree: X {X.shape}, w_au {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("w_au must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "w_au", w)

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass(frozen=True)
class RewardFactorMatrix:
    Re: np.ndarray  # percent per day
    Va: np.ndarray  # percent^2
    Co: np.ndarray  # percent^2
    Ts: np.ndarray  # fraction of T

    def as_array(self) -> np.ndarray:
        """n x 4 matrix with columns Re, Va, Co, Ts."""
        return np.column_stack([self.Re, self.Va, self.Co, self.Ts])

    def sums(self) -> tuple[float, float, float, float]:
        return float(self.Re.sum()), float(self.Va.sum()), float(self.Co.sum()), float(self.Ts.sum())


FACTOR_NAMES = ("Re", "Va", "Co", "Ts")


@dataclass
class Transition:
    s: State
    a: np.ndarray
    r_elem: RewardFactorMatrix
    r: float
    s_next: State
    done: bool
    info: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EnvConfig:
    lambda1: float = 0.5
    lambda2: float = 0.01
    alpha: float = DEFAULT_ALPHA
    K: int = 5
    M: int = 10
    T: float = DEFAULT_INVEST_AMOUNT
    gamma: float = 0.99
    horizon: int = 100
    leverage: float = DEFAULT_LEVERAGE

    def __post_init__(self):
        if not (self.lambda1 > 0 and self.lambda2 > 0):
            raise ValueError("lambda1 and lambda2 must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.K < 1 or self.M < 1 or self.horizon < 1:
            raise ValueError("K, M and horizon must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not self.leverage > 0:
            raise ValueError("leverage must be positive")


@dataclass(frozen=True)
class StepContext:
    """Everything the reward and its factor decomposition need for one period."""

    K: int
    T: float
    alpha: float
    lambda1: float
    lambda2: float
    v_p: float  # portfolio value at period end
    sigma: np.ndarray  # raw covariance
    sigma_pct: np.ndarray  # percent covariance
    q: np.ndarray  # positions held through the period
    dq: np.ndarray
    p_prev: np.ndarray
    p_now: np.ndarray


def reward(a, ctx: StepContext) -> float:
    w = np.asarray(a, dtype=float)
    ret = (ctx.v_p / ctx.T - 1.0) / ctx.K
    var = float(w @ ctx.sigma @ w)
    scale = float(np.abs(ctx.dq) @ ctx.p_prev) / ctx.T
    return float(ret - ctx.lambda1 * var - ctx.lambda2 * scale)


def reward_factors(a, ctx: StepContext) -> RewardFactorMatrix:
    w = np.asarray(a, dtype=float)
    q = np.asarray(ctx.q, dtype=float)
    traded = np.abs(np.asarray(ctx.dq, dtype=float)) * ctx.p_prev
    Re = (q * (ctx.p_now - ctx.p_prev) - ctx.alpha * traded) / ctx.T * 100.0 / ctx.K
    Va = w * w * np.diag(ctx.sigma_pct)
    Co = w * (ctx.sigma_pct @ w) - Va
    Ts = traded / ctx.T
    return RewardFactorMatrix(Re, Va, Co, Ts)


class TradingEnv:
    """Episode = ``cfg.horizon`` periods starting at decision column ``first_decision_index``
    (default K*M, the earliest day with a full lookback window)."""

    def __init__(self, table: PriceTable, cfg: EnvConfig, provider: BaselineProvider | None = None,
                 first_decision_index: int | None = None, log_transitions: bool = False):
        self.table = table
        self.cfg = cfg
        self.provider = provider or BaselineProvider("equal_weight")
        d0 = cfg.K * cfg.M if first_decision_index is None else first_decision_index
        self.grid = PeriodGrid(cfg.K, cfg.M, d0, cfg.horizon)
        self.log_transitions = log_transitions
        self.log: list[dict] = []
        self._cache: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self.t = 0
        self.done = True
        self.snap: PortfolioSnapshot | None = None
        self.state: State | None = None

    @property
    def n(self) -> int:
        return self.table.n

    def _period_data(self, t: int):
        hit = self._cache.get(t)
        if hit is None:
            X = history_matrix(self.table, self.grid, t)
            hit = (X, covariance(X, RAW).sigma, covariance(X, PERCENT).sigma)
            self._cache[t] = hit
        return hit

    def _state(self, t: int, w_au=None) -> State:
        X = self._period_data(t)[0]
        if w_au is None:
            w_au = baseline_weights(self.provider, X, t)
        return State(X, w_au)

    def reset(self) -> State:
        cfg = self.cfg
        if self.table.num_days < cfg.K * cfg.M + cfg.K:
            raise DataError(
                f"table has {self.table.num_days} days, need at least K*M + K = {cfg.K * cfg.M + cfg.K}"
            )
        if cfg.K * cfg.M - self.n - 1 <= 0:
            raise DataError(f"K*M = {cfg.K * cfg.M} is too short a window for {self.n} assets "
                            f"(need K*M > n + 1)")
        self.grid.check(self.table)
        self.t = 1
        self.done = False
        self.snap = PortfolioSnapshot.flat(self.n, cfg.T)
        self.log = []
        self.state = self._state(1)
        return self.state

    def step(self, a) -> Transition:
        if self.done:
            raise RuntimeError("step called on a finished episode; call reset()")
        cfg, t = self.cfg, self.t
        w = check_weights(a, cfg.leverage)
        closes = self.table.closes
        p_prev = closes[:, self.grid.decision_index(t)]
        v_prev_end = total_value(self.snap, p_prev)
        snap, dq, cost = apply_rebalance(self.snap, w, p_prev, cfg.T, cfg.alpha)
        days = [self.grid.day_index(t, k) for k in range(1, cfg.K + 1)]
        daily = [total_value(snap, closes[:, d]) for d in days]
        p_now = closes[:, days[-1]]
        v_now = daily[-1]
        _, sigma, sigma_pct = self._period_data(t)
        ctx = StepContext(cfg.K, cfg.T, cfg.alpha, cfg.lambda1, cfg.lambda2,
                          portfolio_value(cfg.T, v_now, v_prev_end), sigma, sigma_pct,
                          snap.positions, dq, p_prev, p_now)
        r = reward(w, ctx)
        factors = reward_factors(w, ctx)

        done = t >= cfg.horizon
        s_next = self._state(t + 1, self.state.w_au if done else None)
        info = {
            "period": t,
            "daily_totals": daily,
            "r_ta": v_now / v_prev_end - 1.0,
            "eps": float(w @ sigma @ w),
            "cost": cost,
            "dq": dq,
            "positions": snap.positions,
            "cash": snap.cash,
            "v_p": ctx.v_p,
        }
        tr = Transition(self.state, w, factors, r, s_next, done, info)
        if self.log_transitions:
            re, va, co, ts = factors.sums()
            self.log.append({"period": t, "action": w.copy(), "reward": r,
                             "Re": re, "Va": va, "Co": co, "Ts": ts})
        self.snap = snap
        self.state = s_next
        self.t = t + 1
        self.done = done
        return tr


def write_transition_log(records: list[dict], out: TextIO) -> None:
    """One row per step: period, reward, the four factor sums, then the action weights."""
    w = csv.writer(out, lineterminator="\n")
    n = len(records[0]["action"]) if records else 0
    w.writerow(["period", "reward", "Re", "Va", "Co", "Ts"] + [f"w_{i + 1}" for i in range(n)])
    for rec in records:
        w.writerow([rec["period"]] + [repr(float(rec[k])) for k in ("reward", "Re", "Va", "Co", "Ts")]
                   + [repr(float(x)) for x in rec["action"]])
