"""Out-of-sample evaluation: daily equity curves, base-2 log returns and the metric battery.

The trained agent trades integer shares every K days through the environment; the
online portfolio selection benchmarks rebalance daily on fractional simplex weights.
Both are marked to market on the same daily grid.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, TextIO

import numpy as np

from .accounting import DEFAULT_ALPHA, DEFAULT_INVEST_AMOUNT, DEFAULT_LEVERAGE
from .agent import act
from .baselines import BaselineProvider, OlpsStrategy, daily_ratios, run_strategy
from .data import PeriodGrid, PriceTable
from .env import EnvConfig, State, TradingEnv
from .nn import MlpParams

REPORT_SCHEMA_VERSION = 1
AGENT_NAME = "Factor-MCLS"
REPORT_COLUMNS = ("AR", "DR", "Std", "SR", "LStd", "STR")
_HIGHER_IS_BETTER = {"AR": True, "DR": True, "Std": False, "SR": True, "LStd": False, "STR": True}


@dataclass
class EquityCurve:
    dates: tuple[str, ...]
    total: np.ndarray  # total asset value at each day's close
    portfolio: np.ndarray
    cash: np.ndarray
    initial_value: float  # value at the close before the first day
    trades: list = field(default_factory=list)  # (period, dq, cost)

    def __post_init__(self):
        self.total = np.asarray(self.total, dtype=float)
        self.portfolio = np.asarray(self.portfolio, dtype=float)
        self.cash = np.asarray(self.cash, dtype=float)
        k = len(self.dates)
        if not (self.total.shape == self.portfolio.shape == self.cash.shape == (k,)):
            raise ValueError("equity curve columns must all match the date count")
        if not np.all(np.isfinite(self.total)) or not math.isfinite(self.initial_value):
            raise ValueError("equity values must be finite")

    def __len__(self):
        return len(self.dates)

    def write(self, out: TextIO) -> None:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["date", "total_value", "portfolio_value", "cash"])
        for row in zip(self.dates, self.total, self.portfolio, self.cash):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])


@dataclass(frozen=True)
class BacktestConfig:
    invest_amount: float = DEFAULT_INVEST_AMOUNT
    alpha: float = DEFAULT_ALPHA  # agent cost rate
    benchmark_alpha: float = 0.0
    leverage: float = DEFAULT_LEVERAGE
    lambda1: float = 0.5
    lambda2: float = 0.01


@dataclass
class ActorPolicy:
    """Noise-free trained actor."""

    actor: MlpParams
    leverage: float = DEFAULT_LEVERAGE

    def __call__(self, s: State) -> np.ndarray:
        return act(self.actor, s, explore=False, leverage=self.leverage)


@dataclass
class ConstantPolicy:
    weights: np.ndarray

    def __call__(self, s: State) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)


def run_backtest(policy: OlpsStrategy | Callable[[State], np.ndarray], table: PriceTable,
                 grid: PeriodGrid, cfg: BacktestConfig = BacktestConfig(),
                 provider: BaselineProvider | None = None) -> EquityCurve:
    """Run ``policy`` over the grid's window and mark to market daily."""
    grid.check(table)
    first = grid.first_decision_index
    days = grid.num_periods * grid.K
    dates = table.dates[first + 1: first + 1 + days]
    if isinstance(policy, OlpsStrategy):
        return _run_benchmark(policy, table, grid, cfg, dates)

    env_cfg = EnvConfig(cfg.lambda1, cfg.lambda2, cfg.alpha, grid.K, grid.M, cfg.invest_amount,
                        0.0, grid.num_periods, cfg.leverage)
    env = TradingEnv(table, env_cfg, provider, first_decision_index=first)
    s = env.reset()
    total, portfolio, cash, trades = [], [], [], []
    done = grid.num_periods == 0
    v_prev_end = cfg.invest_amount
    while not done:
        tr = env.step(policy(s))
        daily = tr.info["daily_totals"]
        total.extend(daily)
        portfolio.extend(cfg.invest_amount + (v - v_prev_end) for v in daily)
        cash.extend([tr.info["cash"]] * len(daily))
        trades.append((tr.info["period"], tr.info["dq"], tr.info["cost"]))
        v_prev_end = daily[-1]
        s, done = tr.s_next, tr.done
    return EquityCurve(dates, total, portfolio, cash, cfg.invest_amount, trades)


def _run_benchmark(strategy: OlpsStrategy, table, grid, cfg: BacktestConfig, dates) -> EquityCurve:
    """Fractional daily rebalancing; the cost rate applies to the L1 distance from the drifted
    weights (cash at the start)."""
    weights = run_strategy(strategy, table, grid)
    ratios = daily_ratios(table)
    first = grid.first_decision_index
    wealth = cfg.invest_amount
    held = np.zeros(table.n)
    total = np.empty(len(weights))
    trades = []
    for j, b in enumerate(weights):
        x = ratios[first + j]
        turnover = float(np.abs(b - held).sum())
        cost = cfg.benchmark_alpha * turnover * wealth
        wealth = (wealth - cost) * float(b @ x)
        held = b * x / float(b @ x)
        total[j] = wealth
        trades.append((j + 1, b.copy(), cost))
    return EquityCurve(dates, total, total.copy(), np.zeros(len(total)), cfg.invest_amount, trades)


def daily_returns(curve: EquityCurve) -> np.ndarray:
    """log2(v_d / v_{d-1}); the first day chains to the curve's initial value."""
    v = np.concatenate([[curve.initial_value], curve.total])
    bad = np.flatnonzero(v <= 0)
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"non-positive equity value {v[i]!r} at index {i - 1}")
    if len(v) < 2:
        raise ValueError("equity curve needs at least one day")
    return np.log2(v[1:] / v[:-1])


@dataclass(frozen=True)
class MetricReport:
    AR: float
    DR: float
    Var: float
    Std: float
    LStd: float
    SR: float | None  # None when Std == 0
    STR: float | None  # None when LStd == 0
    r_f: float = 0.0
    M_ac: float = 0.0


def metrics(returns, r_f: float = 0.0, M_ac: float = 0.0) -> MetricReport:
    r = np.asarray(returns, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("returns must be a nonempty vector")
    ar = float(r.sum())
    dr = ar / r.size
    var = float(np.mean((r - dr) ** 2))
    std = math.sqrt(var)
    lstd = math.sqrt(float(np.mean(np.minimum(r - M_ac, 0.0) ** 2)))
    sr = (dr - r_f) / std if std > 0 else None
    st = (dr - M_ac) / lstd if lstd > 0 else None
    return MetricReport(ar, dr, var, std, lstd, sr, st, r_f, M_ac)


# --------------------------------------------------------------------------- report tables


def ordered_names(results: Mapping[str, MetricReport]) -> list[str]:
    names = sorted(n for n in results if n != AGENT_NAME)
    return ([AGENT_NAME] if AGENT_NAME in results else []) + names


def best_flags(results: Mapping[str, MetricReport]) -> dict[str, set[str]]:
    """Metric -> strategies holding the best value (ties all flagged; undefined never best)."""
    flags = {}
    for col in REPORT_COLUMNS:
        vals = {n: getattr(m, col) for n, m in results.items() if getattr(m, col) is not None}
        if not vals:
            flags[col] = set()
            continue
        target = max(vals.values()) if _HIGHER_IS_BETTER[col] else min(vals.values())
        flags[col] = {n for n, v in vals.items() if v == target}
    return flags


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report(results: Mapping[str, MetricReport], meta: Mapping[str, str] | None = None) -> tuple[str, dict]:
    """Delimited text and a structured document with identical content."""
    if not results:
        raise ValueError("no results to report")
    names = ordered_names(results)
    flags = best_flags(results)
    buf = io.StringIO()
    for key in sorted(meta or {}):
        buf.write(f"# {key}={meta[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["strategy", *REPORT_COLUMNS, "Var", "r_f", "M_ac", "best"])
    rows = []
    for name in names:
        m = results[name]
        best = [c for c in REPORT_COLUMNS if name in flags[c]]
        w.writerow([name] + [_fmt(getattr(m, c)) for c in REPORT_COLUMNS]
                   + [_fmt(m.Var), _fmt(m.r_f), _fmt(m.M_ac), ";".join(best)])
        rows.append({
            "strategy": name,
            "metrics": {c: {"value": getattr(m, c), "best": name in flags[c]} for c in REPORT_COLUMNS},
            "Var": m.Var, "r_f": m.r_f, "M_ac": m.M_ac,
        })
    doc = {"schema_version": REPORT_SCHEMA_VERSION, "meta": dict(meta or {}), "rows": rows}
    return buf.getvalue(), doc


def dump_report_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def parse_report(text: str) -> dict[str, MetricReport]:
    """Inverse of the delimited output of ``report``."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    out = {}
    for row in rows:
        def val(key):
            return None if row[key] == "" else float(row[key])
        out[row["strategy"]] = MetricReport(val("AR"), val("DR"), val("Var"), val("Std"), val("LStd"),
                                            val("SR"), val("STR"), val("r_f"), val("M_ac"))
    return out


def parse_report_json(doc: dict) -> dict[str, MetricReport]:
    if doc.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema {doc.get('schema_version')!r}")
    out = {}
    for row in doc["rows"]:
        m = row["metrics"]
        out[row["strategy"]] = MetricReport(m["AR"]["value"], m["DR"]["value"], row["Var"], m["Std"]["value"],
                                            m["LStd"]["value"], m["SR"]["value"], m["STR"]["value"],
                                            row["r_f"], row["M_ac"])
    return out
