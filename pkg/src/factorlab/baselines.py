"""Auxiliary baseline-weight providers and the classical online portfolio selection benchmarks.

Providers produce the ``w_au`` half of the agent's state. Strategies consume daily
price-relative vectors and emit long-only weights on the simplex; each call to
``step`` sees the full ratio history up to (and including) the latest close.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import TextIO

import numpy as np

from .data import PeriodGrid, PriceTable

STRATEGY_NAMES = (
    "UBAH", "CRP", "M0", "BK", "UP", "EG", "ONS",
    "ANTICOR", "PAMR", "CWMR", "OLMAR", "RMR", "WMAMR", "CORN",
)


# --------------------------------------------------------------------------- providers


@dataclass
class BaselineProvider:
    kind: str = "equal_weight"
    temperature: float = 1.0
    window: int | None = None
    rows: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("equal_weight", "momentum", "file_loaded"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @classmethod
    def from_file(cls, source: TextIO | str) -> "BaselineProvider":
        """Rows of ``period_index, w_1..w_n``; a non-numeric first row is a header."""
        if isinstance(source, str):
            source = io.StringIO(source)
        rows = {}
        for lineno, row in enumerate(csv.reader(source), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            try:
                t = int(row[0])
            except ValueError:
                if lineno == 1:
                    continue
                raise ValueError(f"line {lineno}: bad period index {row[0]!r}") from None
            rows[t] = np.array([float(v) for v in row[1:]], dtype=float)
        return cls(kind="file_loaded", rows=rows)

    def dump(self, out: TextIO) -> None:
        for t in sorted(self.rows):
            out.write(",".join([str(t)] + [repr(float(v)) for v in self.rows[t]]) + "\n")


def baseline_weights(provider: BaselineProvider, X: np.ndarray, t: int) -> np.ndarray:
    """w_au for period ``t`` given the history matrix X_t (n x K*M)."""
    n = X.shape[0]
    if provider.kind == "equal_weight":
        return np.full(n, 1.0 / n)
    if provider.kind == "momentum":
        cols = X if provider.window is None else X[:, -provider.window:]
        score = ((cols - 1.0) * 100.0).mean(axis=1) / provider.temperature
        e = np.exp(score - score.max())
        return e / e.sum()
    if t not in provider.rows:
        raise KeyError(f"baseline weights file has no row for period {t}")
    w = provider.rows[t]
    if w.shape != (n,):
        raise ValueError(f"baseline row for period {t} has {w.size} weights, expected {n}")
    return w.copy()


# --------------------------------------------------------------------------- simplex helpers


def simplex_projection(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1} (sort-based, Duchi et al. 2008)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


def _clean(b) -> np.ndarray:
    b = np.maximum(np.asarray(b, dtype=float), 0.0)
    return b / b.sum()


def log_optimal(X, b0=None, iters: int = 200, tol: float = 1e-10) -> np.ndarray:
    """Simplex maximiser of sum_j log(b . x_j) via Cover's multiplicative fixed point."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m = X.shape[1]
    b = np.full(m, 1.0 / m) if b0 is None else _clean(b0)
    for _ in range(iters):
        g = (X / (X @ b)[:, None]).mean(axis=0)
        nb = b * g
        nb /= nb.sum()
        if np.abs(nb - b).max() < tol:
            return nb
        b = nb
    return b


def l1_median(P, iters: int = 200, tol: float = 1e-9) -> np.ndarray:
    """Geometric (L1) median of the rows of P via Weiszfeld iterations."""
    P = np.asarray(P, dtype=float)
    y = np.median(P, axis=0)
    for _ in range(iters):
        d = np.linalg.norm(P - y, axis=1)
        nz = d > 1e-12
        if not nz.any():
            return y
        inv = 1.0 / d[nz]
        T = (P[nz] * inv[:, None]).sum(axis=0) / inv.sum()
        eta = int((~nz).sum())
        if eta == 0:
            y_new = T
        else:
            R = ((P[nz] - y) * inv[:, None]).sum(axis=0)
            r = np.linalg.norm(R)
            gamma = 0.0 if r == 0 else min(1.0, eta / r)
            y_new = (1 - gamma) * T + gamma * y
        if np.linalg.norm(y_new - y, 1) <= tol * np.linalg.norm(y, 1):
            return y_new
        y = y_new
    return y


# --------------------------------------------------------------------------- strategies


class OlpsStrategy:
    """Base class. ``step(history, last_b)`` returns the weights for the next day.

    ``history`` is a (t x n) array of daily price relatives observed so far; ``last_b``
    is the previous day's weights. ``warmup_steps`` counts uniform fallbacks.
    """

    name = "?"
    min_history = 0

    def __init__(self, **params):
        self.params = params
        self.warmup_steps = 0

    def reset(self, n: int) -> None:
        self.n = n
        self.warmup_steps = 0

    def initial_weights(self, n: int) -> np.ndarray:
        return np.full(n, 1.0 / n)

    def step(self, history: np.ndarray, last_b: np.ndarray) -> np.ndarray:
        if len(history) < self.min_history:
            self.warmup_steps += 1
            return np.full(self.n, 1.0 / self.n)
        return self.update(history, np.asarray(last_b, dtype=float))

    def update(self, history, last_b):  # pragma: no cover - abstract
        raise NotImplementedError


class UBAH(OlpsStrategy):
    name = "UBAH"
    min_history = 1

    def update(self, history, last_b):
        b = last_b * history[-1]
        return b / b.sum()


class CRP(OlpsStrategy):
    name = "CRP"

    def __init__(self, weights=None):
        super().__init__(weights=weights)

    def _fixed(self):
        w = self.params["weights"]
        return np.full(self.n, 1.0 / self.n) if w is None else _clean(w)

    def initial_weights(self, n):
        self.n = n
        return self._fixed()

    def step(self, history, last_b):
        return self._fixed()


class M0(OlpsStrategy):
    """Order-0 Markov predictor: counts of days each asset was the best performer."""

    name = "M0"
    min_history = 1

    def __init__(self, beta: float = 0.5):
        super().__init__(beta=beta)

    def reset(self, n):
        super().reset(n)
        self.counts = np.zeros(n)

    def update(self, history, last_b):
        self.counts[np.argmax(history[-1])] += 1
        beta = self.params["beta"]
        return (self.counts + beta) / (self.counts.sum() + self.n * beta)


class EG(OlpsStrategy):
    name = "EG"
    min_history = 1

    def __init__(self, eta: float = 0.05):
        super().__init__(eta=eta)

    def update(self, history, last_b):
        x = history[-1]
        b = last_b * np.exp(self.params["eta"] * x / (last_b @ x))
        return b / b.sum()


class UP(OlpsStrategy):
    """Cover's universal portfolio, wealth-weighted over Dirichlet(1) samples."""

    name = "UP"
    min_history = 1

    def __init__(self, samples: int = 10_000, seed: int = 0):
        super().__init__(samples=samples, seed=seed)

    def reset(self, n):
        super().reset(n)
        rng = np.random.default_rng(self.params["seed"])
        self.B = rng.dirichlet(np.ones(n), size=self.params["samples"])
        self.log_wealth = np.zeros(len(self.B))

    def update(self, history, last_b):
        self.log_wealth += np.log(self.B @ history[-1])
        s = np.exp(self.log_wealth - self.log_wealth.max())
        b = s @ self.B
        return b / b.sum()


class ONS(OlpsStrategy):
    """Online Newton step (Agarwal et al. 2006)."""

    name = "ONS"
    min_history = 1

    def __init__(self, eta: float = 0.0, beta: float = 1.0, delta: float = 0.125):
        super().__init__(eta=eta, beta=beta, delta=delta)

    def reset(self, n):
        super().reset(n)
        self.A = np.eye(n)
        self.bvec = np.zeros(n)

    def update(self, history, last_b):
        x = history[-1]
        grad = x / (last_b @ x)
        self.A += np.outer(grad, grad)
        self.bvec += (1.0 + 1.0 / self.params["beta"]) * grad
        target = self.params["delta"] * np.linalg.solve(self.A, self.bvec)
        p = _project_in_norm(target, self.A)
        eta = self.params["eta"]
        return _clean(p * (1 - eta) + eta / self.n)


def _project_in_norm(x, A) -> np.ndarray:
    """argmin_{z in simplex} (z - x)^T A (z - x), solved as a QP."""
    from cvxopt import matrix, solvers

    n = len(x)
    P = matrix(2.0 * A)
    q = matrix(-2.0 * (A @ x))
    G = matrix(-np.eye(n))
    h = matrix(np.zeros(n))
    Aeq = matrix(np.ones((1, n)))
    beq = matrix(1.0)
    sol = solvers.qp(P, q, G, h, Aeq, beq, options={"show_progress": False})
    return _clean(np.array(sol["x"]).ravel())


class ANTICOR(OlpsStrategy):
    """Borodin, El-Yaniv & Gogan (2003) anti-correlation transfers."""

    name = "ANTICOR"

    def __init__(self, window: int = 30):
        super().__init__(window=window)
        self.min_history = 2 * window

    def update(self, history, last_b):
        w = self.params["window"]
        LX1 = np.log(history[-2 * w:-w])
        LX2 = np.log(history[-w:])
        mu1, mu2 = LX1.mean(axis=0), LX2.mean(axis=0)
        sig1, sig2 = LX1.std(axis=0, ddof=1), LX2.std(axis=0, ddof=1)
        cov = (LX1 - mu1).T @ (LX2 - mu2) / (w - 1)
        denom = np.outer(sig1, sig2)
        mcor = np.divide(cov, denom, out=np.zeros_like(cov), where=denom > 0)
        diag = np.diag(mcor)
        claim = np.zeros_like(mcor)
        pairs = (mu2[:, None] > mu2[None, :]) & (mcor > 0)
        bonus = np.maximum(-diag, 0.0)
        claim[pairs] = (mcor + bonus[:, None] + bonus[None, :])[pairs]
        totals = claim.sum(axis=1, keepdims=True)
        transfer = np.divide(last_b[:, None] * claim, totals, out=np.zeros_like(claim),
                             where=totals > 0)
        b = last_b - transfer.sum(axis=1) + transfer.sum(axis=0)
        return _clean(b)


def pamr_update(b, x, eps: float) -> np.ndarray:
    """PAMR-0 step: b - tau (x - mean(x)), tau = max(0, b.x - eps) / ||x - mean(x)||^2."""
    loss = max(0.0, float(b @ x) - eps)
    dev = x - x.mean()
    denom = float(dev @ dev)
    tau = 0.0 if denom == 0 else loss / denom
    return simplex_projection(b - tau * dev)


def olmar_update(b, x_pred, eps: float) -> np.ndarray:
    """Move toward the predicted relatives until b . x_pred reaches eps."""
    loss = max(0.0, eps - float(b @ x_pred))
    dev = x_pred - x_pred.mean()
    denom = float(dev @ dev)
    lam = 0.0 if denom == 0 else loss / denom
    return simplex_projection(b + lam * dev)


def _prices_from_ratios(history, window):
    """Last ``window`` prices relative to the latest one, rebuilt from ratios."""
    tail = history[-(window - 1):] if window > 1 else history[:0]
    rel = np.ones((window, history.shape[1]))
    # rel[j] = p_{t-j} / p_t
    acc = np.ones(history.shape[1])
    for j, x in enumerate(tail[::-1], start=1):
        acc = acc / x
        rel[j] = acc
    return rel


class PAMR(OlpsStrategy):
    name = "PAMR"
    min_history = 1

    def __init__(self, eps: float = 0.5):
        super().__init__(eps=eps)

    def update(self, history, last_b):
        return pamr_update(last_b, history[-1], self.params["eps"])


class OLMAR(OlpsStrategy):
    name = "OLMAR"

    def __init__(self, window: int = 5, eps: float = 10.0):
        super().__init__(window=window, eps=eps)
        self.min_history = window - 1  # a window of w prices needs w - 1 relatives

    def predict(self, history):
        return _prices_from_ratios(history, self.params["window"]).mean(axis=0)

    def update(self, history, last_b):
        return olmar_update(last_b, self.predict(history), self.params["eps"])


class RMR(OlpsStrategy):
    name = "RMR"

    def __init__(self, window: int = 5, eps: float = 10.0):
        super().__init__(window=window, eps=eps)
        self.min_history = window - 1

    def predict(self, history):
        return l1_median(_prices_from_ratios(history, self.params["window"]))

    def update(self, history, last_b):
        return olmar_update(last_b, self.predict(history), self.params["eps"])


class WMAMR(OlpsStrategy):
    """PAMR driven by the mean of the last ``window`` price relatives."""

    name = "WMAMR"

    def __init__(self, window: int = 5, eps: float = 0.5):
        super().__init__(window=window, eps=eps)
        self.min_history = window

    def update(self, history, last_b):
        xx = history[-self.params["window"]:].mean(axis=0)
        return pamr_update(last_b, xx, self.params["eps"])


class CWMR(OlpsStrategy):
    """Confidence-weighted mean reversion, variance form (Li et al. 2011)."""

    name = "CWMR"
    min_history = 1

    def __init__(self, phi: float = 2.0, eps: float = 0.5):
        super().__init__(phi=phi, eps=eps)

    def reset(self, n):
        super().reset(n)
        self.sigma = np.eye(n) / n**2

    def update(self, history, last_b):
        x = history[-1]
        phi, eps = self.params["phi"], self.params["eps"]
        S = self.sigma
        mu = last_b
        M = float(mu @ x)
        V = float(x @ S @ x)
        ones = np.ones(self.n)
        x_bar = float(ones @ S @ x) / float(ones @ S @ ones)
        W = float(x @ S @ ones)
        a = 2 * phi * V * (V - x_bar * W)
        b = (V - x_bar * W) + 2 * phi * V * (eps - M)
        c = eps - M - phi * V
        lam = _largest_root(a, b, c)
        if lam <= 0:
            return mu.copy()
        mu = mu - lam * S @ (x - x_bar)
        # (S^-1 + 2 lam phi x x^T)^-1 via Sherman-Morrison
        Sx = S @ x
        k = 2 * lam * phi
        S = S - k * np.outer(Sx, Sx) / (1.0 + k * V)
        S = 0.5 * (S + S.T)
        self.sigma = S / (self.n * np.trace(S))
        return simplex_projection(mu)


def _largest_root(a, b, c) -> float:
    if abs(a) < 1e-300:
        return 0.0 if b == 0 else max(0.0, -c / b)
    disc = b * b - 4 * a * c
    if disc < 0:
        return 0.0
    r = np.sqrt(disc)
    return max(0.0, (-b + r) / (2 * a), (-b - r) / (2 * a))


def _lagged_windows(history, k):
    """Row j-k holds history[j-k:j] flattened, for every j in k..T-1."""
    T, n = history.shape
    wins = np.lib.stride_tricks.sliding_window_view(history, (k, n))[:, 0]
    return wins[: T - k].reshape(T - k, k * n)


class BK(OlpsStrategy):
    """Gyorfi-Lugosi-Udina kernel experts over (window k, radius l) pairs.

    Expert (k, l) uses the past days whose preceding k-day window lies within
    ``c * l / L`` (Euclidean) of the latest k-day window and plays their log-optimal
    portfolio; experts are mixed by realised wealth under a uniform prior.
    """

    name = "BK"
    min_history = 1

    def __init__(self, K: int = 5, L: int = 10, c: float = 1.0, iters: int = 50):
        super().__init__(K=K, L=L, c=c, iters=iters)

    def reset(self, n):
        super().reset(n)
        K, L = self.params["K"], self.params["L"]
        self.experts = [(k, l) for k in range(1, K + 1) for l in range(1, L + 1)]
        self.expert_b = np.full((len(self.experts), n), 1.0 / n)
        self.log_wealth = np.zeros(len(self.experts))

    def update(self, history, last_b):
        self.log_wealth += np.log(self.expert_b @ history[-1])
        T = len(history)
        c, L, iters = self.params["c"], self.params["L"], self.params["iters"]
        uniform = np.full(self.n, 1.0 / self.n)
        for k in range(1, self.params["K"] + 1):
            rows = [e for e, (kk, _) in enumerate(self.experts) if kk == k]
            if T <= k + 1:
                self.expert_b[rows] = uniform
                continue
            latest = history[T - k:].ravel()
            d = np.linalg.norm(_lagged_windows(history, k) - latest, axis=1)
            js = np.arange(k, T)
            order = np.argsort(d, kind="stable")
            cache = {}
            for e in rows:
                count = int(np.searchsorted(d[order], c * self.experts[e][1] / L, side="right"))
                if count not in cache:
                    if count == 0:
                        cache[count] = uniform
                    else:
                        sel = np.sort(js[order[:count]])
                        cache[count] = log_optimal(history[sel], b0=self.expert_b[e], iters=iters)
                self.expert_b[e] = cache[count]
        s = np.exp(self.log_wealth - self.log_wealth.max())
        b = s @ self.expert_b
        return b / b.sum()


class CORN(OlpsStrategy):
    """Correlation-driven nonparametric learning, single expert (window, rho)."""

    name = "CORN"
    min_history = 1

    def __init__(self, window: int = 5, rho: float = 0.1, iters: int = 100):
        super().__init__(window=window, rho=rho, iters=iters)

    def update(self, history, last_b):
        w, rho = self.params["window"], self.params["rho"]
        T = len(history)
        if T <= w:
            return np.full(self.n, 1.0 / self.n)
        latest = history[T - w:].ravel()
        wins = _lagged_windows(history, w)
        a = wins - wins.mean(axis=1, keepdims=True)
        z = latest - latest.mean()
        denom = np.linalg.norm(a, axis=1) * np.linalg.norm(z)
        corr = np.divide(a @ z, denom, out=np.zeros(len(wins)), where=denom > 0)
        sel = np.arange(w, T)[corr >= rho]
        if sel.size == 0:
            return np.full(self.n, 1.0 / self.n)
        return log_optimal(history[sel], iters=self.params["iters"])


_REGISTRY = {
    cls.name: cls
    for cls in (UBAH, CRP, M0, BK, UP, EG, ONS, ANTICOR, PAMR, CWMR, OLMAR, RMR, WMAMR, CORN)
}


def make_strategy(name: str, **params) -> OlpsStrategy:
    try:
        cls = _REGISTRY[name.upper()]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; known: {', '.join(STRATEGY_NAMES)}") from None
    return cls(**params)


def olps_step(strategy: OlpsStrategy, price_history: np.ndarray, prev_weights) -> np.ndarray:
    """One decision: weights for the next day from ratios observed so far."""
    b = strategy.step(np.asarray(price_history, dtype=float), prev_weights)
    b = np.maximum(b, 0.0)
    return b / b.sum()


def daily_ratios(table: PriceTable) -> np.ndarray:
    """(D-1) x n matrix of day-over-day price relatives."""
    return (table.closes[:, 1:] / table.closes[:, :-1]).T


def run_strategy(strategy: OlpsStrategy, table: PriceTable, grid: PeriodGrid) -> np.ndarray:
    """Daily weights over the grid's window, one row per trading day.

    Row j holds the weights carried over window day j+1, decided at the previous close.
    Ratios before the window are visible as history; the strategy's own state starts on
    the first window day.
    """
    ratios = daily_ratios(table)
    start = grid.first_decision_index  # ratios[d-1] is the relative arriving on day d
    days = grid.num_periods * grid.K
    strategy.reset(table.n)
    out = np.empty((days, table.n))
    if days:
        out[0] = strategy.initial_weights(table.n)
    for j in range(1, days):
        out[j] = olps_step(strategy, ratios[: start + j], out[j - 1])
    return out
