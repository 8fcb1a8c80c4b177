"""Acceptance suite. Each criterion prints one PASS/FAIL line (also repeated in the
terminal summary)."""

import json
import math
import time

import numpy as np
import pytest

from factorlab.agent import (
    AgentConfig,
    CriticBank,
    actor_objective,
    critic_loss,
    project_leverage,
    risk_constraint,
    scalar_targets,
    train,
)
from factorlab.backtest import BacktestConfig, EquityCurve, daily_returns, metrics, run_backtest
from factorlab.baselines import STRATEGY_NAMES, make_strategy, olps_step, run_strategy
from factorlab.cli import main
from factorlab.data import PERCENT, RAW, PeriodGrid, covariance
from factorlab.env import FACTOR_NAMES, EnvConfig, StepContext, TradingEnv, reward_factors
from factorlab.nn import BOUNDED, init_mlp
from factorlab.synthetic import dataset_29, drift_table, random_walk_csv

from conftest import random_table
from test_agent import tiny_batch
from test_nn import fd_grad, rel_err

RESULTS: list[str] = []


def verdict(num: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {num} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _close(a, b, rel=1e-9, abs_=0.0):
    return math.isclose(a, b, rel_tol=rel, abs_tol=abs_)


# ------------------------------------------------------------------ 1. factor identities


def test_criterion_1_factor_identities():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = [0.0, 0.0, 0.0]
    ok = True
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        K = int(rng.integers(1, 6))
        M = int(rng.integers(max(1, (n + 2) // K + 1), 12))
        X = 1 + 0.03 * rng.standard_normal((n, K * M))
        sig, sig_pct = covariance(X, RAW).sigma, covariance(X, PERCENT).sigma
        T = float(rng.choice([1e4, 1e6]))
        p_prev = rng.uniform(1, 500, n)
        w = rng.uniform(-1, 1, n)
        w *= rng.uniform(0, 1) / np.abs(w).sum()
        q = np.floor(T * w / p_prev).astype(np.int64)
        dq = q - rng.integers(-3000, 3000, n)
        p_now = p_prev * (1 + 0.05 * rng.standard_normal(n))
        ctx = StepContext(K, T, 0.001, 0.5, 0.01, T, sig, sig_pct, q, dq, p_prev, p_now)
        f = reward_factors(w, ctx)
        quad = sum(w[i] * sig_pct[i, j] * w[j] for i in range(n) for j in range(n))
        turnover = sum(abs(int(dq[i])) * p_prev[i] for i in range(n)) / T
        e1 = abs(np.sum(f.Va + f.Co) - quad) / max(abs(quad), 1e-300)
        e2 = abs(np.sum(f.Ts) - turnover) / max(turnover, 1e-300)
        e3 = np.max(np.abs(sig_pct - 1e4 * sig)) / max(np.max(np.abs(1e4 * sig)), 1e-300)
        worst = [max(worst[0], e1), max(worst[1], e2), max(worst[2], e3)]
        ok &= (e1 <= 1e-9 or abs(quad) < 1e-300) and e2 <= 1e-9 and e3 <= 1e-9
    elapsed = time.perf_counter() - t0
    verdict(1, "factor-decomposition identities", ok and elapsed < 10,
            f"1000 draws, max rel err {worst[0]:.1e}/{worst[1]:.1e}/{worst[2]:.1e}, {elapsed:.2f}s")


# ------------------------------------------------------------------ 2. reward consistency


def _oracle_bound(closes, dec, K, w, q_old, T, alpha):
    """Per-step bound from full bookkeeping: flooring residue plus cost, as return units."""
    n = closes.shape[0]
    p_prev, p_now = closes[:, dec], closes[:, dec + K]
    q = [math.floor(T * w[i] / p_prev[i]) for i in range(n)]
    residue = sum(abs(T * w[i] / p_prev[i] - q[i]) * abs(p_now[i] - p_prev[i]) for i in range(n))
    cost = alpha * sum(abs(q[i] - q_old[i]) * p_prev[i] for i in range(n))
    return (residue + cost) / (K * T), q


def test_criterion_2_reward_consistency():
    rng = np.random.default_rng(202)
    worst_gap, worst_slack, ok, steps = 0.0, math.inf, True, 0
    for _ in range(500):
        n = int(rng.integers(1, 6))
        K = int(rng.integers(1, 6))
        M = (n + 2) // K + 1 + int(rng.integers(0, 3))
        h = int(rng.integers(1, 5))
        table = random_table(rng, n=n, D=K * M + K * h + 1, vol=0.03)
        cfg = EnvConfig(lambda1=float(rng.uniform(0, 2)), lambda2=float(rng.uniform(0, 0.1)),
                        alpha=float(rng.choice([0.0, 0.001, 0.01])), K=K, M=M,
                        T=float(rng.choice([1e3, 1e6])), horizon=h)
        env = TradingEnv(table, cfg)
        env.reset()
        q_old = [0] * n
        for t in range(1, h + 1):
            w = rng.uniform(-1, 1, n)
            w *= rng.uniform(0, 1) / np.abs(w).sum()
            tr = env.step(w)
            re, va, co, ts = tr.r_elem.sums()
            composite = re / 100 - cfg.lambda1 * (va + co) / 1e4 - cfg.lambda2 * ts
            bound, q_old = _oracle_bound(table.closes, K * M + (t - 1) * K, K, w, q_old, cfg.T, cfg.alpha)
            bound += 1e-12
            gap = abs(tr.r - composite)
            worst_gap = max(worst_gap, gap)
            worst_slack = min(worst_slack, bound - gap)
            ok &= gap <= bound
            steps += 1
    verdict(2, "reward consistency within bookkeeping bound", ok,
            f"500 scenarios, {steps} steps, max gap {worst_gap:.1e}")


# ------------------------------------------------------------------ 3. gradients


def test_criterion_3_gradients():
    rng = np.random.default_rng(303)
    t0 = time.perf_counter()
    ds, n = 3, 2
    errs = {}
    actor = init_mlp([ds, 5, n], rng, BOUNDED)
    bank = CriticBank.create(ds, n, (5,), rng)
    sizes = [actor.num_params()] + [net.num_params() for net in (*bank.online.values(), bank.phi)]
    batch = tiny_batch(rng, B=8)
    for j, f in enumerate(FACTOR_NAMES):
        net = bank.online[f]
        Y = 3 * rng.standard_normal((8, n))
        _, g = critic_loss(net, batch.S, batch.A, Y)
        errs[f"Q_{f}"] = rel_err(g, fd_grad(lambda: critic_loss(net, batch.S, batch.A, Y)[0], net.arrays()))
    y = scalar_targets(batch, bank.phi_target, actor, 0.9)
    _, g = critic_loss(bank.phi, batch.S, batch.A, y)
    errs["phi"] = rel_err(g, fd_grad(lambda: critic_loss(bank.phi, batch.S, batch.A, y)[0], bank.phi.arrays()))
    S = 2 * rng.standard_normal((8, ds))
    xi = np.array([3.0, 5.0])
    pi, g = risk_constraint(S, actor, bank, xi)
    errs["Pi"] = rel_err(g, fd_grad(lambda: risk_constraint(S, actor, bank, xi)[0], actor.arrays()))
    for mode in ("full", "lsv2"):
        cfg = AgentConfig(mode=mode, lambda1=5.0, lambda2=0.3, lambda3=2.0, leverage=1.0)
        _, g = actor_objective(actor, bank, S, cfg, xi)
        errs[f"actor_{mode}"] = rel_err(
            g, fd_grad(lambda: actor_objective(actor, bank, S, cfg, xi)[0]["loss"], actor.arrays()))
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = max(sizes) <= 200 and pi > 0 and all(e <= 1e-4 for e in errs.values()) and elapsed < 60
    verdict(3, "gradients match central differences", ok,
            f"{len(errs)} paths, worst {worst} {errs[worst]:.1e}, max params {max(sizes)}, {elapsed:.1f}s")


# ------------------------------------------------------------------ shared training runs


@pytest.fixture(scope="module")
def drift_runs():
    """200-episode runs of every mode on the two-asset drift environment, same seed."""
    out = {}
    for mode in ("full", "lsv1", "lsv2"):
        env = TradingEnv(drift_table(521), EnvConfig(K=5, M=4, horizon=100))
        t0 = time.perf_counter()
        _, trace = train(env, AgentConfig(episodes=200, seed=7, mode=mode))
        out[mode] = (trace, time.perf_counter() - t0)
    return out


# ------------------------------------------------------------------ 4. trace identities


@pytest.mark.slow
def test_criterion_4_trace_identities(drift_runs):
    ok, checked, worst = True, 0, 0.0
    for mode, (trace, _) in drift_runs.items():
        lam3 = 1.0 if mode == "full" else 0.0
        for r in trace.records:
            if math.isnan(r.L_Q_total):
                continue
            ok &= r.L_Q_total == r.L_Q_Re + r.L_Q_Va + r.L_Q_Co + r.L_Q_Ts
            gap = abs(r.L_pi - (r.L_pi_wr + lam3 * r.Pi))
            worst = max(worst, gap)
            ok &= gap <= 1e-10
            checked += 1
    ok &= checked > 0
    verdict(4, "trace bookkeeping identities", ok, f"{checked} records, max recombination gap {worst:.1e}")


# ------------------------------------------------------------------ 5. metrics


def _loop_metrics(r, r_f, m_ac):
    N = len(r)
    ar = 0.0
    for x in r:
        ar += x
    dr = ar / N
    var = 0.0
    down = 0.0
    for x in r:
        var += (x - dr) ** 2
        down += min(x - m_ac, 0.0) ** 2
    var /= N
    std = math.sqrt(var)
    lstd = math.sqrt(down / N)
    return {"AR": ar, "DR": dr, "Var": var, "Std": std, "LStd": lstd,
            "SR": (dr - r_f) / std if std > 0 else None, "STR": (dr - m_ac) / lstd if lstd > 0 else None}


def test_criterion_5_metric_oracle():
    rng = np.random.default_rng(505)
    ok, worst = True, 0.0
    for _ in range(100):
        r = 0.02 * rng.standard_normal(120)
        r_f, m_ac = float(rng.uniform(0, 1e-3)), float(rng.uniform(-1e-3, 1e-3))
        got = metrics(r, r_f, m_ac)
        for key, want in _loop_metrics(r.tolist(), r_f, m_ac).items():
            have = getattr(got, key)
            err = abs(have - want) / max(abs(want), 1.0)
            worst = max(worst, err)
            ok &= err <= 1e-12
        v = np.cumprod(np.exp(0.02 * rng.standard_normal(120))) * 1000.0
        curve = EquityCurve(tuple(map(str, range(120))), v, v, np.zeros(120), 1000.0)
        ok &= abs(metrics(daily_returns(curve)).AR - math.log2(v[-1] / 1000.0)) <= 1e-10
    doubling = EquityCurve(("d",), [2.0], [2.0], [0.0], 1.0)
    ok &= daily_returns(doubling).tolist() == [1.0]
    verdict(5, "metric oracle, telescoping, base-2 doubling", ok, f"100 series, max err {worst:.1e}")


# ------------------------------------------------------------------ 6. training smoke


@pytest.mark.slow
def test_criterion_6_training_smoke(drift_runs):
    trace, elapsed = drift_runs["full"]
    first, last = trace.records[0], trace.records[-1]
    ok = elapsed < 300 and last.ARD > first.ARD and last.NPRW >= 80 and len(trace) == 201
    verdict(6, "synthetic drift training smoke", ok,
            f"{elapsed:.0f}s, ARD {first.ARD:.4g} -> {last.ARD:.4g}, NPRW {last.NPRW}/100")


# ------------------------------------------------------------------ 7. ablation ordering


@pytest.mark.slow
def test_criterion_7_ablation_direction(drift_runs):
    av = {mode: trace.records[-1].AV for mode, (trace, _) in drift_runs.items()}
    ok = av["full"] <= av["lsv1"] and av["full"] <= av["lsv2"]
    verdict(7, "full-mode accumulated variance no larger than ablations", ok,
            ", ".join(f"AV {m}={v:.3g}" for m, v in av.items()))


# ------------------------------------------------------------------ 8. benchmarks


def test_criterion_8_benchmarks():
    rng = np.random.default_rng(808)
    ok = True
    table = random_table(rng, n=4, D=90)
    grid = PeriodGrid(5, 2, 10, 15)
    curve = run_backtest(make_strategy("UBAH"), table, grid, BacktestConfig(invest_amount=1.0))
    p = table.closes
    for j, day in enumerate(range(11, 86)):
        ok &= _close(curve.total[j], float(np.mean(p[:, day] / p[:, 10])), 1e-9)
    w = run_strategy(make_strategy("CRP", weights=[0.1, 0.2, 0.3, 0.4]), table, grid)
    ok &= bool(np.all(w == np.array([0.1, 0.2, 0.3, 0.4])))

    # PAMR on x = (1.1, 0.9), eps 0.99: tau = 0.01 / 0.02
    s = make_strategy("PAMR", eps=0.99)
    s.reset(2)
    b = olps_step(s, np.array([[1.1, 0.9]]), np.array([0.5, 0.5]))
    ok &= np.allclose(b, [0.5 - 0.5 * 0.1, 0.5 + 0.5 * 0.1], rtol=0, atol=1e-9)
    # OLMAR window 3: predicted relative = mean of the last 3 prices over today's price
    prices = np.array([[1.0, 1.0], [1.2, 0.9], [1.5, 0.8]])
    ratios = prices[1:] / prices[:-1]
    x_pred = prices.mean(axis=0) / prices[-1]
    lam = (1.0 - float(np.full(2, 0.5) @ x_pred)) / float(((x_pred - x_pred.mean()) ** 2).sum())
    want = np.full(2, 0.5) + lam * (x_pred - x_pred.mean())
    s = make_strategy("OLMAR", window=3, eps=1.0)
    s.reset(2)
    b = olps_step(s, ratios, np.array([0.5, 0.5]))
    ok &= np.all(want >= 0) and np.allclose(b, want, rtol=0, atol=1e-9)
    # RMR window 3 on collinear relatives: the L1 median is the middle point (1.1, 0.9)
    prices = np.array([[1.2, 0.8], [1.1, 0.9], [1.0, 1.0]])
    s = make_strategy("RMR", window=3, eps=1.05)
    s.reset(2)
    b = olps_step(s, prices[1:] / prices[:-1], np.array([0.5, 0.5]))
    ok &= np.allclose(b, [0.75, 0.25], rtol=0, atol=1e-9)

    data = dataset_29()
    full = PeriodGrid(1, 1, 1, data.num_days - 2)
    worst = 0.0
    for name in STRATEGY_NAMES:
        w = run_strategy(make_strategy(name), data, full)
        worst = max(worst, float(np.abs(w.sum(axis=1) - 1).max()))
        ok &= bool(np.all(np.isfinite(w)) and np.all(w >= 0)) and worst <= 1e-9
    verdict(8, "benchmark correctness", ok and data.n == 29,
            f"14 strategies x {full.num_periods} days on {data.n} assets, max simplex gap {worst:.1e}")


# ------------------------------------------------------------------ 9. determinism


CONFIG = """
[run]
seed = 11
[grid]
K = 5
M = 10
train_periods = 20
[backtest]
periods = 6
[agent]
episodes = 3
warmup_episodes = 1
batch_size = 16
hidden = [16, 16]
[benchmarks.UP]
samples = 200
"""


def test_criterion_9_determinism(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("FACTORLAB_OUT", raising=False)
    data = tmp_path / "prices.csv"
    data.write_text(random_walk_csv(30, 300, seed=3, gap_ticker=2))
    cfg = tmp_path / "run.toml"
    cfg.write_text(CONFIG)
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = []
    for out in dirs:
        common = ["--config", str(cfg), "--data", str(data), "--out", str(out)]
        codes.append(main(["train", *common]))
        codes.append(main(["backtest", *common]))
        codes.append(main(["bench", *common, "--checkpoint", str(out / "checkpoint_full.npz")]))
    capsys.readouterr()
    files = ["trace_full.csv", "checkpoint_full.json", "checkpoint_full.npz", "report.csv", "report.json",
             "report_agent.csv", "report_agent.json"]
    same = [(dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in files]
    meta = json.loads((dirs[0] / "checkpoint_full.json").read_text())
    ok = codes == [0] * 6 and all(same) and meta["seed"] == "11"
    verdict(9, "fixed seed gives byte-identical artifacts", ok,
            f"{sum(same)}/{len(files)} files identical across two runs")
