import math

import numpy as np
import pytest

from factorlab.agent import (
    AgentConfig,
    Batch,
    CriticBank,
    ReplayBuffer,
    TrainingTrace,
    act,
    actor_objective,
    critic_loss,
    critic_targets,
    encode_state,
    evaluate,
    load_checkpoint,
    project_leverage,
    risk_constraint,
    save_checkpoint,
    scalar_targets,
    train,
    update_actor,
    update_critics,
    update_scalar_critic,
)
from factorlab.data import RAW, covariance
from factorlab.env import FACTOR_NAMES, EnvConfig, State, TradingEnv
from factorlab.nn import BOUNDED, MlpParams, OptState, forward, init_mlp, smooth_l1
from factorlab.synthetic import drift_table

from conftest import make_table, random_table
from test_nn import fd_grad, rel_err

DS, N = 3, 2  # tiny state and action widths for gradient checks


def tiny(rng, hidden=(4,)):
    actor = init_mlp([DS, *hidden, N], rng, BOUNDED)
    bank = CriticBank.create(DS, N, hidden, rng)
    return actor, bank


def tiny_batch(rng, B=6, done=None):
    return Batch(rng.standard_normal((B, DS)), project_leverage(rng.uniform(-1, 1, (B, N))),
                 rng.standard_normal((B, N, 4)), rng.standard_normal(B), rng.standard_normal((B, DS)),
                 np.zeros(B, bool) if done is None else np.asarray(done))


def small_cfg(**kw):
    base = dict(lambda1=0.5, lambda2=0.01, leverage=1.0)
    base.update(kw)
    return AgentConfig(**base)


# ------------------------------------------------------------------ state and action


def test_encode_state_examples():
    s = State(np.ones((2, 6)), np.zeros(2))
    assert np.array_equal(encode_state(s), np.zeros(14))
    s = State(np.array([[1.02]]), np.array([0.3]))
    np.testing.assert_allclose(encode_state(s), [2.0, 0.3], rtol=1e-12)


def test_encode_state_coordinate_oracle(rng):
    n, KM = 3, 8
    X = 1 + rng.standard_normal((n, KM)) * 0.01
    w = rng.uniform(size=n)
    v = encode_state(State(X, w))
    assert v.size == n * KM + n
    for i in range(n):
        for j in range(KM):
            assert v[i * KM + j] == (X[i, j] - 1) * 100
    assert np.array_equal(v[n * KM:], w)


def test_act_examples(rng):
    zero = MlpParams([(np.zeros((2, 14)), np.zeros(2))], output_map=BOUNDED)
    s = State(np.ones((2, 6)), np.zeros(2))
    assert np.array_equal(act(zero, s), np.zeros(2))
    np.testing.assert_allclose(project_leverage([0.8, 0.8], 1.0), [0.5, 0.5])
    actor = init_mlp([14, 8, 2], rng, BOUNDED)
    s = State(1 + 0.01 * rng.standard_normal((2, 6)), np.full(2, 0.5))
    assert act(actor, s).tobytes() == act(actor, s).tobytes()
    noisy = act(actor, s, explore=True, rng=np.random.default_rng(3), sigma=0.5)
    assert np.abs(noisy).sum() <= 1 + 1e-12


# ------------------------------------------------------------------ critic targets


def test_targets_gamma_zero_and_terminal(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    assert np.array_equal(critic_targets(batch, bank, actor, 0.0), batch.R)
    term = tiny_batch(rng, done=np.ones(6, bool))
    assert np.array_equal(critic_targets(term, bank, actor, 0.99), term.R)


def test_targets_unrolled_oracle(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng, done=[False, True, False, False, True, False])
    Y = critic_targets(batch, bank, actor, 0.9)
    for b in range(6):
        a2 = forward(actor, batch.S2[b])[0]
        a2 = a2 * min(1.0, 1.0 / np.abs(a2).sum())
        x2 = np.concatenate([batch.S2[b], a2])
        for j, f in enumerate(FACTOR_NAMES):
            boot = 0.0 if batch.done[b] else 0.9 * forward(bank.target[f], x2)[0]
            np.testing.assert_allclose(Y[b, :, j], batch.R[b, :, j] + boot, rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------------ critic updates


def test_critic_loss_gradient_fd(rng):
    _, bank = tiny(rng)
    batch = tiny_batch(rng)
    Y = 3 * rng.standard_normal((6, N))  # mix of linear and quadratic zones
    net = bank.online["Re"]
    assert net.num_params() <= 200
    _, grads = critic_loss(net, batch.S, batch.A, Y)
    fd = fd_grad(lambda: critic_loss(net, batch.S, batch.A, Y)[0], net.arrays())
    assert rel_err(grads, fd) <= 1e-4


def test_scalar_critic_gradient_fd(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    y = scalar_targets(batch, bank.phi_target, actor, 0.9)
    _, grads = critic_loss(bank.phi, batch.S, batch.A, y)
    fd = fd_grad(lambda: critic_loss(bank.phi, batch.S, batch.A, y)[0], bank.phi.arrays())
    assert rel_err(grads, fd) <= 1e-4


def test_update_critics_losses_match_oracle_and_decrease(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    Y = critic_targets(batch, bank, actor, 0.9)
    expected = {}
    for j, f in enumerate(FACTOR_NAMES):
        pred = forward(bank.online[f], np.hstack([batch.S, batch.A]))[0]
        d = np.abs(pred - Y[:, :, j])
        expected[f] = float(np.mean(np.where(d < 1, 0.5 * d * d, d - 0.5)))
    opts = {f: OptState.for_params(bank.online[f], 1e-4) for f in FACTOR_NAMES}
    losses = update_critics(bank, batch, Y, opts)
    for f in FACTOR_NAMES:
        assert losses[f] == pytest.approx(expected[f], abs=1e-10)
        after, _ = critic_loss(bank.online[f], batch.S, batch.A, Y[:, :, FACTOR_NAMES.index(f)])
        assert after < losses[f]


def test_update_critics_at_fixed_point(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    Y = np.stack([forward(bank.online[f], np.hstack([batch.S, batch.A]))[0] for f in FACTOR_NAMES], axis=2)
    before = [a.copy() for a in bank.online["Va"].arrays()]
    opts = {f: OptState.for_params(bank.online[f], 1e-3) for f in FACTOR_NAMES}
    losses = update_critics(bank, batch, Y, opts)
    assert all(v == 0 for v in losses.values())
    assert all(np.array_equal(a, b) for a, b in zip(before, bank.online["Va"].arrays()))


def test_scalar_critic_fixed_point_and_terminal(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    batch.r[:] = 0.7
    opt = OptState.for_params(bank.phi, 1e-2)
    losses = [update_scalar_critic(bank, batch, actor, 0.0, opt) for _ in range(400)]
    assert losses[-1] < 1e-4 < losses[0]
    term = tiny_batch(rng, done=np.ones(6, bool))
    assert np.array_equal(scalar_targets(term, bank.phi_target, actor, 0.99)[:, 0], term.r)


def test_scalar_critic_loss_oracle(rng):
    actor, bank = tiny(rng)
    batch = tiny_batch(rng)
    y = scalar_targets(batch, bank.phi_target, actor, 0.95)
    pred = forward(bank.phi, np.hstack([batch.S, batch.A]))[0]
    expected, _ = smooth_l1(pred, y)
    loss = update_scalar_critic(bank, batch, actor, 0.95, OptState.for_params(bank.phi, 1e-3))
    assert loss == pytest.approx(expected, abs=1e-10)


# ------------------------------------------------------------------ risk constraint and actor


def _q(actor, bank, S):
    a = project_leverage(forward(actor, S)[0])
    X = np.hstack([S, a])
    return {f: forward(bank.online[f], X)[0] for f in FACTOR_NAMES}


def test_risk_constraint_inactive_when_satisfied(rng):
    actor, bank = tiny(rng)
    W, b = bank.online["Re"].layers[-1]
    bank.online["Re"].layers[-1] = (np.zeros_like(W), np.full_like(b, 100.0))
    S = rng.standard_normal((5, DS))
    pi, grads = risk_constraint(S, actor, bank, np.full(N, 0.1))
    assert pi == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_risk_constraint_smooth_l1_arithmetic():
    # margin -2 with beta 1 gives 1.5 per violated element
    loss, _ = smooth_l1(np.minimum([-2.0], 0.0), [0.0])
    assert loss == 1.5


def test_risk_constraint_value_and_gradient(rng):
    actor, bank = tiny(rng)
    S = 2 * rng.standard_normal((6, DS))
    xi = np.array([3.0, 5.0])
    Q = _q(actor, bank, S)
    m = Q["Re"] - xi * (Q["Va"] + Q["Co"])
    h = np.minimum(m, 0)
    assert (h < 0).any()
    expected = np.mean(np.where(np.abs(h) < 1, 0.5 * h * h, np.abs(h) - 0.5))
    pi, grads = risk_constraint(S, actor, bank, xi)
    assert pi == pytest.approx(expected, abs=1e-12)
    crit_before = [a.copy() for a in bank.online["Re"].arrays()]
    fd = fd_grad(lambda: risk_constraint(S, actor, bank, xi)[0], actor.arrays())
    assert rel_err(grads, fd) <= 1e-4
    assert all(np.array_equal(a, b) for a, b in zip(crit_before, bank.online["Re"].arrays()))


@pytest.mark.parametrize("mode", ["full", "lsv1", "lsv2"])
def test_actor_objective_gradient_fd(rng, mode):
    actor, bank = tiny(rng)
    assert actor.num_params() <= 200
    S = 2 * rng.standard_normal((6, DS))
    cfg = small_cfg(mode=mode, lambda1=5.0, lambda2=0.3, lambda3=2.0)
    xi = np.array([2.0, 4.0])
    _, grads = actor_objective(actor, bank, S, cfg, xi)
    fd = fd_grad(lambda: actor_objective(actor, bank, S, cfg, xi)[0]["loss"], actor.arrays())
    assert rel_err(grads, fd) <= 1e-4


def test_actor_components_match_loss_oracle(rng):
    actor, bank = tiny(rng)
    S = rng.standard_normal((8, DS))
    cfg = small_cfg(lambda1=0.5, lambda2=0.01, lambda3=1.5)
    xi = np.full(N, 0.1)
    comps, _ = actor_objective(actor, bank, S, cfg, xi)
    Q = _q(actor, bank, S)
    wr = np.mean(Q["Re"] - 0.005 * (Q["Va"] + Q["Co"]) - 1.0 * Q["Ts"])
    pi, _ = risk_constraint(S, actor, bank, xi)
    assert comps["L_pi_wr"] == pytest.approx(wr, abs=1e-10)
    assert comps["Pi"] == pytest.approx(pi, abs=1e-12)
    assert comps["L_pi"] == pytest.approx(comps["L_pi_wr"] + 1.5 * comps["Pi"], abs=1e-10)
    for f in FACTOR_NAMES:
        assert comps[f"L_pi_{f}"] == pytest.approx(Q[f].mean(), abs=1e-12)


def test_lsv1_records_constraint_without_gradient(rng):
    actor, bank = tiny(rng)
    S = 2 * rng.standard_normal((6, DS))
    xi = np.array([3.0, 5.0])
    full, g_full = actor_objective(actor, bank, S, small_cfg(lambda3=0.0), xi)
    lsv1, g_lsv1 = actor_objective(actor, bank, S, small_cfg(mode="lsv1", lambda3=7.0), xi)
    assert lsv1["Pi"] > 0
    assert lsv1["L_pi"] == lsv1["L_pi_wr"]
    assert all(np.allclose(a, b) for a, b in zip(g_full, g_lsv1))


def test_degenerate_objective_is_mean_q_re(rng):
    actor, bank = tiny(rng)
    S = rng.standard_normal((6, DS))
    cfg = AgentConfig(lambda1=0.0, lambda2=0.0, lambda3=0.0, leverage=1.0)
    _, grads = actor_objective(actor, bank, S, cfg, np.zeros(N))
    fd = fd_grad(lambda: -_q(actor, bank, S)["Re"].mean(), actor.arrays())
    assert rel_err(grads, fd) <= 1e-4


def test_large_lambda3_reduces_constraint(rng):
    actor, bank = tiny(rng)
    S = 2 * rng.standard_normal((16, DS))
    xi = np.array([3.0, 5.0])
    cfg = small_cfg(lambda3=1e4)
    before, _ = risk_constraint(S, actor, bank, xi)
    assert before > 0
    update_actor(actor, bank, Batch(S, None, None, None, None, None), cfg, xi, OptState.for_params(actor, 1e-3))
    after, _ = risk_constraint(S, actor, bank, xi)
    assert after < before


# ------------------------------------------------------------------ replay buffer


def test_replay_buffer_fifo_and_sampling():
    buf = ReplayBuffer(3)
    with pytest.raises(ValueError):
        buf.sample(1, np.random.default_rng(0))
    for i in range(5):
        buf.push(np.full(2, i), np.zeros(1), np.zeros((1, 4)), float(i), np.zeros(2), False)
    assert len(buf) == 3
    b = buf.sample(3, np.random.default_rng(1))
    assert set(b.r.tolist()) <= {2.0, 3.0, 4.0}
    b1 = buf.sample(3, np.random.default_rng(7))
    b2 = buf.sample(3, np.random.default_rng(7))
    assert b1.r.tobytes() == b2.r.tobytes()
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))


# ------------------------------------------------------------------ evaluation, trace, training


def _drift_env(horizon=10, K=5, M=4):
    return TradingEnv(drift_table(K * M + horizon * K + 1), EnvConfig(K=K, M=M, horizon=horizon))


def test_evaluate_zero_policy():
    env = _drift_env()
    ds = env.n * env.cfg.K * env.cfg.M + env.n
    zero = MlpParams([(np.zeros((2, ds)), np.zeros(2))], output_map=BOUNDED)
    ev = evaluate(zero, env)
    assert (ev.AR, ev.AV, ev.NPR, ev.NPRW) == (0.0, 0.0, 0, 0)


def test_evaluate_constant_prices_costless_is_flat():
    table = make_table(np.full((2, 80), 10.0))
    env = TradingEnv(table, EnvConfig(K=3, M=4, horizon=10, alpha=0.0))
    actor = init_mlp([26, 6, 2], np.random.default_rng(0), BOUNDED)
    ev = evaluate(actor, env)
    assert (ev.AR, ev.AV, ev.NPR) == (0.0, 0.0, 0)


def test_evaluate_matches_log_replay(rng):
    table = random_table(rng, n=3, D=150)
    env = TradingEnv(table, EnvConfig(K=4, M=5, horizon=25), log_transitions=True)
    actor = init_mlp([3 * 20 + 3, 8, 3], rng, BOUNDED)
    ev = evaluate(actor, env, keep_transitions=True)
    growth, ard, av, npr, nprw = 1.0, 0.0, 0.0, 0, 0
    for tr in ev.transitions:
        r_ta = tr.info["r_ta"]
        growth *= 1 + r_ta
        ard += tr.r
        w = tr.a
        av += float(w @ covariance(tr.s.X, RAW).sigma @ w)
        npr += r_ta > 0
        nprw += tr.r > 0
    assert ev.AR == pytest.approx(growth - 1, abs=1e-12)
    assert ev.ARD == pytest.approx(ard, abs=1e-12)
    assert ev.AV == pytest.approx(av, abs=1e-15)
    assert (ev.NPR, ev.NPRW) == (npr, nprw)
    assert sum(r["reward"] for r in env.log) == pytest.approx(ard, abs=1e-12)


def test_train_zero_episodes_has_one_record():
    agent, trace = train(_drift_env(), AgentConfig(episodes=0, hidden=(8,)))
    assert len(trace) == 1
    assert trace.records[0].stage == 0 and math.isnan(trace.records[0].L_Q_total)


def _short_run(seed=0, mode="full"):
    cfg = AgentConfig(episodes=4, warmup_episodes=1, batch_size=8, hidden=(16, 16), seed=seed, mode=mode)
    return train(_drift_env(horizon=12), cfg)


def test_train_is_deterministic_and_trace_round_trips(tmp_path):
    a1, t1 = _short_run()
    a2, t2 = _short_run()
    assert t1.to_text() == t2.to_text()
    assert len(t1) == 5
    rec = t1.records[-1]
    assert rec.L_Q_total == rec.L_Q_Re + rec.L_Q_Va + rec.L_Q_Co + rec.L_Q_Ts
    assert rec.L_pi == pytest.approx(rec.L_pi_wr + 1.0 * rec.Pi, abs=1e-10)
    back = TrainingTrace.read(t1.to_text())
    assert back.to_text() == t1.to_text()
    save_checkpoint(a1, tmp_path / "a.npz")
    save_checkpoint(a2, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    loaded = load_checkpoint(tmp_path / "a.npz", a1.cfg)
    assert loaded.actor.arrays()[0].tobytes() == a1.actor.arrays()[0].tobytes()
    assert loaded.opts["actor"].step == a1.opts["actor"].step


def test_warmup_records_have_no_losses():
    _, t = _short_run()
    assert math.isnan(t.records[1].L_pi) and not math.isnan(t.records[2].L_pi)


def test_agent_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(mode="other")
    with pytest.raises(ValueError):
        AgentConfig(xi=[-1.0])
    assert AgentConfig(xi=0.2).xi_vector(3).tolist() == [0.2] * 3
