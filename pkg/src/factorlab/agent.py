"""Multi-critic deterministic policy gradient learner.

One actor, four vector-valued critics (one per reward factor: Re, Va, Co, Ts), and a
scalar critic on the plain reward. The scalar critic is always trained for tracking;
in mode ``lsv2`` it is also the only signal the actor sees.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence, TextIO

import numpy as np

from .env import FACTOR_NAMES, State, Transition, TradingEnv
from .nn import (
    BOUNDED,
    MlpParams,
    OptState,
    Tape,
    adam_step,
    backward,
    forward,
    init_mlp,
    load_params,
    save_params,
    smooth_l1,
    soft_update,
)

MODES = ("full", "lsv1", "lsv2")


class NumericAbort(RuntimeError):
    """A loss went non-finite; ``record`` holds the offending values, ``trace`` the history."""

    def __init__(self, message: str, record: dict, trace: "TrainingTrace"):
        super().__init__(message)
        self.record = record
        self.trace = trace


@dataclass
class AgentConfig:
    xi: float | Sequence[float] = 0.1
    lambda3: float = 1.0
    gamma: float = 0.99
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    tau: float = 0.005
    buffer_capacity: int = 100_000
    batch_size: int = 64
    noise_sigma: float = 0.1
    noise_final: float = 0.01
    warmup_episodes: int = 10
    episodes: int = 200
    hidden: tuple[int, ...] = (128, 128)
    mode: str = "full"
    seed: int = 0
    beta: float = 1.0  # SmoothL1 threshold
    # None -> taken from the environment config
    lambda1: float | None = None
    lambda2: float | None = None
    leverage: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.lambda3 < 0:
            raise ValueError("lambda3 must be non-negative")
        if np.any(np.asarray(self.xi, dtype=float) < 0):
            raise ValueError("xi entries must be non-negative")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")
        if self.episodes < 0 or self.warmup_episodes < 0:
            raise ValueError("episode counts must be non-negative")
        self.hidden = tuple(int(h) for h in self.hidden)

    def xi_vector(self, n: int) -> np.ndarray:
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim == 0:
            return np.full(n, float(xi))
        if xi.shape != (n,):
            raise ValueError(f"xi has length {xi.size}, expected {n}")
        return xi.copy()

    @property
    def lambda3_effective(self) -> float:
        """Weight of the constraint in the actor's gradient (0 outside mode full)."""
        return self.lambda3 if self.mode == "full" else 0.0

    def resolved(self, env_cfg) -> "AgentConfig":
        out = AgentConfig(**asdict(self))
        out.lambda1 = env_cfg.lambda1 if self.lambda1 is None else self.lambda1
        out.lambda2 = env_cfg.lambda2 if self.lambda2 is None else self.lambda2
        out.leverage = env_cfg.leverage if self.leverage is None else self.leverage
        return out


# --------------------------------------------------------------------------- state / action


def encode_state(s: State) -> np.ndarray:
    """Row-major (X - 1) * 100 followed by w_au."""
    return np.concatenate([((s.X - 1.0) * 100.0).ravel(), s.w_au])


def project_leverage(u, leverage: float = 1.0) -> np.ndarray:
    """Scale rows with gross exposure above ``leverage`` back onto the boundary."""
    u = np.asarray(u, dtype=float)
    gross = np.abs(u).sum(axis=-1, keepdims=True)
    scale = np.where(gross > leverage, leverage / np.where(gross > 0, gross, 1.0), 1.0)
    return u * scale


def _project_backward(u: np.ndarray, da: np.ndarray, leverage: float) -> np.ndarray:
    gross = np.abs(u).sum(axis=1, keepdims=True)
    over = gross > leverage
    safe = np.where(over, gross, 1.0)
    du_over = (leverage / safe) * (da - np.sign(u) * (u * da).sum(axis=1, keepdims=True) / safe)
    return np.where(over, du_over, da)


@dataclass
class PolicyTape:
    u: np.ndarray
    tape: Tape


def policy_forward(actor: MlpParams, S: np.ndarray, leverage: float) -> tuple[np.ndarray, PolicyTape]:
    u, tape = forward(actor, S)
    return project_leverage(u, leverage), PolicyTape(u, tape)


def policy_backward(actor: MlpParams, pt: PolicyTape, da: np.ndarray, leverage: float):
    return backward(actor, pt.tape, _project_backward(pt.u, da, leverage))[0]


def act(actor: MlpParams, s: State, explore: bool = False, rng: np.random.Generator | None = None,
        sigma: float = 0.1, leverage: float = 1.0) -> np.ndarray:
    u, _ = forward(actor, encode_state(s))
    if explore:
        if rng is None:
            raise ValueError("exploration needs an explicit generator")
        u = np.clip(u + rng.normal(0.0, sigma, size=u.shape), -1.0, 1.0)
    return project_leverage(u, leverage)


# --------------------------------------------------------------------------- networks


@dataclass
class CriticBank:
    online: dict[str, MlpParams]
    target: dict[str, MlpParams]
    phi: MlpParams
    phi_target: MlpParams

    def __post_init__(self):
        if set(self.online) != set(FACTOR_NAMES) or set(self.target) != set(FACTOR_NAMES):
            raise ValueError(f"critic bank needs exactly {FACTOR_NAMES}")
        for f in FACTOR_NAMES:
            if [W.shape for W, _ in self.online[f].layers] != [W.shape for W, _ in self.target[f].layers]:
                raise ValueError(f"online/target shapes differ for critic {f}")

    @classmethod
    def create(cls, state_dim: int, n: int, hidden: Sequence[int], rng) -> "CriticBank":
        sizes = [state_dim + n, *hidden]
        online = {f: init_mlp(sizes + [n], rng) for f in FACTOR_NAMES}
        phi = init_mlp(sizes + [1], rng)
        return cls(online, {f: p.copy() for f, p in online.items()}, phi, phi.copy())


@dataclass
class Agent:
    cfg: AgentConfig
    actor: MlpParams
    actor_target: MlpParams
    bank: CriticBank
    opts: dict[str, OptState]

    @classmethod
    def create(cls, cfg: AgentConfig, state_dim: int, n: int, rng: np.random.Generator) -> "Agent":
        actor = init_mlp([state_dim, *cfg.hidden, n], rng, BOUNDED)
        bank = CriticBank.create(state_dim, n, cfg.hidden, rng)
        opts = {"actor": OptState.for_params(actor, cfg.actor_lr),
                "phi": OptState.for_params(bank.phi, cfg.critic_lr)}
        for f in FACTOR_NAMES:
            opts[f] = OptState.for_params(bank.online[f], cfg.critic_lr)
        return cls(cfg, actor, actor.copy(), bank, opts)

    def networks(self) -> dict[str, MlpParams]:
        nets = {"actor": self.actor, "actor_target": self.actor_target,
                "phi": self.bank.phi, "phi_target": self.bank.phi_target}
        for f in FACTOR_NAMES:
            nets[f"critic_{f}"] = self.bank.online[f]
            nets[f"target_{f}"] = self.bank.target[f]
        return nets


def save_checkpoint(agent: Agent, path) -> None:
    extra = {}
    for name, opt in agent.opts.items():
        extra[f"opt/{name}/step"] = np.array(opt.step, dtype=np.int64)
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            extra[f"opt/{name}/m{i}"] = m
            extra[f"opt/{name}/v{i}"] = v
    save_params(agent.networks(), path, extra)


def load_checkpoint(path, cfg: AgentConfig) -> Agent:
    nets, extra = load_params(path)
    bank = CriticBank({f: nets[f"critic_{f}"] for f in FACTOR_NAMES},
                      {f: nets[f"target_{f}"] for f in FACTOR_NAMES},
                      nets["phi"], nets["phi_target"])
    agent = Agent(cfg, nets["actor"], nets["actor_target"], bank, {})
    owners = {"actor": agent.actor, "phi": bank.phi, **bank.online}
    for name, p in owners.items():
        lr = cfg.actor_lr if name == "actor" else cfg.critic_lr
        opt = OptState.for_params(p, lr)
        if f"opt/{name}/step" in extra:
            opt.step = int(extra[f"opt/{name}/step"])
            opt.m = [extra[f"opt/{name}/m{i}"] for i in range(len(opt.m))]
            opt.v = [extra[f"opt/{name}/v{i}"] for i in range(len(opt.v))]
        agent.opts[name] = opt
    return agent


# --------------------------------------------------------------------------- replay buffer


@dataclass
class Batch:
    S: np.ndarray  # B x state_dim
    A: np.ndarray  # B x n
    R: np.ndarray  # B x n x 4, factor columns in FACTOR_NAMES order
    r: np.ndarray  # B
    S2: np.ndarray
    done: np.ndarray  # B, bool

    def __len__(self):
        return len(self.r)


class ReplayBuffer:
    """Fixed-capacity FIFO ring; uniform sampling with the caller's generator."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.size = 0
        self._next = 0
        self._arrays: dict[str, np.ndarray] | None = None

    def __len__(self):
        return self.size

    def push(self, s, a, R, r, s2, done) -> None:
        if self._arrays is None:
            c = self.capacity
            self._arrays = {
                "S": np.empty((c, len(s))), "A": np.empty((c, len(a))),
                "R": np.empty((c,) + np.shape(R)), "r": np.empty(c),
                "S2": np.empty((c, len(s2))), "done": np.empty(c, dtype=bool),
            }
        i = self._next
        for key, val in zip(("S", "A", "R", "r", "S2", "done"), (s, a, R, r, s2, done)):
            self._arrays[key][i] = val
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, tr: Transition) -> None:
        self.push(encode_state(tr.s), tr.a, tr.r_elem.as_array(), tr.r, encode_state(tr.s_next), tr.done)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} < batch size {batch_size}")
        idx = rng.integers(0, self.size, size=batch_size)
        return Batch(**{k: v[idx] for k, v in self._arrays.items()})


# --------------------------------------------------------------------------- losses and gradients


def critic_targets(batch: Batch, bank: CriticBank, actor_target: MlpParams, gamma: float,
                   leverage: float = 1.0) -> np.ndarray:
    """B x n x 4 Bellman targets, one factor per last-axis column."""
    keep = (~batch.done).astype(float)[:, None]
    if gamma == 0.0 or not keep.any():
        return batch.R.copy()
    a2, _ = policy_forward(actor_target, batch.S2, leverage)
    X2 = np.hstack([batch.S2, a2])
    Y = np.empty_like(batch.R)
    for j, f in enumerate(FACTOR_NAMES):
        q2, _ = forward(bank.target[f], X2)
        Y[:, :, j] = batch.R[:, :, j] + gamma * keep * q2
    return Y


def critic_loss(net: MlpParams, S, A, Y, beta: float = 1.0):
    """(SmoothL1 loss, parameter gradients) of one critic against fixed targets."""
    pred, tape = forward(net, np.hstack([S, A]))
    if pred.shape != Y.shape:
        raise ValueError(f"critic output {pred.shape} vs target {Y.shape}")
    loss, g = smooth_l1(pred, Y, beta)
    return loss, backward(net, tape, g)[0]


def update_critics(bank: CriticBank, batch: Batch, Y: np.ndarray, opts: dict[str, OptState],
                   beta: float = 1.0) -> dict[str, float]:
    losses = {}
    for j, f in enumerate(FACTOR_NAMES):
        loss, grads = critic_loss(bank.online[f], batch.S, batch.A, Y[:, :, j], beta)
        adam_step(bank.online[f], grads, opts[f])
        losses[f] = loss
    return losses


def scalar_targets(batch: Batch, phi_target: MlpParams, actor: MlpParams, gamma: float,
                   leverage: float = 1.0) -> np.ndarray:
    """B x 1 targets r + gamma * Q_phi'(s', pi(s')), bootstrap dropped at episode end."""
    keep = (~batch.done).astype(float)
    y = batch.r.copy()
    if gamma != 0.0 and keep.any():
        a2, _ = policy_forward(actor, batch.S2, leverage)
        q2, _ = forward(phi_target, np.hstack([batch.S2, a2]))
        y = y + gamma * keep * q2[:, 0]
    return y[:, None]


def update_scalar_critic(bank: CriticBank, batch: Batch, actor: MlpParams, gamma: float,
                         opt: OptState, leverage: float = 1.0, beta: float = 1.0) -> float:
    y = scalar_targets(batch, bank.phi_target, actor, gamma, leverage)
    loss, grads = critic_loss(bank.phi, batch.S, batch.A, y, beta)
    adam_step(bank.phi, grads, opt)
    return loss


@dataclass
class _ActorPass:
    a: np.ndarray
    pt: PolicyTape
    Q: dict
    tapes: dict


def _actor_pass(actor: MlpParams, bank: CriticBank, S: np.ndarray, leverage: float,
                names=FACTOR_NAMES) -> _ActorPass:
    a, pt = policy_forward(actor, S, leverage)
    X = np.hstack([S, a])
    Q, tapes = {}, {}
    for f in names:
        net = bank.phi if f == "phi" else bank.online[f]
        Q[f], tapes[f] = forward(net, X)
    return _ActorPass(a, pt, Q, tapes)


def _actor_grads(actor: MlpParams, bank: CriticBank, ap: _ActorPass, dQ: dict, leverage: float):
    """Chain critic-output cotangents back through the critics' action inputs into the actor.
    Critic parameters receive nothing."""
    n = ap.a.shape[1]
    da = np.zeros_like(ap.a)
    for f, g in dQ.items():
        net = bank.phi if f == "phi" else bank.online[f]
        da += backward(net, ap.tapes[f], g, param_grads=False)[1][:, -n:]
    return policy_backward(actor, ap.pt, da, leverage)


def _constraint(ap: _ActorPass, xi: np.ndarray, beta: float):
    m = ap.Q["Re"] - xi * (ap.Q["Va"] + ap.Q["Co"])
    h = np.minimum(m, 0.0)
    pi, gh = smooth_l1(h, np.zeros_like(h), beta)
    gm = gh * (m < 0)
    return pi, {"Re": gm, "Va": -xi * gm, "Co": -xi * gm}


def risk_constraint(S, actor: MlpParams, bank: CriticBank, xi, leverage: float = 1.0,
                    beta: float = 1.0):
    """Mean SmoothL1 of the per-asset shortfall min(Q_Re - xi (Q_Va + Q_Co), 0) against 0,
    with its gradient w.r.t. the actor parameters only."""
    ap = _actor_pass(actor, bank, S, leverage, ("Re", "Va", "Co"))
    pi, dQ = _constraint(ap, np.asarray(xi, dtype=float), beta)
    return pi, _actor_grads(actor, bank, ap, dQ, leverage)


def actor_objective(actor: MlpParams, bank: CriticBank, S, cfg: AgentConfig, xi):
    """Trace components of the actor objective and the gradient of the loss the actor
    descends: -J + lambda3_eff * Pi (modes full/lsv1) or -mean Q_phi (mode lsv2).

    J = mean over batch and assets of Q_Re - (lambda1/100)(Q_Va + Q_Co) - (100 lambda2) Q_Ts.
    """
    lev = cfg.leverage
    ap = _actor_pass(actor, bank, S, lev, FACTOR_NAMES + ("phi",))
    xi = np.asarray(xi, dtype=float)
    c_var = cfg.lambda1 / 100.0
    c_ts = cfg.lambda2 * 100.0
    means = {f: float(ap.Q[f].mean()) for f in FACTOR_NAMES}
    wr = means["Re"] - c_var * (means["Va"] + means["Co"]) - c_ts * means["Ts"]
    pi, dpi = _constraint(ap, xi, cfg.beta)
    lam = cfg.lambda3_effective
    comps = {
        "L_pi": wr + lam * pi,
        "L_pi_wr": wr,
        "L_pi_Re": means["Re"], "L_pi_Va": means["Va"], "L_pi_Co": means["Co"], "L_pi_Ts": means["Ts"],
        "Pi": pi,
        "policy_value": float(ap.Q["phi"].mean()),
    }
    if cfg.mode == "lsv2":
        dQ = {"phi": np.full_like(ap.Q["phi"], -1.0 / ap.Q["phi"].size)}
    else:
        k = 1.0 / ap.Q["Re"].size
        dQ = {"Re": np.full_like(ap.Q["Re"], -k), "Va": np.full_like(ap.Q["Va"], c_var * k),
              "Co": np.full_like(ap.Q["Co"], c_var * k), "Ts": np.full_like(ap.Q["Ts"], c_ts * k)}
        if lam:
            for f, g in dpi.items():
                dQ[f] = dQ[f] + lam * g
    comps["loss"] = -comps["policy_value"] if cfg.mode == "lsv2" else -wr + lam * pi
    return comps, _actor_grads(actor, bank, ap, dQ, lev)


def update_actor(actor: MlpParams, bank: CriticBank, batch: Batch, cfg: AgentConfig, xi,
                 opt: OptState) -> dict[str, float]:
    comps, grads = actor_objective(actor, bank, batch.S, cfg, xi)
    adam_step(actor, grads, opt)
    return comps


# --------------------------------------------------------------------------- evaluation and trace


@dataclass
class EvalResult:
    AR: float
    ARD: float
    AV: float
    NPR: int
    NPRW: int
    transitions: list = field(default_factory=list, repr=False)


def evaluate(actor: MlpParams, env: TradingEnv, leverage: float | None = None,
             keep_transitions: bool = False) -> EvalResult:
    """Noise-free rollout over one full episode."""
    lev = env.cfg.leverage if leverage is None else leverage
    s = env.reset()
    growth, ard, av, npr, nprw = 1.0, 0.0, 0.0, 0, 0
    kept = []
    done = False
    while not done:
        tr = env.step(act(actor, s, explore=False, leverage=lev))
        r_ta = tr.info["r_ta"]
        growth *= r_ta + 1.0
        ard += tr.r
        av += tr.info["eps"]
        npr += int(r_ta > 0)
        nprw += int(tr.r > 0)
        if keep_transitions:
            kept.append(tr)
        s, done = tr.s_next, tr.done
    return EvalResult(growth - 1.0, ard, av, npr, nprw, kept)


LOSS_FIELDS = ("L_pi", "L_pi_wr", "L_pi_Re", "L_pi_Va", "L_pi_Co", "L_pi_Ts", "Pi",
               "L_Q_total", "L_Q_Re", "L_Q_Va", "L_Q_Co", "L_Q_Ts", "L_phi", "policy_value")


@dataclass
class TraceRecord:
    stage: int
    episode: int
    updates: int
    AR: float
    ARD: float
    AV: float
    NPR: int
    NPRW: int
    L_pi: float = math.nan
    L_pi_wr: float = math.nan
    L_pi_Re: float = math.nan
    L_pi_Va: float = math.nan
    L_pi_Co: float = math.nan
    L_pi_Ts: float = math.nan
    Pi: float = math.nan
    L_Q_total: float = math.nan
    L_Q_Re: float = math.nan
    L_Q_Va: float = math.nan
    L_Q_Co: float = math.nan
    L_Q_Ts: float = math.nan
    L_phi: float = math.nan
    policy_value: float = math.nan


TRACE_COLUMNS = tuple(f.name for f in fields(TraceRecord))
_INT_COLUMNS = {"stage", "episode", "updates", "NPR", "NPRW"}


@dataclass
class TrainingTrace:
    records: list[TraceRecord] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def append(self, rec: TraceRecord) -> None:
        if self.records and rec.stage <= self.records[-1].stage:
            raise ValueError("trace stages must increase")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def write(self, out: TextIO) -> None:
        for key in sorted(self.meta):
            out.write(f"# {key}={self.meta[key]}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in self.records:
            w.writerow([getattr(rec, c) if c in _INT_COLUMNS else repr(float(getattr(rec, c)))
                        for c in TRACE_COLUMNS])

    def to_text(self) -> str:
        buf = io.StringIO()
        self.write(buf)
        return buf.getvalue()

    @classmethod
    def read(cls, source: TextIO | str) -> "TrainingTrace":
        if isinstance(source, str):
            source = io.StringIO(source)
        meta, body = {}, []
        for line in source:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                meta[key.strip()] = val
            elif line.strip():
                body.append(line)
        trace = cls(meta=meta)
        rows = list(csv.reader(body))
        if not rows:
            return trace
        header = rows[0]
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError("unexpected trace header")
        for row in rows[1:]:
            vals = {c: (int(v) if c in _INT_COLUMNS else float(v)) for c, v in zip(header, row)}
            trace.records.append(TraceRecord(**vals))
        return trace


# --------------------------------------------------------------------------- training loop


@dataclass
class RngStreams:
    init: np.random.Generator
    noise: np.random.Generator
    sampler: np.random.Generator
    warmup: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "RngStreams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def noise_schedule(cfg: AgentConfig, episode: int) -> float:
    """Linear decay from noise_sigma to noise_final over the post-warmup episodes."""
    span = cfg.episodes - cfg.warmup_episodes
    j = episode - cfg.warmup_episodes
    if span <= 1 or j <= 0:
        return cfg.noise_sigma
    frac = min(j / (span - 1), 1.0)
    return cfg.noise_sigma + (cfg.noise_final - cfg.noise_sigma) * frac


def _random_action(rng: np.random.Generator, n: int, leverage: float) -> np.ndarray:
    return project_leverage(rng.uniform(-1.0, 1.0, size=n), leverage)


def _stage_record(stage, episode, updates, ev: EvalResult, sums: dict, count: int) -> TraceRecord:
    rec = TraceRecord(stage, episode, updates, ev.AR, ev.ARD, ev.AV, ev.NPR, ev.NPRW)
    if count:
        for key, total in sums.items():
            setattr(rec, key, total / count)
        rec.L_Q_total = rec.L_Q_Re + rec.L_Q_Va + rec.L_Q_Co + rec.L_Q_Ts
    return rec


def train_step(agent: Agent, batch: Batch, xi: np.ndarray) -> dict[str, float]:
    """One full update: four factor critics, actor, scalar critic, then all targets."""
    cfg = agent.cfg
    lev = cfg.leverage
    Y = critic_targets(batch, agent.bank, agent.actor_target, cfg.gamma, lev)
    q_losses = update_critics(agent.bank, batch, Y, agent.opts, cfg.beta)
    comps = update_actor(agent.actor, agent.bank, batch, cfg, xi, agent.opts["actor"])
    l_phi = update_scalar_critic(agent.bank, batch, agent.actor, cfg.gamma, agent.opts["phi"], lev, cfg.beta)
    soft_update(agent.actor_target, agent.actor, cfg.tau)
    for f in FACTOR_NAMES:
        soft_update(agent.bank.target[f], agent.bank.online[f], cfg.tau)
    soft_update(agent.bank.phi_target, agent.bank.phi, cfg.tau)
    out = {k: comps[k] for k in LOSS_FIELDS if k in comps}
    out.update({f"L_Q_{f}": v for f, v in q_losses.items()})
    out["L_phi"] = l_phi
    return out


def train(env: TradingEnv, cfg: AgentConfig,
          on_record: Callable[[TraceRecord], None] | None = None) -> tuple[Agent, TrainingTrace]:
    """Train for ``cfg.episodes`` episodes of ``env``; the environment carries the
    auxiliary-weights provider. One evaluation record before training, then one per episode."""
    cfg = cfg.resolved(env.cfg)
    n = env.n
    xi = cfg.xi_vector(n)
    rngs = RngStreams.from_seed(cfg.seed)
    state_dim = encode_state(env.reset()).size
    agent = Agent.create(cfg, state_dim, n, rngs.init)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    trace = TrainingTrace()

    def record(rec):
        trace.append(rec)
        if on_record is not None:
            on_record(rec)

    record(_stage_record(0, 0, 0, evaluate(agent.actor, env, cfg.leverage), {}, 0))
    updates = 0
    for ep in range(cfg.episodes):
        warm = ep < cfg.warmup_episodes
        sigma = noise_schedule(cfg, ep)
        sums: dict[str, float] = {}
        count = 0
        s = env.reset()
        done = False
        while not done:
            if warm:
                a = _random_action(rngs.warmup, n, cfg.leverage)
            else:
                a = act(agent.actor, s, True, rngs.noise, sigma, cfg.leverage)
            tr = env.step(a)
            buffer.push_transition(tr)
            if not warm and len(buffer) >= cfg.batch_size:
                vals = train_step(agent, buffer.sample(cfg.batch_size, rngs.sampler), xi)
                bad = {k: v for k, v in vals.items() if not math.isfinite(v)}
                if bad:
                    raise NumericAbort(f"non-finite loss at episode {ep + 1}, update {updates + 1}: "
                                       f"{sorted(bad)}", {"episode": ep + 1, "update": updates + 1, **vals},
                                       trace)
                for k, v in vals.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
                updates += 1
            s, done = tr.s_next, tr.done
        record(_stage_record(ep + 1, ep + 1, updates, evaluate(agent.actor, env, cfg.leverage), sums, count))
    return agent, trace
