"""Run configuration: one TOML document, every field defaulted except the data path."""

from __future__ import annotations

import hashlib
import json
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np

from .agent import AgentConfig
from .backtest import BacktestConfig
from .baselines import STRATEGY_NAMES, BaselineProvider
from .env import EnvConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class GridSection:
    K: int = 5
    M: int = 10
    train_start: str | None = None  # first decision date; default earliest valid day
    train_periods: int | None = None  # default: everything before the backtest window


@dataclass
class EnvSection:
    lambda1: float = 0.5
    lambda2: float = 0.01
    alpha: float = 0.001
    T: float = 1e6
    gamma: float = 0.99
    leverage: float = 1.0


@dataclass
class ProviderSection:
    kind: str = "equal_weight"
    temperature: float = 1.0
    window: int | None = None
    path: str | None = None


@dataclass
class BacktestSection:
    periods: int = 24  # 120 trading days at K=5
    start: str | None = None  # first decision date; default right after training
    benchmark_alpha: float = 0.0
    r_f: float = 0.0
    M_ac: float = 0.0


@dataclass
class RunConfig:
    data_path: str | None = None
    tickers: list[str] | None = None
    seed: int = 0
    out_dir: str = "out"
    grid: GridSection = field(default_factory=GridSection)
    env: EnvSection = field(default_factory=EnvSection)
    agent: dict[str, Any] = field(default_factory=dict)
    provider: ProviderSection = field(default_factory=ProviderSection)
    backtest: BacktestSection = field(default_factory=BacktestSection)
    benchmarks: dict[str, dict[str, Any]] = field(default_factory=dict)

    # ---------------------------------------------------------------- construction

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        cfg = cls()
        run = doc.pop("run", {})
        data = doc.pop("data", {})
        _assign(cfg, {"seed": run.pop("seed", cfg.seed), "out_dir": run.pop("out_dir", cfg.out_dir)}, "run")
        _reject(run, "run")
        cfg.data_path = data.pop("path", None)
        cfg.tickers = data.pop("tickers", None)
        _reject(data, "data")
        for name, section_cls in (("grid", GridSection), ("env", EnvSection),
                                  ("provider", ProviderSection), ("backtest", BacktestSection)):
            section = section_cls()
            _assign(section, doc.pop(name, {}), name)
            setattr(cfg, name, section)
        agent = doc.pop("agent", {})
        known = {f.name for f in fields(AgentConfig)} - {"lambda1", "lambda2", "leverage", "seed"}
        _reject({k: v for k, v in agent.items() if k not in known}, "agent")
        cfg.agent = agent
        benchmarks = doc.pop("benchmarks", {})
        for name in benchmarks:
            if name.upper() not in STRATEGY_NAMES:
                raise ConfigError(f"[benchmarks.{name}]: unknown strategy")
        cfg.benchmarks = {k.upper(): dict(v) for k, v in benchmarks.items()}
        _reject(doc, "top level")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}") from None
        return cls.from_dict(doc)

    def validate(self) -> None:
        try:
            self.env_config(1)
            self.agent_config()
            BaselineProvider(self.provider.kind, self.provider.temperature, self.provider.window)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        if self.backtest.periods < 0:
            raise ConfigError("backtest.periods must be non-negative")
        if self.provider.kind == "file_loaded" and not self.provider.path:
            raise ConfigError("provider kind file_loaded needs provider.path")

    # ---------------------------------------------------------------- derived objects

    def env_config(self, horizon: int) -> EnvConfig:
        e = self.env
        return EnvConfig(e.lambda1, e.lambda2, e.alpha, self.grid.K, self.grid.M, e.T, e.gamma,
                         horizon, e.leverage)

    def agent_config(self) -> AgentConfig:
        return AgentConfig(**self.agent, seed=derive_seed(self.seed, "agent"),
                           lambda1=self.env.lambda1, lambda2=self.env.lambda2, leverage=self.env.leverage)

    def backtest_config(self) -> BacktestConfig:
        e = self.env
        return BacktestConfig(e.T, e.alpha, self.backtest.benchmark_alpha, e.leverage, e.lambda1, e.lambda2)

    def strategy_params(self, name: str) -> dict:
        params = dict(self.benchmarks.get(name.upper(), {}))
        if name.upper() == "UP":
            params.setdefault("seed", derive_seed(self.seed, "UP"))
        return params

    # ---------------------------------------------------------------- stamping

    def to_dict(self) -> dict:
        """Resolved settings; the output directory is left out so relocating outputs
        changes neither the hash nor any artifact bytes."""
        return {
            "run": {"seed": self.seed},
            "data": {"path": self.data_path, "tickers": self.tickers},
            "grid": asdict(self.grid),
            "env": asdict(self.env),
            "agent": dict(sorted(self.agent.items())),
            "provider": asdict(self.provider),
            "backtest": asdict(self.backtest),
            "benchmarks": {k: dict(sorted(v.items())) for k, v in sorted(self.benchmarks.items())},
        }

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=_json_default)
        return hashlib.sha256(blob.encode()).hexdigest()

    def stamp(self) -> dict[str, str]:
        return {"config_sha256": self.sha256(), "seed": str(self.seed)}


def derive_seed(root: int, consumer: str) -> int:
    """Deterministic per-consumer seed split from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(consumer.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _json_default(o):
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _assign(obj, values: dict, section: str) -> None:
    names = {f.name for f in fields(obj)}
    for key, val in values.items():
        if key not in names:
            raise ConfigError(f"[{section}]: unknown key {key!r}")
        setattr(obj, key, val)


def _reject(rest: dict, section: str) -> None:
    if rest:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(sorted(map(str, rest)))}")
