"""Command-line entry point: ``factorlab ingest|train|backtest|bench|report|synth``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import synthetic
from .agent import LOSS_FIELDS, NumericAbort, TrainingTrace, load_checkpoint, save_checkpoint, train
from .backtest import (
    AGENT_NAME,
    ActorPolicy,
    EquityCurve,
    daily_returns,
    dump_report_json,
    metrics,
    parse_report,
    report,
    run_backtest,
)
from .baselines import STRATEGY_NAMES, BaselineProvider, make_strategy
from .config import ConfigError, RunConfig
from .data import DataError, PeriodGrid, PriceTable, dump_price_table, load_price_table
from .env import TradingEnv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUT_ENV_VAR = "FACTORLAB_OUT"


# --------------------------------------------------------------------------- helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "data", None):
        cfg.data_path = args.data
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.agent["mode"] = args.mode
    if getattr(args, "episodes", None) is not None:
        cfg.agent["episodes"] = args.episodes
    env_out = os.environ.get(OUT_ENV_VAR)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    elif env_out:
        cfg.out_dir = env_out
    cfg.validate()
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_table(cfg: RunConfig) -> PriceTable:
    if not cfg.data_path:
        raise ConfigError("no data path given (use [data] path or --data)")
    try:
        with open(cfg.data_path, newline="") as fh:
            return load_price_table(fh, cfg.tickers)
    except OSError as e:
        raise DataError(f"cannot read {cfg.data_path}: {e.strerror}") from None


def _provider(cfg: RunConfig) -> BaselineProvider:
    p = cfg.provider
    if p.kind == "file_loaded":
        try:
            with open(p.path, newline="") as fh:
                return BaselineProvider.from_file(fh)
        except OSError as e:
            raise DataError(f"cannot read baseline weights {p.path}: {e.strerror}") from None
    return BaselineProvider(p.kind, p.temperature, p.window)


def windows(cfg: RunConfig, table: PriceTable) -> tuple[PeriodGrid, PeriodGrid]:
    """Training grid and the disjoint backtest grid that follows it."""
    K, M = cfg.grid.K, cfg.grid.M
    d0 = table.date_index(cfg.grid.train_start) if cfg.grid.train_start else K * M
    bt_days = cfg.backtest.periods * K
    bt_start = table.date_index(cfg.backtest.start) if cfg.backtest.start else None
    periods = cfg.grid.train_periods
    if periods is None:
        end = bt_start if bt_start is not None else table.num_days - 1 - bt_days
        periods = (end - d0) // K
    if periods < 1:
        raise DataError("not enough data for a training window")
    train_grid = PeriodGrid(K, M, d0, periods)
    train_grid.check(table)
    train_end = d0 + periods * K
    bt0 = train_end if bt_start is None else bt_start
    if bt0 < train_end:
        raise DataError("backtest window overlaps the training window")
    bt_grid = PeriodGrid(K, M, bt0, cfg.backtest.periods)
    bt_grid.check(table)
    return train_grid, bt_grid


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _curve_text(curve: EquityCurve, stamp: dict) -> str:
    buf = io.StringIO()
    for key, val in sorted({**stamp, "initial_value": repr(curve.initial_value)}.items()):
        buf.write(f"# {key}={val}\n")
    curve.write(buf)
    return buf.getvalue()


def read_curve(path) -> tuple[float, list[str], np.ndarray]:
    """(initial value, dates, total values) from an equity-curve file."""
    initial, dates, totals = None, [], []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# initial_value="):
            initial = float(line.split("=", 1)[1])
        elif not line.startswith("#"):
            body.append(line)
    for row in csv.DictReader(body):
        dates.append(row["date"])
        totals.append(float(row["total_value"]))
    if initial is None:
        raise DataError(f"{path}: missing initial_value line")
    return initial, dates, np.array(totals)


# --------------------------------------------------------------------------- subcommands


def cmd_ingest(args) -> int:
    cfg = _load_config(args)
    table = _read_table(cfg)
    print(f"n={table.n} days={table.num_days} first={table.dates[0]} last={table.dates[-1]}")
    for rec in table.dropped:
        print(rec.line())
    out = _out_dir(cfg) / "prices.csv"
    buf = io.StringIO()
    dump_price_table(table, buf)
    _write_text(out, buf.getvalue())
    print(f"cache={out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    table = _read_table(cfg)
    train_grid, _ = windows(cfg, table)
    env = TradingEnv(table, cfg.env_config(train_grid.num_periods), _provider(cfg),
                     first_decision_index=train_grid.first_decision_index)
    acfg = cfg.agent_config()
    out = _out_dir(cfg)
    stamp = cfg.stamp()
    trace_path = out / f"trace_{acfg.mode}.csv"
    try:
        agent, trace = train(env, acfg)
    except NumericAbort as e:
        e.trace.meta.update(stamp)
        e.trace.meta["aborted"] = json.dumps(e.record, sort_keys=True)
        _write_text(trace_path, e.trace.to_text())
        raise
    trace.meta.update(stamp)
    trace.meta["mode"] = acfg.mode
    _write_text(trace_path, trace.to_text())
    ckpt = out / f"checkpoint_{acfg.mode}.npz"
    save_checkpoint(agent, ckpt)
    meta = {
        **stamp,
        "mode": acfg.mode,
        "tickers": list(table.tickers),
        "state_dim": agent.actor.in_dim,
        "hidden": list(acfg.hidden),
        "episodes": acfg.episodes,
        "updates": trace.records[-1].updates,
        "config": cfg.to_dict(),
    }
    _write_text(ckpt.with_suffix(".json"), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    last = trace.records[-1]
    print(f"trace={trace_path} checkpoint={ckpt} stages={len(trace)} "
          f"ARD={last.ARD!r} NPRW={last.NPRW} AV={last.AV!r}")
    return EXIT_OK


def _agent_curve(cfg: RunConfig, table: PriceTable, grid: PeriodGrid, ckpt_path) -> EquityCurve:
    ckpt_path = Path(ckpt_path)
    if not ckpt_path.exists():
        raise DataError(f"checkpoint {ckpt_path} not found")
    meta_path = ckpt_path.with_suffix(".json")
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("tickers") != list(table.tickers):
            raise DataError("checkpoint was trained on a different ticker set")
    agent = load_checkpoint(ckpt_path, cfg.agent_config())
    policy = ActorPolicy(agent.actor, cfg.env.leverage)
    return run_backtest(policy, table, grid, cfg.backtest_config(), _provider(cfg))


def _default_checkpoint(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / f"checkpoint_{cfg.agent.get('mode', 'full')}.npz"


def _emit_report(out: Path, stem: str, results: dict, stamp: dict) -> None:
    text, doc = report(results, stamp)
    _write_text(out / f"{stem}.csv", text)
    _write_text(out / f"{stem}.json", dump_report_json(doc))


def _metrics_for(curve: EquityCurve, cfg: RunConfig):
    return metrics(daily_returns(curve), cfg.backtest.r_f, cfg.backtest.M_ac)


def cmd_backtest(args) -> int:
    cfg = _load_config(args)
    table = _read_table(cfg)
    _, bt_grid = windows(cfg, table)
    curve = _agent_curve(cfg, table, bt_grid, args.checkpoint or _default_checkpoint(cfg))
    out = _out_dir(cfg)
    stamp = cfg.stamp()
    _write_text(out / "curves" / f"equity_{AGENT_NAME}.csv", _curve_text(curve, stamp))
    m = _metrics_for(curve, cfg)
    _emit_report(out, "report_agent", {AGENT_NAME: m}, stamp)
    print(f"{AGENT_NAME} AR={m.AR!r} DR={m.DR!r} Std={m.Std!r} SR={m.SR!r} LStd={m.LStd!r} STR={m.STR!r}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_config(args)
    names = list(STRATEGY_NAMES)
    if args.only:
        names = [s.strip().upper() for s in args.only.split(",") if s.strip()]
        unknown = [s for s in names if s not in STRATEGY_NAMES]
        if unknown:
            raise ConfigError(f"unknown strategy name(s): {', '.join(unknown)}")
    table = _read_table(cfg)
    _, bt_grid = windows(cfg, table)
    bcfg = cfg.backtest_config()

    def run_one(name):
        return run_backtest(make_strategy(name, **cfg.strategy_params(name)), table, bt_grid, bcfg)

    with ThreadPoolExecutor() as pool:
        curves = dict(zip(names, pool.map(run_one, names)))
    if args.checkpoint:
        curves[AGENT_NAME] = _agent_curve(cfg, table, bt_grid, args.checkpoint)
    out = _out_dir(cfg)
    stamp = cfg.stamp()
    results = {}
    for name, curve in curves.items():
        _write_text(out / "curves" / f"equity_{name}.csv", _curve_text(curve, stamp))
        results[name] = _metrics_for(curve, cfg)
    _emit_report(out, "report", results, stamp)
    text, _ = report(results)
    sys.stdout.write(text)
    return EXIT_OK


def _series_csv(header, rows, stamp) -> str:
    buf = io.StringIO()
    for key in sorted(stamp):
        buf.write(f"# {key}={stamp[key]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, (str, int)) else repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_report(args) -> int:
    if not (args.trace or args.report or args.curves):
        raise ConfigError("report needs at least one of --trace, --report, --curves")
    out = Path(args.out or os.environ.get(OUT_ENV_VAR) or "out") / "figures"
    stamp = {}
    if args.trace:
        train_rows, loss_rows = [], []
        for path in args.trace:
            if not Path(path).exists():
                raise DataError(f"trace {path} not found")
            trace = TrainingTrace.read(Path(path).read_text())
            stamp = {k: v for k, v in trace.meta.items() if k in ("config_sha256", "seed")} or stamp
            label = trace.meta.get("mode", Path(path).stem)
            for r in trace.records:
                train_rows.append([label, r.stage, r.AR, r.ARD, r.AV, r.NPR, r.NPRW])
                loss_rows.append([label, r.stage] + [getattr(r, f) for f in LOSS_FIELDS])
        _write_text(out / "training_indices.csv",
                    _series_csv(["trace", "stage", "AR", "ARD", "AV", "NPR", "NPRW"], train_rows, stamp))
        _write_text(out / "training_losses.csv",
                    _series_csv(["trace", "stage", *LOSS_FIELDS], loss_rows, stamp))
    if args.report:
        if not Path(args.report).exists():
            raise DataError(f"report {args.report} not found")
        results = parse_report(Path(args.report).read_text())
        rows = [[name, m.Std, m.LStd, m.DR] for name, m in results.items()]
        _write_text(out / "risk_return.csv", _series_csv(["strategy", "Std", "LStd", "DR"], rows, stamp))
    if args.curves:
        files = sorted(Path(args.curves).glob("equity_*.csv"))
        if not files:
            raise DataError(f"no equity_*.csv files in {args.curves}")
        rows = []
        for f in files:
            initial, dates, totals = read_curve(f)
            cum = np.log2(totals / initial)
            rows.extend([f.stem[len("equity_"):], d, v, c] for d, v, c in zip(dates, totals, cum))
        _write_text(out / "equity.csv",
                    _series_csv(["strategy", "date", "total_value", "cumulative_return"], rows, stamp))
    print(f"figures={out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.kind == "drift":
        table = synthetic.drift_table(args.days, args.drift)
        buf = io.StringIO()
        dump_price_table(table, buf)
        text = buf.getvalue()
    else:
        text = synthetic.random_walk_csv(args.tickers, args.days, args.seed,
                                         gap_ticker=args.gap_ticker)
    _write_text(Path(args.path), text)
    print(f"wrote {args.path}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="factorlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="TOML run configuration")
        if data:
            sp.add_argument("--data", help="price CSV (overrides [data] path)")
        sp.add_argument("--out", help=f"output directory (overrides ${OUT_ENV_VAR} and config)")
        sp.add_argument("--seed", type=int, help="root seed")

    sp = sub.add_parser("ingest", help="validate and normalize a price file")
    common(sp)
    sp.set_defaults(func=cmd_ingest)

    sp = sub.add_parser("train", help="train the agent, write trace and checkpoint")
    common(sp)
    sp.add_argument("--mode", choices=("full", "lsv1", "lsv2"))
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("backtest", help="backtest a trained checkpoint")
    common(sp)
    sp.add_argument("--mode", choices=("full", "lsv1", "lsv2"))
    sp.add_argument("--checkpoint")
    sp.set_defaults(func=cmd_backtest)

    sp = sub.add_parser("bench", help="backtest the benchmark strategies")
    common(sp)
    sp.add_argument("--only", help="comma-separated strategy names")
    sp.add_argument("--checkpoint", help="also include the trained agent")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("report", help="emit plot-ready data series")
    sp.add_argument("--trace", nargs="*", default=[])
    sp.add_argument("--report")
    sp.add_argument("--curves")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth", help="write a synthetic price file")
    sp.add_argument("path")
    sp.add_argument("--kind", choices=("drift", "walk"), default="walk")
    sp.add_argument("--days", type=int, default=1000)
    sp.add_argument("--tickers", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--drift", type=float, default=0.002)
    sp.add_argument("--gap-ticker", type=int, default=None)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, KeyError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
