"""Command-line entry point: ``straddle-dqn <subcommand>``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .backtest import (AlwaysLongPolicy, DualMAPolicy, GreedyQPolicy, RandomStraddlePolicy, emit_report,
                       run_policy)
from .config import ConfigError, RunConfig, parse_override
from .ddqn import train
from .env import MarketFeatures, StraddleEnv, _delta
from .marketdata import BarSeries, DataError, load_csv, write_csv, generate_synthetic
from .pricing import OptionQuote, bs_price
from .qnet import CheckpointError, load_params
from .resistance import cluster_levels, detect_swings, flag_series

logger = logging.getLogger("straddle_dqn")

POLICIES = ("greedy_q", "long", "ma", "random")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=argparse.SUPPRESS, help="TOML run configuration")
    p.add_argument("--seed", type=int, metavar="U64", default=argparse.SUPPRESS, help="random seed")
    p.add_argument("--out", metavar="DIR", default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   default=argparse.SUPPRESS, help="override a config value, e.g. train.total_steps=500")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="straddle-dqn", parents=[common],
                                     description="Straddle trading with a Double-DQN agent.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic regime-switching bar series")
    g.add_argument("path", nargs="?", help="output CSV (default <out>/data.csv)")
    g.add_argument("--bars", type=int, help="number of bars")

    t = sub.add_parser("train", parents=[common], help="train the agent on the training split")
    t.add_argument("--steps", type=int, help="total environment steps")

    b = sub.add_parser("backtest", parents=[common], help="evaluate policies on the held-out split")
    b.add_argument("--checkpoint", metavar="PATH", help="trained network for greedy_q")
    b.add_argument("--policies", help=f"comma-separated subset of {','.join(POLICIES)}")

    pr = sub.add_parser("price", parents=[common], help="Black-Scholes value and delta")
    pr.add_argument("kind", choices=("call", "put"))
    for name in ("S", "K", "r", "sigma", "tau"):
        pr.add_argument(name, type=float)

    r = sub.add_parser("resistance", parents=[common], help="support/resistance levels and per-bar flags")
    r.add_argument("data", help="bar CSV file")
    r.add_argument("--period", type=int, default=None, help="bar period in minutes (default data.period)")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    for text in getattr(args, "overrides", None) or []:
        key, value = parse_override(text)
        overrides[key] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["out"] = args.out
    return RunConfig.load(getattr(args, "config", None), overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.get("out")
    return Path(out) if out else Path("runs")


def _series(cfg: RunConfig) -> BarSeries:
    path = cfg.data_path()
    if path is None:
        return generate_synthetic(cfg.synthetic())
    return load_csv(path, period=cfg.get("data.period", 15), calendar=cfg.calendar())


def _features(cfg: RunConfig) -> tuple[MarketFeatures, int]:
    series = _series(cfg)
    data = MarketFeatures(series, cfg.env(), cfg.calendar())
    split = int(len(series) * cfg.train_fraction)
    if split <= data.first_valid + 1:
        raise DataError(f"training split of {split} bars leaves no room after the "
                        f"{data.first_valid}-bar warm-up")
    return data, split


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(cfg: RunConfig, path: str | None, bars: int | None) -> int:
    if bars is not None:
        cfg.raw.setdefault("synthetic", {})["n_bars"] = bars
    spec = cfg.synthetic()
    dest = Path(path) if path else _out_dir(cfg) / "data.csv"
    dest.parent.mkdir(parents=True, exist_ok=True)
    write_csv(generate_synthetic(spec), dest)
    print(dest)
    return 0


def cmd_train(cfg: RunConfig, steps: int | None) -> int:
    if steps is not None:
        cfg.raw.setdefault("train", {})["total_steps"] = steps
    tcfg = cfg.train()
    data, split = _features(cfg)
    net_cfg = cfg.network(data.cfg)

    def env_factory(rng):
        return StraddleEnv(data, rng, bounds=(0, split - 1))

    result = train(env_factory, net_cfg, tcfg, _out_dir(cfg))
    print(result.checkpoint)
    return 0


def cmd_backtest(cfg: RunConfig, checkpoint: str | None, policies: str | None) -> int:
    names = policies.split(",") if policies else list(cfg.get("backtest.policies", ["long", "ma", "random"]))
    names = [n.strip() for n in names if n.strip()]
    bad = [n for n in names if n not in POLICIES]
    if bad or not names:
        raise UsageError(f"unknown policies {bad}; choose from {','.join(POLICIES)}")
    ckpt = Path(checkpoint) if checkpoint else cfg.resolve_path(cfg.get("backtest.checkpoint"))
    if "greedy_q" in names:
        if ckpt is None:
            raise UsageError("policy greedy_q requires --checkpoint")
        if not ckpt.is_file():
            raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    seed = cfg.seed
    data, split = _features(cfg)
    start = max(split, data.first_valid)
    bt = cfg.section("backtest")
    runs = []
    for name in names:
        if name == "greedy_q":
            params = load_params(ckpt, expected=cfg.network(data.cfg))
            policy = GreedyQPolicy(params)
        elif name == "long":
            policy = AlwaysLongPolicy()
        elif name == "ma":
            policy = DualMAPolicy(bt.get("ma_fast", 5), bt.get("ma_slow", 20))
        else:
            policy = RandomStraddlePolicy(bt.get("random_q", 0.02), bt.get("random_hold_bars", 16), seed)
        runs.append(run_policy(policy, data, start))
    out = _out_dir(cfg) / "report"
    reports = emit_report(runs, out)
    for name, m in reports.items():
        print(f"{name}: avgr={m.avgr:.6f} sharpe={m.sharpe:.6f} mdd={m.mdd:.6f} trades={m.trades}")
    print(out)
    return 0


def cmd_price(kind: str, S: float, K: float, r: float, sigma: float, tau: float) -> int:
    try:
        value = bs_price(OptionQuote(kind, S, K, r, sigma, tau))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    delta = _delta(kind, S, K, r, sigma, tau)
    print(f"price {value:.6f}")
    print(f"delta {delta:.6f}")
    return 0


def cmd_resistance(cfg: RunConfig, data_path: str, period: int | None) -> int:
    path = Path(data_path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    prof = cfg.market()
    series = load_csv(path, period=period or cfg.get("data.period", 15), calendar=cfg.calendar())
    params = cfg.resistance()
    res, sup = detect_swings(series, params)
    levels = cluster_levels(res + sup, params.merge_pct)
    flags = flag_series(series, params, prof.bars_per_day)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(("record", "timestamp", "price", "flag"))
    for lv in levels:
        w.writerow(("level", "", repr(float(lv)), ""))
    for ts, c, f in zip(series.timestamps, series.close, flags):
        w.writerow(("bar", ts.isoformat(), repr(float(c)), int(f)))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "price":
            return cmd_price(args.kind, args.S, args.K, args.r, args.sigma, args.tau)
        cfg = _load_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.path, args.bars)
        if args.command == "train":
            return cmd_train(cfg, args.steps)
        if args.command == "backtest":
            return cmd_backtest(cfg, args.checkpoint, args.policies)
        return cmd_resistance(cfg, args.data, args.period)
    except (ConfigError, UsageError, FileNotFoundError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ValueError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
