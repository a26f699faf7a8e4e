"""Policy evaluation, performance metrics and report files."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .env import TRADE_LOG_HEADER, MarketFeatures, MarketState, StraddleEnv, TradeRecord
from .marketdata import DAILY, BarSeries, resample
from .qnet import QNetworkParams, forward, stack_states

SHARPE_CAP = 1e6
ETF_FEE = 0.0005
METRICS_HEADER = ("policy", "avgr", "sharpe", "mdd", "trades", "fees")


@dataclass(frozen=True)
class EquityCurve:
    timestamps: tuple[datetime, ...]
    values: np.ndarray
    bars_per_year: float = 3872.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        if len(v) != len(self.timestamps):
            raise ValueError("timestamps and values differ in length")
        if np.any(~(v > 0)):
            raise ValueError("equity values must be positive")
        if len(v) > 1 and any(b <= a for a, b in zip(self.timestamps, self.timestamps[1:])):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    def __getitem__(self, s: slice) -> "EquityCurve":
        return EquityCurve(self.timestamps[s], self.values[s], self.bars_per_year)


@dataclass(frozen=True)
class MetricsReport:
    avgr: float
    sharpe: float
    mdd: float
    trades: int
    win_rate: float
    fees: float


# --------------------------------------------------------------------------- metrics


def avgr(curve: EquityCurve) -> float:
    """Annualized log return: ln(V_end / V_start) scaled by bars-per-year / elapsed bars."""
    if len(curve) < 2:
        return 0.0
    v = curve.values
    return math.log(v[-1] / v[0]) * curve.bars_per_year / (len(v) - 1)


def sharpe(curve: EquityCurve) -> float:
    """Annualized mean over annualized std of per-bar log returns, risk-free 0.

    Zero variance gives 0 for a flat curve and +/-SHARPE_CAP otherwise.
    """
    if len(curve) < 3:
        return 0.0
    r = np.diff(np.log(curve.values))
    mu = float(r.mean())
    sd = float(r.std(ddof=1))
    if sd <= 1e-12 or sd <= 1e-9 * abs(mu):
        if abs(mu) < 1e-15:
            return 0.0
        return math.copysign(SHARPE_CAP, mu)
    sp = mu / sd * math.sqrt(curve.bars_per_year)
    return max(-SHARPE_CAP, min(SHARPE_CAP, sp))


def max_drawdown_log(curve: EquityCurve) -> float:
    if len(curve) == 0:
        return 0.0
    lv = np.log(curve.values)
    return float(min(0.0, (lv - np.maximum.accumulate(lv)).min()))


def compute_metrics(curve: EquityCurve, n_trades: int, fees: float,
                    trades: Sequence[TradeRecord] = ()) -> MetricsReport:
    """Metrics for one run; win rate counts straddle round trips with log return > 0."""
    wins = sum(t.log_return > 0 for t in trades)
    return MetricsReport(avgr(curve), sharpe(curve), max_drawdown_log(curve), n_trades,
                         wins / len(trades) if trades else 0.0, fees)


# --------------------------------------------------------------------------- policies


class StraddlePolicy(Protocol):
    name: str

    def act(self, state: MarketState, env: StraddleEnv) -> int: ...


class GreedyQPolicy:
    name = "greedy_q"

    def __init__(self, params: QNetworkParams, name: str = "greedy_q"):
        self.params = params
        self.name = name

    def act(self, state: MarketState, env: StraddleEnv) -> int:
        Q, _ = forward(stack_states([state]), self.params)
        return int(Q[0, 1] > Q[0, 0])  # ties -> 0


class RandomStraddlePolicy:
    """Open with probability q per flat bar; close after ``hold_bars``."""

    name = "random"

    def __init__(self, q: float = 0.02, hold_bars: int = 16, seed: int = 0):
        if not 0 <= q <= 1:
            raise ValueError("q must lie in [0, 1]")
        self.q = q
        self.hold_bars = hold_bars
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def act(self, state: MarketState, env: StraddleEnv) -> int:
        if env.position is None:
            return int(self.rng.random() < self.q)
        return int(env.hold_bars < self.hold_bars)


@dataclass(frozen=True)
class AlwaysLongPolicy:
    name: str = "long"
    fee: float = ETF_FEE


@dataclass(frozen=True)
class DualMAPolicy:
    fast: int = 5
    slow: int = 20
    fee: float = ETF_FEE
    name: str = "ma"

    def __post_init__(self):
        if not 0 < self.fast < self.slow:
            raise ValueError(f"need 0 < fast < slow, got fast={self.fast} slow={self.slow}")


def dual_ma_policy(fast: int = 5, slow: int = 20) -> DualMAPolicy:
    return DualMAPolicy(fast, slow)


def dual_ma_signals(closes: Sequence[float], fast: int, slow: int) -> np.ndarray:
    """1 where SMA(fast) > SMA(slow) at that close, 0 otherwise (0 before ``slow`` closes)."""
    c = np.asarray(closes, dtype=np.float64)
    out = np.zeros(len(c), dtype=np.int8)
    if len(c) < slow:
        return out
    cs = np.concatenate([[0.0], np.cumsum(c)])
    idx = np.arange(slow - 1, len(c))
    f = (cs[idx + 1] - cs[idx + 1 - fast]) / fast
    s = (cs[idx + 1] - cs[idx + 1 - slow]) / slow
    out[idx] = (f > s).astype(np.int8)
    return out


# --------------------------------------------------------------------------- runners


@dataclass
class PolicyRun:
    name: str
    curve: EquityCurve
    trades: list[TradeRecord]
    fees: float
    opens: list[int]  # bar indices where a position was opened

    @property
    def n_trades(self) -> int:
        return len(self.trades) if self.trades else len(self.opens)

    def metrics(self) -> MetricsReport:
        return compute_metrics(self.curve, self.n_trades, self.fees, self.trades)


def _run_straddle(policy, data: MarketFeatures, start: int, end: int) -> PolicyRun:
    env = StraddleEnv(data)
    state = env.reset(start, end)
    stamps = [data.series.timestamps[start]]
    values = [env.equity]
    opens = []
    while True:
        state, _, terminal, info = env.step(policy.act(state, env))
        if info.opened:
            opens.append(env.t - 1)
        stamps.append(data.series.timestamps[env.t])
        values.append(env.equity)
        if terminal:
            break
    curve = EquityCurve(stamps, values, data.cfg.bars_per_year)
    return PolicyRun(policy.name, curve, list(env.trades), env.fees_paid, opens)


def run_long(policy: AlwaysLongPolicy, series: BarSeries, start: int, end: int, capital: float,
              bars_per_year: float) -> PolicyRun:
    c = series.close[start:end + 1]
    fee = capital * policy.fee
    values = (capital - fee) * c / c[0]
    curve = EquityCurve(series.timestamps[start:end + 1], values, bars_per_year)
    return PolicyRun(policy.name, curve, [], fee, [start])


def run_dual_ma(policy: DualMAPolicy, series: BarSeries, start: int, end: int, capital: float,
                 bars_per_day: int, bars_per_year: float) -> PolicyRun:
    daily = resample(series, DAILY, bars_per_day) if series.period != DAILY else series
    if len(daily) < policy.slow:
        raise ValueError(f"insufficient history: {len(daily)} daily closes < slow window {policy.slow}")
    sig = dual_ma_signals(daily.close, policy.fast, policy.slow)
    # base index of each daily close; a signal there is executed at the next bar's open
    day_end = np.searchsorted(series.epoch, daily.epoch)
    target_at = np.full(len(series), -1, dtype=np.int8)
    target_at[day_end] = sig
    cash, units = capital, 0.0
    fees = 0.0
    opens = []
    values = []
    for t in range(start, end + 1):
        if t > start and target_at[t - 1] >= 0:
            want = int(target_at[t - 1])
            px = float(series.open[t])
            if want == 1 and units == 0.0:
                fee = cash * policy.fee
                units = (cash - fee) / px
                cash, fees = 0.0, fees + fee
                opens.append(t)
            elif want == 0 and units > 0.0:
                gross = units * px
                fee = gross * policy.fee
                cash, units, fees = gross - fee, 0.0, fees + fee
        values.append(cash + units * float(series.close[t]))
    curve = EquityCurve(series.timestamps[start:end + 1], values, bars_per_year)
    return PolicyRun(policy.name, curve, [], fees, opens)


def run_policy(policy, data: MarketFeatures, start: int | None = None,
               end: int | None = None) -> PolicyRun:
    """Evaluate one policy over bars [start, end] as a single episode.

    Straddle policies (greedy-Q, random) trade through the environment; the long
    and dual-MA baselines trade the underlying with an ETF-style proportional fee.
    """
    n = len(data.series)
    start = data.first_valid if start is None else start
    end = n - 1 if end is None else end
    if start < data.first_valid:
        raise ValueError(f"insufficient history for warm-up windows: start {start} < {data.first_valid}")
    if not start < end < n:
        raise ValueError(f"bad evaluation range [{start}, {end}]")
    cfg = data.cfg
    if isinstance(policy, AlwaysLongPolicy):
        return run_long(policy, data.series, start, end, cfg.initial_capital, cfg.bars_per_year)
    if isinstance(policy, DualMAPolicy):
        return run_dual_ma(policy, data.series, start, end, cfg.initial_capital,
                            cfg.bars_per_day, cfg.bars_per_year)
    return _run_straddle(policy, data, start, end)


# --------------------------------------------------------------------------- reports


def _svg(runs: Sequence[PolicyRun], width: int = 800, height: int = 400) -> str:
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
    pad = 40
    series = [np.log(r.curve.values / r.curve.values[0]) for r in runs]
    lo = min(float(s.min()) for s in series)
    hi = max(float(s.max()) for s in series)
    span = hi - lo if hi > lo else 1.0
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    for k, (run, s) in enumerate(zip(runs, series)):
        n = max(len(s) - 1, 1)
        pts = " ".join(
            f"{pad + (width - 2 * pad) * i / n:.2f},{height - pad - (height - 2 * pad) * (v - lo) / span:.2f}"
            for i, v in enumerate(s))
        color = colors[k % len(colors)]
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        lines.append(f'<text x="{pad + 5}" y="{pad + 15 * (k + 1)}" fill="{color}" '
                     f'font-size="12">{run.name}</text>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def emit_report(runs: Sequence[PolicyRun], out_dir: str | Path) -> dict[str, MetricsReport]:
    """Write equity_<policy>.csv, metrics.csv and equity.svg; byte-stable for fixed inputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for run in runs:
        with (out / f"equity_{run.name}.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("timestamp", "equity"))
            for ts, v in zip(run.curve.timestamps, run.curve.values):
                w.writerow((ts.isoformat(), f"{v:.6f}"))
        if run.trades:
            write_trade_log(run.trades, out / f"trades_{run.name}.csv")
        reports[run.name] = run.metrics()
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for run in runs:
            m = reports[run.name]
            w.writerow((run.name, f"{m.avgr:.6f}", f"{m.sharpe:.6f}", f"{m.mdd:.6f}", m.trades,
                        f"{m.fees:.6f}"))
    (out / "equity.svg").write_text(_svg(runs), encoding="utf-8")
    return reports


def write_trade_log(trades: Sequence[TradeRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRADE_LOG_HEADER)
        for t in trades:
            w.writerow((t.open_time.isoformat(), t.close_time.isoformat(), repr(t.K_call),
                        repr(t.K_put), t.call_lots, t.put_lots, f"{t.cost:.6f}", f"{t.fees:.6f}",
                        f"{t.proceeds:.6f}", f"{t.log_return:.10f}", int(t.forced)))
