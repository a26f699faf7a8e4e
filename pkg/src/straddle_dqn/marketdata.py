"""Candlestick data: loading, resampling, synthetic generation and windowing."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "open", "high", "low", "close", "volume", "value")
SUPPORTED_PERIODS = (15, 30, 60, 1440)
DAILY = 1440
DEFAULT_TZ = timezone(timedelta(hours=8))


class DataError(ValueError):
    """Raised for malformed or inconsistent market data."""


@dataclass(frozen=True)
class Candle:
    timestamp: datetime  # bar close time, timezone-aware
    open: float
    high: float
    low: float
    close: float
    volume: float = 0.0
    value: float = 0.0

    def __post_init__(self):
        if self.timestamp.tzinfo is None:
            raise DataError("candle timestamp must carry a UTC offset")
        prices = (self.open, self.high, self.low, self.close)
        if not all(np.isfinite(p) and p > 0 for p in prices):
            raise DataError(f"non-positive or non-finite price in {prices}")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise DataError(
                f"OHLC inconsistent: O={self.open} H={self.high} L={self.low} C={self.close}"
            )
        if self.volume < 0 or self.value < 0:
            raise DataError("volume and value must be non-negative")


@dataclass(frozen=True)
class TradingCalendar:
    """Weekend mask plus explicit holidays.

    ``weekend`` holds ``date.weekday()`` numbers (Mon=0). ``bars_per_day`` is the
    number of base-period bars in one session.
    """

    weekend: frozenset[int] = frozenset({5, 6})
    holidays: frozenset[date] = frozenset()
    bars_per_day: int = 16
    session_open: time = time(9, 30)
    tz: timezone = DEFAULT_TZ

    def __post_init__(self):
        if self.bars_per_day < 1:
            raise ValueError("bars_per_day must be >= 1")
        object.__setattr__(self, "weekend", frozenset(self.weekend))
        object.__setattr__(self, "holidays", frozenset(self.holidays))

    @classmethod
    def from_holiday_file(cls, path: str | Path, **kwargs) -> "TradingCalendar":
        days = set()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                days.add(date.fromisoformat(line))
        return cls(holidays=frozenset(days), **kwargs)

    def is_trading_day(self, day: date) -> bool:
        return day.weekday() not in self.weekend and day not in self.holidays

    def next_trading_day(self, day: date) -> date:
        nxt = day + timedelta(days=1)
        for _ in range(366):
            if self.is_trading_day(nxt):
                return nxt
            nxt += timedelta(days=1)
        raise ValueError("no trading day within a year; calendar masks every day")

    def trading_days(self, start: date) -> Iterator[date]:
        day = start if self.is_trading_day(start) else self.next_trading_day(start)
        while True:
            yield day
            day = self.next_trading_day(day)

    def bar_closes(self, day: date, period: int) -> list[datetime]:
        """Close times of the session's bars at ``period`` minutes."""
        if period >= DAILY:
            base = datetime.combine(day, self.session_open, tzinfo=self.tz)
            return [base + timedelta(minutes=15 * self.bars_per_day)]
        per_day = max(1, self.bars_per_day * 15 // period)
        start = datetime.combine(day, self.session_open, tzinfo=self.tz)
        return [start + timedelta(minutes=period * (k + 1)) for k in range(per_day)]


def days_to_next_trading_day(t: datetime, cal: TradingCalendar) -> int:
    """Non-trading calendar days between ``t``'s day and the next session.

    Thursday before a trading Friday gives 0, a Friday before a weekend gives 2.
    """
    day = t.date()
    return (cal.next_trading_day(day) - day).days - 1


class BarSeries:
    """Immutable, time-ordered OHLCV bars at a fixed period (minutes)."""

    __slots__ = ("period", "timestamps", "epoch", "open", "high", "low", "close",
                 "volume", "value")

    def __init__(self, period: int, timestamps: Sequence[datetime], open, high, low,
                 close, volume, value):
        self.period = int(period)
        self.timestamps = tuple(timestamps)
        cols = []
        for arr in (open, high, low, close, volume, value):
            a = np.array(arr, dtype=np.float64)
            a.setflags(write=False)
            cols.append(a)
        self.open, self.high, self.low, self.close, self.volume, self.value = cols
        n = len(self.timestamps)
        if any(len(c) != n for c in cols):
            raise DataError("column lengths differ")
        epoch = np.array([ts.timestamp() for ts in self.timestamps], dtype=np.float64)
        if n > 1 and not np.all(np.diff(epoch) > 0):
            bad = int(np.argmin(np.diff(epoch) > 0)) + 1
            raise DataError(f"timestamps not strictly increasing at bar {bad}")
        epoch.setflags(write=False)
        self.epoch = epoch

    @classmethod
    def from_candles(cls, period: int, candles: Sequence[Candle]) -> "BarSeries":
        return cls(
            period,
            [c.timestamp for c in candles],
            [c.open for c in candles],
            [c.high for c in candles],
            [c.low for c in candles],
            [c.close for c in candles],
            [c.volume for c in candles],
            [c.value for c in candles],
        )

    def __len__(self) -> int:
        return len(self.timestamps)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return BarSeries(self.period, self.timestamps[i], self.open[i], self.high[i],
                             self.low[i], self.close[i], self.volume[i], self.value[i])
        return Candle(self.timestamps[i], float(self.open[i]), float(self.high[i]),
                      float(self.low[i]), float(self.close[i]), float(self.volume[i]),
                      float(self.value[i]))

    def __iter__(self) -> Iterator[Candle]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, BarSeries):
            return NotImplemented
        return (
            self.period == other.period
            and self.timestamps == other.timestamps
            and all(np.array_equal(a, b) for a, b in zip(self._columns(), other._columns()))
        )

    def __repr__(self) -> str:
        span = f"{self.timestamps[0].isoformat()}..{self.timestamps[-1].isoformat()}" if len(self) else "empty"
        return f"BarSeries(period={self.period}, n={len(self)}, {span})"

    def _columns(self):
        return (self.open, self.high, self.low, self.close, self.volume, self.value)

    def local_days(self) -> np.ndarray:
        """Proleptic ordinal of each bar's local (exchange) date."""
        return np.array([ts.date().toordinal() for ts in self.timestamps], dtype=np.int64)

    def index_at_or_before(self, epoch: float) -> int:
        """Index of the last bar whose close time is <= ``epoch`` (-1 if none)."""
        return int(np.searchsorted(self.epoch, epoch, side="right")) - 1


def _parse_row(row: list[str], lineno: int) -> Candle:
    if len(row) != len(CSV_HEADER):
        raise DataError(f"line {lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
    try:
        ts = datetime.fromisoformat(row[0].strip())
        nums = [float(x) for x in row[1:]]
    except ValueError as exc:
        raise DataError(f"line {lineno}: {exc}") from None
    if ts.tzinfo is None:
        raise DataError(f"line {lineno}: timestamp lacks a UTC offset")
    try:
        return Candle(ts, *nums)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def load_csv(path: str | Path, period: int = 15, calendar: TradingCalendar | None = None) -> BarSeries:
    """Read bars from a CSV with header ``timestamp,open,high,low,close,volume,value``.

    Raises DataError naming the offending line for malformed rows, OHLC violations
    and non-increasing timestamps.
    """
    path = Path(path)
    candles: list[Candle] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: header must be {','.join(CSV_HEADER)}")
        prev = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            c = _parse_row(row, lineno)
            if prev is not None and c.timestamp <= prev:
                raise DataError(f"line {lineno}: non-monotonic timestamp {row[0]}")
            prev = c.timestamp
            candles.append(c)
    if not candles:
        raise DataError(f"{path}: no data rows")
    if calendar is not None:
        off = sum(not calendar.is_trading_day(c.timestamp.date()) for c in candles)
        if off:
            logger.warning("%s: %d bars fall on non-trading days", path, off)
    return BarSeries.from_candles(period, candles)


def write_csv(series: BarSeries, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for i, ts in enumerate(series.timestamps):
            w.writerow([ts.isoformat()] + [repr(float(c[i])) for c in series._columns()])


def _groups(series: BarSeries, target: int, bars_per_day: int | None) -> list[tuple[int, int]]:
    days = series.local_days()
    # runs of equal local date
    cuts = np.flatnonzero(np.diff(days)) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [len(series)]])
    out = []
    if target >= DAILY:
        full = bars_per_day if bars_per_day else int((ends - starts).max(initial=0))
        for j, (s, e) in enumerate(zip(starts, ends)):
            if j == len(starts) - 1 and e - s < full:
                continue  # partial trailing day
            out.append((int(s), int(e)))
        return out
    k = target // series.period
    for s, e in zip(starts, ends):
        for g in range(int(s), int(e) - k + 1, k):
            out.append((g, g + k))
    return out


def resample(base: BarSeries, target: int, bars_per_day: int | None = None) -> BarSeries:
    """Aggregate ``base`` into ``target``-minute bars.

    Intraday groups never straddle a session boundary; incomplete groups are dropped.
    A daily target groups whole sessions, dropping a partial final session.
    """
    if target == base.period:
        return base
    if target < base.period or (target < DAILY and target % base.period):
        raise DataError(f"target period {target} is not a multiple of {base.period}")
    groups = _groups(base, target, bars_per_day)
    if not groups:
        return BarSeries(target, [], [], [], [], [], [], [])
    s = np.array([g[0] for g in groups])
    e = np.array([g[1] for g in groups])
    return BarSeries(
        target,
        [base.timestamps[j - 1] for j in e],
        base.open[s],
        [base.high[a:b].max() for a, b in groups],
        [base.low[a:b].min() for a, b in groups],
        base.close[e - 1],
        [base.volume[a:b].sum() for a, b in groups],
        [base.value[a:b].sum() for a, b in groups],
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Regime-switching GBM generator settings.

    ``regimes`` is a list of (annualized volatility, annual drift). The transition
    matrix is sampled once per bar.
    """

    regimes: tuple[tuple[float, float], ...] = ((0.2, 0.0),)
    transition: tuple[tuple[float, ...], ...] = ((1.0,),)
    seed: int = 0
    n_bars: int = 10_000
    initial_price: float = 3000.0
    period: int = 15
    bars_per_year: float = 3872.0
    start: date = date(2018, 1, 2)
    calendar: TradingCalendar = field(default_factory=TradingCalendar)

    def __post_init__(self):
        object.__setattr__(self, "regimes", tuple(tuple(map(float, r)) for r in self.regimes))
        object.__setattr__(self, "transition", tuple(tuple(map(float, r)) for r in self.transition))
        self.validate()

    def validate(self) -> None:
        k = len(self.regimes)
        if k == 0:
            raise ValueError("at least one regime required")
        for vol, _ in self.regimes:
            if vol < 0:
                raise ValueError("regime volatility must be >= 0")
        P = np.asarray(self.transition, dtype=np.float64)
        if P.shape != (k, k):
            raise ValueError(f"transition matrix must be {k}x{k}, got {P.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("transition matrix must be row-stochastic")
        if self.initial_price <= 0:
            raise ValueError("initial price must be > 0")
        if self.n_bars < 1:
            raise ValueError("n_bars must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def simulate_regimes(spec: SyntheticSpec) -> tuple[BarSeries, np.ndarray]:
    """Generate bars and the per-bar regime index that produced them."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    n = spec.n_bars
    P = np.cumsum(np.asarray(spec.transition), axis=1)
    u = rng.random(n)
    regimes = np.empty(n, dtype=np.int64)
    state = 0
    for i in range(n):
        if i:
            state = min(int(np.searchsorted(P[state], u[i], side="right")), len(P) - 1)
        regimes[i] = state
    vols = np.array([r[0] for r in spec.regimes])[regimes]
    drifts = np.array([r[1] for r in spec.regimes])[regimes]
    dt = 1.0 / spec.bars_per_year
    sub_dt = dt / 4.0
    z = rng.standard_normal((n, 4))
    incr = (drifts - 0.5 * vols**2)[:, None] * sub_dt + vols[:, None] * np.sqrt(sub_dt) * z
    samples = spec.initial_price * np.exp(np.cumsum(incr.ravel()).reshape(n, 4))
    close = samples[:, 3]
    open_ = np.concatenate([[spec.initial_price], close[:-1]])
    high = np.maximum(open_, samples.max(axis=1))
    low = np.minimum(open_, samples.min(axis=1))
    volume = np.round(rng.lognormal(mean=10.0, sigma=0.5, size=n))
    value = volume * (open_ + close) / 2.0

    stamps: list[datetime] = []
    for day in spec.calendar.trading_days(spec.start):
        for ts in spec.calendar.bar_closes(day, spec.period):
            stamps.append(ts)
        if len(stamps) >= n:
            break
    return BarSeries(spec.period, stamps[:n], open_, high, low, close, volume, value), regimes


def generate_synthetic(spec: SyntheticSpec) -> BarSeries:
    return simulate_regimes(spec)[0]


def window(series: BarSeries, t: int, d: int) -> BarSeries:
    """The ``d`` bars ending at index ``t`` (inclusive)."""
    if d < 1:
        raise ValueError("window length must be >= 1")
    if t >= len(series) or t < 0:
        raise IndexError(f"index {t} out of range for series of length {len(series)}")
    if t < d - 1:
        raise DataError(f"insufficient history: need {d} bars ending at {t}")
    return series[t - d + 1: t + 1]
