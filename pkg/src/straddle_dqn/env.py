"""Straddle trading environment: position rules, fees, settlement, state and reward."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta
from typing import Literal, Sequence

import numpy as np

from .marketdata import BarSeries, TradingCalendar, days_to_next_trading_day, resample
from .pricing import DEFAULT_RATE, OptionQuote, bs_delta, bs_price, rolling_hv_zero_mean, year_fraction
from .resistance import ResistanceParams, flag_series

logger = logging.getLogger(__name__)

SEQ_FEATURES = ("open", "high", "low", "close", "volume", "value", "pnl", "hv", "days_to_next")
OBS_FEATURES = tuple(f for f in SEQ_FEATURES if f != "pnl")


class CannotAfford(RuntimeError):
    """The minimum straddle (one lot per leg) exceeds the position budget."""


# --------------------------------------------------------------------------- rules


@dataclass(frozen=True)
class StraddleRules:
    strike_interval: float
    min_days_to_roll: float = 15.0
    expiry_rule: Literal["third_friday", "fourth_wednesday"] = "third_friday"
    expiry_time: time = time(15, 0)

    def __post_init__(self):
        if not self.strike_interval > 0:
            raise ValueError("strike interval must be > 0")
        if self.expiry_rule not in ("third_friday", "fourth_wednesday"):
            raise ValueError(f"unknown expiry rule {self.expiry_rule!r}")


def select_strikes(price: float, rules: StraddleRules) -> tuple[float, float]:
    """(call strike, put strike) from the price's third of its strike interval.

    Lower third: both at X. Middle third: call X+S, put X. Upper third: both X+S.
    Segment boundaries belong to the upper segment.
    """
    if not price > 0:
        raise ValueError("price must be > 0")
    S = rules.strike_interval
    eps = 1e-9
    k = math.floor(price / S + eps)
    X = round(k * S, 10)
    frac = (price - k * S) / S
    if frac + eps < 1 / 3:
        return X, X
    upper = round((k + 1) * S, 10)
    if frac + eps < 2 / 3:
        return upper, X
    return upper, upper


def monthly_expiry(year: int, month: int, rule: str = "third_friday") -> date:
    weekday, nth = {"third_friday": (4, 3), "fourth_wednesday": (2, 4)}[rule]
    first = date(year, month, 1)
    offset = (weekday - first.weekday()) % 7
    return first + timedelta(days=offset + 7 * (nth - 1))


def select_expiry(now: datetime, rules: StraddleRules) -> datetime:
    """Current month's expiry unless fewer than ``min_days_to_roll`` days remain."""
    y, m = now.year, now.month
    for _ in range(3):
        exp = datetime.combine(monthly_expiry(y, m, rules.expiry_rule), rules.expiry_time,
                               tzinfo=now.tzinfo)
        if exp - now >= timedelta(days=rules.min_days_to_roll):
            return exp
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    raise AssertionError("unreachable: some month within three has a distant expiry")


# --------------------------------------------------------------------------- fees


@dataclass(frozen=True)
class FeeModel:
    """Option brokerage fees, charged per leg on both open and close.

    per_point: ``per_point * multiplier`` per contract (index options).
    strike_capped: ``min(rate * K * multiplier, cap * premium)`` per contract.
    per_contract: flat ``per_contract`` per contract.
    """

    variant: Literal["per_point", "strike_capped", "per_contract"] = "per_point"
    per_point: float = 0.15
    strike_rate: float = 0.0002
    premium_cap: float = 0.10
    per_contract: float = 1.5

    def __post_init__(self):
        if self.variant not in ("per_point", "strike_capped", "per_contract"):
            raise ValueError(f"unknown fee variant {self.variant!r}")
        if min(self.per_point, self.strike_rate, self.per_contract) < 0:
            raise ValueError("fees must be >= 0")
        if not 0 < self.premium_cap <= 1:
            raise ValueError("premium cap must lie in (0, 1]")

    def per_lot(self, strike: float, unit_price: float, multiplier: float) -> float:
        if self.variant == "per_point":
            return self.per_point * multiplier
        if self.variant == "per_contract":
            return self.per_contract
        return min(self.strike_rate * strike * multiplier, self.premium_cap * unit_price * multiplier)

    def leg_fee(self, strike: float, lots: int, unit_price: float, multiplier: float) -> float:
        return lots * self.per_lot(strike, unit_price, multiplier)


@dataclass(frozen=True)
class MarketProfile:
    name: str
    fee: FeeModel
    multiplier: float
    strike_interval: float
    rate: float = DEFAULT_RATE
    bars_per_day: int = 16
    trading_days_per_year: int = 242
    expiry_rule: str = "third_friday"

    @property
    def bars_per_year(self) -> float:
        return float(self.bars_per_day * self.trading_days_per_year)


PROFILES = {
    "index": MarketProfile("index", FeeModel("per_point", per_point=0.15), 100.0, 50.0),
    "etf": MarketProfile("etf", FeeModel("per_point", per_point=0.0015), 10_000.0, 0.05,
                         expiry_rule="fourth_wednesday"),
    "btc": MarketProfile("btc", FeeModel("strike_capped"), 1.0, 500.0, bars_per_day=96,
                         trading_days_per_year=365),
    "brent": MarketProfile("brent", FeeModel("per_contract", per_contract=1.5), 1000.0, 2.5,
                           bars_per_day=88, trading_days_per_year=252),
}


# --------------------------------------------------------------------------- positions


@dataclass
class OptionLeg:
    kind: Literal["call", "put"]
    strike: float
    lots: int
    entry_price: float  # per unit of underlying
    mark_price: float = 0.0


@dataclass
class StraddlePosition:
    call: OptionLeg
    put: OptionLeg
    expiry: datetime
    multiplier: float
    cost: float  # entry premium + entry fees
    open_fee: float
    open_time: datetime
    open_index: int
    open_spot: float
    market_value: float = 0.0

    @property
    def premium(self) -> float:
        return self.multiplier * (self.call.lots * self.call.entry_price + self.put.lots * self.put.entry_price)

    @property
    def legs(self) -> tuple[OptionLeg, OptionLeg]:
        return self.call, self.put


def open_fee(position: StraddlePosition, fees: FeeModel) -> float:
    return sum(fees.leg_fee(leg.strike, leg.lots, leg.entry_price, position.multiplier)
               for leg in position.legs)


def close_fee(position: StraddlePosition, fees: FeeModel) -> float:
    """Fee on closing at the legs' latest marks."""
    return sum(fees.leg_fee(leg.strike, leg.lots, leg.mark_price, position.multiplier)
               for leg in position.legs)


def _delta(kind: str, S: float, K: float, r: float, sigma: float, tau: float) -> float:
    if tau > 0 and sigma > 0:
        return bs_delta(OptionQuote(kind, S, K, r, sigma, tau))
    fwd_k = K * math.exp(-r * tau)
    step = 1.0 if S > fwd_k else (0.5 if S == fwd_k else 0.0)
    return step if kind == "call" else step - 1.0


def _fit(room, unit, base, budget):
    """Largest k with base + k * unit <= budget, correcting float rounding of room / unit."""
    k = np.floor(np.asarray(room, dtype=float) / unit)
    k = np.where(base + (k + 1) * unit <= budget, k + 1, k)
    return np.where(base + k * unit > budget, k - 1, k)


def size_delta_neutral(price: float, strikes: tuple[float, float], sigma: float, r: float,
                       tau: float, capital: float, limit: float, fees: FeeModel,
                       multiplier: float = 1.0, max_lots: int = 100_000) -> tuple[int, int]:
    """Integer lots (call, put) minimizing |net delta| within ``limit * capital``.

    Ties go to the larger total premium, then to fewer call lots. Costs are linear
    in lots for every fee variant, so the budget-feasible put range per call count
    is closed-form and only floor/ceil of the neutral ratio and the budget edge
    need checking.
    """
    if capital <= 0:
        raise ValueError("capital must be > 0")
    kc, kp = strikes
    uc = bs_price(OptionQuote("call", price, kc, r, sigma, tau))
    up = bs_price(OptionQuote("put", price, kp, r, sigma, tau))
    dc = _delta("call", price, kc, r, sigma, tau)
    dp = _delta("put", price, kp, r, sigma, tau)
    per_c = uc * multiplier + fees.per_lot(kc, uc, multiplier)
    per_p = up * multiplier + fees.per_lot(kp, up, multiplier)
    budget = limit * capital
    if per_c + per_p > budget or per_c + per_p <= 0:
        raise CannotAfford(f"one lot per leg costs {per_c + per_p:.2f}, budget {budget:.2f}")
    nc_max = int(min(max_lots, _fit(budget - per_p, per_c, per_p, budget) if per_c > 0 else max_lots))
    nc = np.arange(1, nc_max + 1)
    if per_p > 0:
        np_max = np.minimum(max_lots, _fit(budget - nc * per_c, per_p, nc * per_c, budget))
    else:
        np_max = np.full(nc.shape, float(max_lots))
    if not (np_max >= 1).any():
        raise CannotAfford(f"no lot combination fits budget {budget:.2f}")
    ideal = nc * dc / -dp if dp != 0 else np_max.astype(float)
    cands = np.stack([np.floor(ideal), np.ceil(ideal), np_max])
    cands = np.clip(cands, 1, np_max)
    keep = np.ones_like(cands, dtype=bool)
    keep &= np_max >= 1
    nc_grid = np.broadcast_to(nc, cands.shape)
    net = np.abs(nc_grid * dc + cands * dp)
    premium = nc_grid * uc + cands * up
    net = np.where(keep, net, np.inf)
    best = net.min()
    tol = 1e-9 * max(abs(dc), abs(dp), 1e-12)
    ok = net <= best + tol
    prem = np.where(ok, premium, -np.inf)
    top = prem.max()
    ok &= prem >= top - 1e-9 * max(abs(top), 1.0)
    flat = np.flatnonzero(ok.T.ravel())[0]  # row-major over (nc, candidate): smallest nc first
    i_nc, i_c = divmod(int(flat), cands.shape[0])
    return int(nc[i_nc]), int(cands[i_c, i_nc])


def mark_to_market(position: StraddlePosition, spot: float, sigma: float, now: datetime,
                   r: float = DEFAULT_RATE) -> float:
    """Revalue both legs at (spot, sigma, now); updates leg marks and returns MarketValue."""
    tau = year_fraction(now, position.expiry) if now < position.expiry else 0.0
    total = 0.0
    for leg in position.legs:
        leg.mark_price = bs_price(OptionQuote(leg.kind, spot, leg.strike, r, sigma, tau))
        total += leg.lots * position.multiplier * leg.mark_price
    position.market_value = total
    return total


# --------------------------------------------------------------------------- reward


def compute_reward(prev_action: int, action: int, return_t: float, stop: float = -0.15,
                   a: float = 0.10, g: float = 0.05, deviation_from_open: float = 0.0) -> float:
    """Delayed reward with a stop line.

    Opening and waiting pay nothing. Holding pays nothing until the trade's log
    return falls to the stop, then pays the (negative) simple return. Closing at or
    below the stop pays ``a``; any other close pays the simple return, doubled for a
    profitable close when the underlying has moved more than ``g`` since opening.
    """
    if prev_action == 0:
        return 0.0
    if action == 1:
        return 0.0 if return_t > stop else math.expm1(return_t)
    if return_t <= stop:
        return a
    simple = math.expm1(return_t)
    if return_t > 0 and abs(deviation_from_open) > g:
        return 2.0 * simple
    return simple


# --------------------------------------------------------------------------- config/state


@dataclass(frozen=True)
class EnvConfig:
    window: int = 64  # d, steps per sequence
    lookback_days: int = 20
    hv_days: int = 5
    max_hold_days: int = 5
    stop: float = -0.15
    stop_close_reward: float = 0.10
    deviation: float = 0.05
    position_limit: float = 0.20
    initial_capital: float = 1_000_000.0
    rate: float = DEFAULT_RATE
    bars_per_day: int = 16
    bars_per_year: float = 3872.0
    periods: tuple[int, ...] = (30, 60, 1440)
    fee: FeeModel = field(default_factory=FeeModel)
    multiplier: float = 100.0
    rules: StraddleRules = field(default_factory=lambda: StraddleRules(50.0))
    resistance: ResistanceParams = field(default_factory=ResistanceParams)
    use_resistance: bool = True
    reward_mode: Literal["delayed", "direct"] = "delayed"
    episode_days: int = 30

    def __post_init__(self):
        if not self.stop < 0:
            raise ValueError("stop must be < 0")
        if not self.stop_close_reward > 0:
            raise ValueError("stop-close reward a must be > 0")
        if not self.deviation > 0:
            raise ValueError("deviation g must be > 0")
        if not 0 < self.position_limit <= 1:
            raise ValueError("position limit must lie in (0, 1]")
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.reward_mode not in ("delayed", "direct"):
            raise ValueError(f"unknown reward mode {self.reward_mode!r}")
        object.__setattr__(self, "periods", tuple(int(p) for p in self.periods))

    @classmethod
    def for_profile(cls, profile: MarketProfile, **kw) -> "EnvConfig":
        rules = StraddleRules(profile.strike_interval, expiry_rule=profile.expiry_rule)
        base = dict(fee=profile.fee, multiplier=profile.multiplier, rules=rules, rate=profile.rate,
                    bars_per_day=profile.bars_per_day, bars_per_year=profile.bars_per_year)
        base.update(kw)
        return cls(**base)

    @property
    def max_hold_bars(self) -> int:
        return self.max_hold_days * self.bars_per_day

    @property
    def n_seq_features(self) -> int:
        return len(SEQ_FEATURES)

    @property
    def n_obs_features(self) -> int:
        return len(OBS_FEATURES)


@dataclass(frozen=True)
class MarketState:
    seq: np.ndarray  # (f, d), base period
    obs: tuple[np.ndarray, ...]  # one (f_obs, d) per period
    res_flag: int
    hold_time: float  # bars held / max hold bars
    t: int = -1


def _zscore(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    if sd <= 1e-12 * max(abs(x.mean()), 1.0):
        return np.zeros_like(x)
    return (x - x.mean()) / sd


class MarketFeatures:
    """Per-bar quantities shared by every environment over one series.

    All arrays are causal: entry i uses bars with index <= i only.
    """

    def __init__(self, series: BarSeries, cfg: EnvConfig, calendar: TradingCalendar | None = None):
        self.series = series
        self.cfg = cfg
        cal = calendar or TradingCalendar(bars_per_day=cfg.bars_per_day)
        n_ret = cfg.hv_days * cfg.bars_per_day
        self.hv = rolling_hv_zero_mean(series.close, n_ret, cfg.bars_per_year)
        days_next = {}
        self.days_next = np.empty(len(series))
        for i, ts in enumerate(series.timestamps):
            day = ts.date()
            if day not in days_next:
                days_next[day] = days_to_next_trading_day(ts, cal)
            self.days_next[i] = days_next[day]
        if cfg.use_resistance:
            self.flags = flag_series(series, cfg.resistance, cfg.bars_per_day)
        else:
            self.flags = np.zeros(len(series), dtype=np.int8)
        self.period_series = []
        self.period_map = []
        self.period_hv = []
        self.period_days = []
        for p in cfg.periods:
            ps = resample(series, p, cfg.bars_per_day)
            base_idx = np.searchsorted(series.epoch, ps.epoch)  # each p-bar closes on a base bar
            self.period_series.append(ps)
            self.period_map.append(np.searchsorted(ps.epoch, series.epoch, side="right") - 1)
            self.period_hv.append(self.hv[base_idx] if len(ps) else np.empty(0))
            self.period_days.append(self.days_next[base_idx] if len(ps) else np.empty(0))
        self.first_valid = self._first_valid()

    def _first_valid(self) -> int:
        d = self.cfg.window
        n = len(self.series)
        ok = np.zeros(n, dtype=bool)
        ok[d - 1:] = True
        finite = np.isfinite(self.hv)
        # every hv in the base window must exist
        cnt = np.concatenate([[0], np.cumsum(~finite)])
        idx = np.arange(n)
        lo = np.maximum(idx - d + 1, 0)
        ok &= (cnt[idx + 1] - cnt[lo]) == 0
        for pmap, phv in zip(self.period_map, self.period_hv):
            j = pmap
            ok &= j >= d - 1
            if len(phv):
                pf = np.concatenate([[0], np.cumsum(~np.isfinite(phv))])
                jj = np.clip(j, d - 1, len(phv) - 1)
                ok &= (pf[jj + 1] - pf[jj - d + 1]) == 0
        valid = np.flatnonzero(ok)
        if not len(valid):
            raise ValueError("insufficient history: no bar has full windows at every period")
        return int(valid[0])

    def price_block(self, s: BarSeries, lo: int, hi: int) -> np.ndarray:
        ref = s.close[lo]
        return np.log(np.stack([s.open[lo:hi], s.high[lo:hi], s.low[lo:hi], s.close[lo:hi]]) / ref)

    def build(self, t: int, pnl: np.ndarray, hold_bars: int) -> MarketState:
        """State at base index ``t``; ``pnl`` holds the d floating log P&L values."""
        d = self.cfg.window
        if t < self.first_valid:
            raise ValueError(f"insufficient history at index {t} (first valid {self.first_valid})")
        s = self.series
        lo, hi = t - d + 1, t + 1
        seq = np.empty((len(SEQ_FEATURES), d))
        seq[0:4] = self.price_block(s, lo, hi)
        seq[4] = _zscore(s.volume[lo:hi])
        seq[5] = _zscore(s.value[lo:hi])
        seq[6] = pnl
        seq[7] = self.hv[lo:hi]
        seq[8] = self.days_next[lo:hi] / 3.0
        obs = []
        for ps, pmap, phv, pdays in zip(self.period_series, self.period_map, self.period_hv,
                                        self.period_days):
            j = int(pmap[t])
            plo, phi = j - d + 1, j + 1
            o = np.empty((len(OBS_FEATURES), d))
            o[0:4] = self.price_block(ps, plo, phi)
            o[4] = _zscore(ps.volume[plo:phi])
            o[5] = _zscore(ps.value[plo:phi])
            o[6] = phv[plo:phi]
            o[7] = pdays[plo:phi] / 3.0
            obs.append(o)
        return MarketState(seq, tuple(obs), int(self.flags[t]), hold_bars / self.cfg.max_hold_bars, t)


def build_state(t: int, data: MarketFeatures, position_pnl: Sequence[float] | None = None,
                hold_bars: int = 0) -> MarketState:
    """Functional form of :meth:`MarketFeatures.build`.

    ``position_pnl`` lists the floating log P&L per bar since the position opened
    (oldest first, ending at ``t``); None when flat.
    """
    d = data.cfg.window
    pnl = np.zeros(d)
    if position_pnl is not None and len(position_pnl):
        k = min(d, len(position_pnl))
        pnl[d - k:] = np.asarray(position_pnl, dtype=np.float64)[-k:]
    return data.build(t, pnl, hold_bars)


# --------------------------------------------------------------------------- environment


@dataclass(frozen=True)
class TradeRecord:
    open_time: datetime
    close_time: datetime
    K_call: float
    K_put: float
    call_lots: int
    put_lots: int
    cost: float
    fees: float
    proceeds: float
    log_return: float
    forced: bool
    open_index: int = -1
    close_index: int = -1


TRADE_LOG_HEADER = ("open_time", "close_time", "K_call", "K_put", "call_lots", "put_lots",
                    "cost", "fees", "proceeds", "log_return", "forced")


@dataclass(frozen=True)
class StepInfo:
    executed: tuple[int, int]  # (previous position, position after this bar)
    account_delta: float
    equity: float
    forced: bool = False
    trade: TradeRecord | None = None
    opened: bool = False


class StraddleEnv:
    """Single-straddle trading environment over one bar series.

    ``reset(start, end)`` positions the episode; each ``step(action)`` acts at the
    current bar's close and advances one bar. The episode is terminal on reaching
    ``end``, where any open position is force-closed.
    """

    def __init__(self, data: MarketFeatures, rng: np.random.Generator | None = None,
                 bounds: tuple[int, int] | None = None):
        self.data = data
        lo, hi = bounds if bounds is not None else (0, len(data.series) - 1)
        self.bounds = (max(lo, data.first_valid), min(hi, len(data.series) - 1))
        self.cfg = data.cfg
        self.rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
        self.t = -1
        self.end = -1
        self.cash = self.cfg.initial_capital
        self.position: StraddlePosition | None = None
        self.hold_bars = 0
        self.pnl_hist: list[float] = []
        self.trades: list[TradeRecord] = []
        self.fees_paid = 0.0

    # -- episode control
    def reset(self, start: int | None = None, end: int | None = None) -> MarketState:
        n = len(self.data.series)
        span = self.cfg.episode_days * self.cfg.bars_per_day
        if start is None:
            lo, hi = self.bounds
            last_start = hi - span
            if last_start <= lo:
                start = lo
            else:
                start = int(self.rng.integers(lo, last_start + 1))
            end = min(start + span, hi) if end is None else end
        if end is None:
            end = n - 1
        if start < self.data.first_valid:
            raise ValueError(f"insufficient history for start {start} (first valid {self.data.first_valid})")
        if not start < end < n:
            raise ValueError(f"bad episode bounds [{start}, {end}] for {n} bars")
        self.t, self.end = start, end
        self.cash = self.cfg.initial_capital
        self.position = None
        self.hold_bars = 0
        self.pnl_hist = []
        self.trades = []
        self.fees_paid = 0.0
        return self.state()

    def state(self) -> MarketState:
        return build_state(self.t, self.data, self.pnl_hist if self.position else None, self.hold_bars)

    @property
    def equity(self) -> float:
        return self.cash + (self.position.market_value if self.position else 0.0)

    # -- market access
    def _spot(self, t: int) -> float:
        return float(self.data.series.close[t])

    def _sigma(self, t: int) -> float:
        return float(self.data.hv[t])

    def _now(self, t: int) -> datetime:
        return self.data.series.timestamps[t]

    def _mark(self, t: int) -> float:
        return mark_to_market(self.position, self._spot(t), self._sigma(t), self._now(t), self.cfg.rate)

    # -- transitions
    def _open(self, t: int) -> StraddlePosition:
        cfg = self.cfg
        spot, sigma, now = self._spot(t), self._sigma(t), self._now(t)
        kc, kp = select_strikes(spot, cfg.rules)
        expiry = select_expiry(now, cfg.rules)
        tau = year_fraction(now, expiry)
        nc, n_p = size_delta_neutral(spot, (kc, kp), sigma, cfg.rate, tau, self.cash,
                                     cfg.position_limit, cfg.fee, cfg.multiplier)
        uc = bs_price(OptionQuote("call", spot, kc, cfg.rate, sigma, tau))
        up = bs_price(OptionQuote("put", spot, kp, cfg.rate, sigma, tau))
        pos = StraddlePosition(OptionLeg("call", kc, nc, uc, uc), OptionLeg("put", kp, n_p, up, up),
                               expiry, cfg.multiplier, 0.0, 0.0, now, t, spot)
        fee = open_fee(pos, cfg.fee)
        pos.open_fee = fee
        pos.cost = pos.premium + fee
        pos.market_value = pos.premium
        if not pos.cost > 0:
            raise CannotAfford("zero-cost straddle")
        return pos

    def _close(self, t: int, forced: bool) -> tuple[float, TradeRecord]:
        pos = self.position
        mv = self._mark(t)
        fee = close_fee(pos, self.cfg.fee)
        ret = math.log(mv / pos.cost) if mv > 0 else -math.inf
        delta = mv - fee
        self.cash += delta
        self.fees_paid += fee
        rec = TradeRecord(pos.open_time, self._now(t), pos.call.strike, pos.put.strike,
                          pos.call.lots, pos.put.lots, pos.cost, pos.open_fee + fee, mv, ret,
                          forced, pos.open_index, t)
        self.trades.append(rec)
        self.position = None
        self.hold_bars = 0
        self.pnl_hist = []
        return delta, rec

    def _close_reward(self, rec: TradeRecord, t: int) -> float:
        cfg = self.cfg
        dev = self._spot(t) / float(self.data.series.close[rec.open_index]) - 1.0
        ret = max(rec.log_return, -50.0)
        return compute_reward(1, 0, ret, cfg.stop, cfg.stop_close_reward, cfg.deviation, dev)

    def step(self, action: int) -> tuple[MarketState, float, bool, StepInfo]:
        if action not in (0, 1):
            raise ValueError(f"action must be 0 or 1, got {action!r}")
        if self.t < 0 or self.t >= self.end:
            raise RuntimeError("step() called on a finished episode; call reset()")
        cfg = self.cfg
        t = self.t
        prev = 1 if self.position else 0
        equity_before = self.equity
        reward = 0.0
        delta = 0.0
        forced = False
        trade = None
        opened = False

        if prev == 0 and action == 1:
            try:
                pos = self._open(t)
            except CannotAfford as exc:
                logger.info("open at bar %d skipped: %s", t, exc)
            else:
                self.position = pos
                self.cash -= pos.cost
                self.fees_paid += pos.open_fee
                delta = -pos.cost
                self.pnl_hist = [math.log(pos.market_value / pos.cost) if pos.market_value > 0 else -50.0]
                opened = True
        elif prev == 1 and action == 0:
            delta, trade = self._close(t, forced=False)
            reward = self._close_reward(trade, t)
        elif prev == 1 and action == 1:
            expiring = self._now(t + 1) >= self.position.expiry
            if self.hold_bars >= cfg.max_hold_bars or expiring:
                delta, trade = self._close(t, forced=True)
                reward = self._close_reward(trade, t)
                forced = True

        # advance one bar
        self.t = t + 1
        if self.position is not None:
            self.hold_bars += 1
            mv = self._mark(self.t)
            ret = math.log(mv / self.position.cost) if mv > 0 else -50.0
            self.pnl_hist.append(ret)
            if prev == 1 and action == 1:
                reward = compute_reward(1, 1, ret, cfg.stop, cfg.stop_close_reward, cfg.deviation)
        terminal = self.t >= self.end
        if terminal and self.position is not None:
            d2, trade = self._close(self.t, forced=True)
            delta += d2
            reward = self._close_reward(trade, self.t)
            forced = True
        if cfg.reward_mode == "direct":
            reward = (self.equity - equity_before) / cfg.initial_capital
        info = StepInfo((prev, 1 if self.position is not None else 0), delta, self.equity, forced,
                        trade, opened)
        return self.state(), reward, terminal, info
