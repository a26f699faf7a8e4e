"""Historical volatility and Black-Scholes valuation."""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Literal, Sequence

import numpy as np

OptionKind = Literal["call", "put"]
DEFAULT_RATE = 0.02
DAY_COUNT = 360.0


@dataclass(frozen=True)
class VolEstimate:
    value: float  # annualized
    F: float
    N: int  # number of log returns used
    window_days: float | None = None

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class OptionQuote:
    kind: OptionKind
    S: float
    K: float
    r: float
    sigma: float
    tau: float  # years to expiry

    def __post_init__(self):
        if self.kind not in ("call", "put"):
            raise ValueError(f"kind must be 'call' or 'put', got {self.kind!r}")
        if not (self.S > 0 and self.K > 0):
            raise ValueError("S and K must be > 0")
        if self.sigma < 0 or self.tau < 0:
            raise ValueError("sigma and tau must be >= 0")


def log_returns(closes: Sequence[float]) -> np.ndarray:
    c = np.asarray(closes, dtype=np.float64)
    if c.ndim != 1 or len(c) < 2:
        raise ValueError("need at least 2 closes")
    if np.any(~(c > 0)):
        raise ValueError("closes must be positive")
    return np.log(c[1:] / c[:-1])


def hv_zero_mean(closes: Sequence[float], F: float, window_days: float | None = None) -> VolEstimate:
    """Annualized volatility assuming zero mean return.

    ``sqrt(F / (N - 1) * sum(ln(c_i / c_{i-1})**2))`` with N the number of returns.
    """
    r = log_returns(closes)
    N = len(r)
    if N < 2:
        raise ValueError("need at least 3 closes (2 returns)")
    return VolEstimate(math.sqrt(F / (N - 1) * float(np.dot(r, r))), F, N, window_days)


def hv_sample_std(closes: Sequence[float], F: float, window_days: float | None = None) -> VolEstimate:
    """Annualized sample standard deviation of log returns (mean removed)."""
    r = log_returns(closes)
    N = len(r)
    if N < 2:
        raise ValueError("need at least 3 closes (2 returns)")
    dev = r - r.mean()
    return VolEstimate(math.sqrt(F / (N - 1) * float(np.dot(dev, dev))), F, N, window_days)


def rolling_hv_zero_mean(closes: np.ndarray, n_returns: int, F: float) -> np.ndarray:
    """hv_zero_mean over the trailing ``n_returns`` log returns ending at each index.

    Entries without enough history are NaN.
    """
    c = np.asarray(closes, dtype=np.float64)
    out = np.full(len(c), np.nan)
    if n_returns < 2 or len(c) <= n_returns:
        return out
    r2 = np.concatenate([[0.0], np.log(c[1:] / c[:-1]) ** 2])
    csum = np.cumsum(r2)
    idx = np.arange(n_returns, len(c))
    ss = csum[idx] - csum[idx - n_returns]
    out[idx] = np.sqrt(F / (n_returns - 1) * np.maximum(ss, 0.0))
    return out


_SQRT1_2 = 1.0 / math.sqrt(2.0)


def norm_cdf(d: float) -> float:
    """Standard normal CDF via the complementary error function.

    ``math.erfc`` keeps relative precision in both tails, so the absolute error is
    far below 1e-9 and N(d) + N(-d) == 1 to rounding.
    """
    if math.isnan(d):
        raise ValueError("norm_cdf of NaN")
    return 0.5 * math.erfc(-d * _SQRT1_2)


def _d1_d2(q: OptionQuote) -> tuple[float, float]:
    vs = q.sigma * math.sqrt(q.tau)
    d1 = (math.log(q.S / q.K) + (q.r + 0.5 * q.sigma * q.sigma) * q.tau) / vs
    return d1, d1 - vs


def bs_price(q: OptionQuote) -> float:
    disc_k = q.K * math.exp(-q.r * q.tau)
    if q.tau == 0.0 or q.sigma == 0.0:
        if q.kind == "call":
            return max(q.S - disc_k, 0.0)
        return max(disc_k - q.S, 0.0)
    d1, d2 = _d1_d2(q)
    if q.kind == "call":
        return q.S * norm_cdf(d1) - disc_k * norm_cdf(d2)
    return -q.S * norm_cdf(-d1) + disc_k * norm_cdf(-d2)


def bs_delta(q: OptionQuote) -> float:
    if q.tau <= 0.0 or q.sigma <= 0.0:
        raise ValueError("delta undefined at expiry or zero volatility")
    d1, _ = _d1_d2(q)
    if q.kind == "call":
        return norm_cdf(d1)
    return norm_cdf(d1) - 1.0


def year_fraction(now: datetime, expiry: datetime) -> float:
    """Remaining calendar days (fractional) over a 360-day year."""
    secs = (expiry - now).total_seconds()
    if secs < 0:
        raise ValueError(f"expiry {expiry.isoformat()} is before {now.isoformat()}")
    return secs / 86400.0 / DAY_COUNT
