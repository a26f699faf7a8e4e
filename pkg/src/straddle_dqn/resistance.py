"""Swing-based resistance/support detection and the resistance-area flag."""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Literal, Sequence

import numpy as np

from .marketdata import BarSeries


@dataclass(frozen=True)
class SwingPoint:
    price: float
    time: datetime
    kind: Literal["resistance", "support"]
    index: int = -1


@dataclass(frozen=True)
class ResistanceParams:
    d: int = 16
    f_pct: float = 0.01  # reversal range
    e_pct: float = 0.005  # breakthrough range
    area_pct: float = 0.003
    merge_pct: float = 0.005
    lookback_days: int = 20

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if min(self.f_pct, self.e_pct, self.area_pct, self.merge_pct) < 0:
            raise ValueError("range fractions must be >= 0")


def detect_swings(series: BarSeries, p: ResistanceParams) -> tuple[list[SwingPoint], list[SwingPoint]]:
    """Return (resistance points, support points), both seeded with bar 0.

    Momentum ``M_t = close_t - close_{t-d}``; a sign flip marks a candidate, which
    is admitted against the last recorded resistance/support close. The support
    test uses ``<`` and the resistance test ``>``, as in the original rules.
    """
    n = len(series)
    if n < p.d + 1:
        raise ValueError(f"series of length {n} too short for window d={p.d}")
    close = series.close
    ts = series.timestamps
    res = [SwingPoint(float(close[0]), ts[0], "resistance", 0)]
    sup = [SwingPoint(float(close[0]), ts[0], "support", 0)]
    m_prev = None
    for t in range(p.d, n):
        m = close[t] - close[t - p.d]
        if m_prev is not None and m * m_prev < 0:
            c = float(close[t])
            if m > 0:
                if c / res[-1].price - 1 < p.f_pct or c / sup[-1].price - 1 < p.e_pct:
                    sup.append(SwingPoint(c, ts[t], "support", t))
            if m < 0:
                if c / sup[-1].price - 1 > p.f_pct or c / res[-1].price - 1 > p.e_pct:
                    res.append(SwingPoint(c, ts[t], "resistance", t))
        m_prev = m
    return res, sup


def cluster_levels(points: Sequence[float | SwingPoint], merge_pct: float) -> list[float]:
    """Merge price-sorted points whose consecutive relative gap is <= merge_pct.

    Each cluster becomes one level at its mean price.
    """
    if merge_pct < 0:
        raise ValueError("merge_pct must be >= 0")
    prices = sorted(float(getattr(x, "price", x)) for x in points)
    if not prices:
        return []
    levels = []
    cluster = [prices[0]]
    for price in prices[1:]:
        if price / cluster[-1] - 1 <= merge_pct:
            cluster.append(price)
        else:
            levels.append(sum(cluster) / len(cluster))
            cluster = [price]
    levels.append(sum(cluster) / len(cluster))
    return levels


def resistance_flag(price: float, levels: Sequence[float], area_pct: float) -> int:
    for level in levels:
        if abs(price / level - 1) <= area_pct:
            return 1
    return 0


def flag_series(series: BarSeries, p: ResistanceParams, bars_per_day: int) -> np.ndarray:
    """ResFlag for every bar using only swings in the trailing lookback horizon.

    Swing admission at bar t depends only on closes up to t, so detecting once on
    the full series and filtering by index is equivalent to re-running on each
    prefix.
    """
    n = len(series)
    flags = np.zeros(n, dtype=np.int8)
    if n < p.d + 1:
        return flags
    res, sup = detect_swings(series, p)
    pts = sorted(res + sup, key=lambda s: s.index)
    idx = np.array([s.index for s in pts])
    prices = np.array([s.price for s in pts])
    horizon = p.lookback_days * bars_per_day
    cache: dict[tuple[int, int], list[float]] = {}
    for t in range(n):
        lo = int(np.searchsorted(idx, t - horizon, side="right"))
        hi = int(np.searchsorted(idx, t, side="right"))
        key = (lo, hi)
        levels = cache.get(key)
        if levels is None:
            levels = cluster_levels(prices[lo:hi], p.merge_pct)
            cache = {key: levels}
        flags[t] = resistance_flag(float(series.close[t]), levels, p.area_pct)
    return flags
