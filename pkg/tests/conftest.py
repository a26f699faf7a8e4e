from __future__ import annotations

from datetime import date

import numpy as np
import pytest

from straddle_dqn.env import EnvConfig, MarketFeatures
from straddle_dqn.marketdata import BarSeries, SyntheticSpec, TradingCalendar, generate_synthetic


def series_from_closes(closes, period: int = 15, start: date = date(2021, 1, 4),
                       calendar: TradingCalendar | None = None) -> BarSeries:
    """Bars on the trading grid whose open is the previous close."""
    cal = calendar or TradingCalendar()
    closes = np.asarray(closes, dtype=np.float64)
    n = len(closes)
    stamps = []
    for day in cal.trading_days(start):
        stamps.extend(cal.bar_closes(day, period))
        if len(stamps) >= n:
            break
    opens = np.concatenate([[closes[0]], closes[:-1]])
    high = np.maximum(opens, closes) * 1.001
    low = np.minimum(opens, closes) * 0.999
    vol = np.full(n, 1000.0)
    return BarSeries(period, stamps[:n], opens, high, low, closes, vol, vol * closes)


def random_walk(n: int, seed: int = 0, sigma: float = 0.004, p0: float = 100.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return p0 * np.exp(np.cumsum(rng.normal(0.0, sigma, n)))


def small_env_config(**kw) -> EnvConfig:
    base = dict(window=8, periods=(30, 60), lookback_days=5, hv_days=2, episode_days=5)
    base.update(kw)
    return EnvConfig(**base)


@pytest.fixture(scope="session")
def synth_series() -> BarSeries:
    spec = SyntheticSpec(regimes=((0.2, 0.0), (0.6, 0.0)), transition=((0.99, 0.01), (0.02, 0.98)),
                         seed=11, n_bars=3000)
    return generate_synthetic(spec)


@pytest.fixture(scope="session")
def small_features(synth_series) -> MarketFeatures:
    return MarketFeatures(synth_series, small_env_config())


# --------------------------------------------------------------------------- acceptance reporting

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    n, title = mark.args
    if hasattr(rep, "wasxfail"):
        status = "XPASS" if rep.passed else "XFAIL (known failure, thresholds unchanged)"
    else:
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    if _criteria.get(n, ("", "PASS"))[1] == "PASS" or status == "FAIL":
        _criteria[n] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, status = _criteria[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {title}")
