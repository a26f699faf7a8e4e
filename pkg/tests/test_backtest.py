import math
from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import series_from_closes, small_env_config
from oracles import mdd_loop, sma_table
from straddle_dqn.backtest import (ETF_FEE, SHARPE_CAP, AlwaysLongPolicy, DualMAPolicy, EquityCurve,
                                   GreedyQPolicy, PolicyRun, RandomStraddlePolicy, avgr, dual_ma_policy,
                                   dual_ma_signals, emit_report, max_drawdown_log, run_dual_ma, run_policy,
                                   sharpe)
from straddle_dqn.env import MarketFeatures
from straddle_dqn.qnet import NetConfig, init_params

F = 3872.0


def curve(values, bars_per_year=F):
    t0 = datetime(2022, 1, 3, 9, 45)
    return EquityCurve([t0 + timedelta(minutes=15 * i) for i in range(len(values))], values, bars_per_year)


def _net_for(data, seed=0):
    cfg = data.cfg
    net = NetConfig(f_seq=cfg.n_seq_features, f_obs=cfg.n_obs_features, d=cfg.window, n=8, heads=2,
                    layers=1, n_periods=len(cfg.periods))
    return init_params(net, np.random.default_rng(seed))


# --------------------------------------------------------------------------- curve


def test_equity_curve_validation():
    with pytest.raises(ValueError):
        curve([1.0, 0.0])
    with pytest.raises(ValueError):
        curve([1.0, math.nan])
    t = datetime(2022, 1, 3)
    with pytest.raises(ValueError):
        EquityCurve([t, t], [1.0, 1.0])


# --------------------------------------------------------------------------- metrics


def test_mdd_examples():
    assert abs(max_drawdown_log(curve([1, 0.8, 1.2])) - math.log(0.8)) <= 1e-12
    assert abs(max_drawdown_log(curve([1, 1.2, 0.9])) - math.log(0.9 / 1.2)) <= 1e-12
    assert max_drawdown_log(curve([1.0])) == 0.0


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=50))
def test_mdd_of_monotone_is_zero(xs):
    assert max_drawdown_log(curve(sorted(xs))) == 0.0


@given(st.lists(st.floats(0.01, 100), min_size=1, max_size=50), st.sampled_from([0.5, 2.0, 8.0]))
def test_mdd_matches_loop_and_is_scale_invariant(xs, c):
    m = max_drawdown_log(curve(xs))
    assert m <= 0
    assert m == pytest.approx(mdd_loop(xs), abs=1e-12)
    assert max_drawdown_log(curve([x * c for x in xs])) == pytest.approx(m, abs=1e-12)


def test_avgr_examples():
    n = int(F)
    ramp = np.exp(np.linspace(0, math.log(2), n + 1))
    assert abs(avgr(curve(ramp)) - math.log(2)) <= 1e-12
    assert abs(avgr(curve(1 / ramp)) + math.log(2)) <= 1e-12
    assert avgr(curve(np.full(10, 3.0))) == 0.0
    assert abs(avgr(curve([1.0, 2.0])) - math.log(2) * F) <= 1e-12 * F


@settings(max_examples=30)
@given(st.lists(st.floats(0.5, 2.0), min_size=3, max_size=40), st.data())
def test_avgr_concatenation_is_time_weighted(xs, data):
    k = data.draw(st.integers(1, len(xs) - 2))
    c = curve(xs)
    a, b = c[:k + 1], c[k:]
    n = len(xs) - 1
    combined = (avgr(a) * k + avgr(b) * (n - k)) / n
    assert avgr(c) == pytest.approx(combined, rel=1e-12, abs=1e-9)


def test_sharpe_examples():
    assert sharpe(curve(np.full(20, 5.0))) == 0.0
    assert sharpe(curve(np.exp(0.001 * np.arange(50)))) == SHARPE_CAP
    assert sharpe(curve(np.exp(-0.001 * np.arange(50)))) == -SHARPE_CAP
    steps = np.tile([0.01, -0.01], 25)
    alt = np.exp(np.concatenate([[0.0], np.cumsum(steps)]))
    assert abs(sharpe(curve(alt))) <= 1e-12


def test_sharpe_direct_formula():
    rng = np.random.default_rng(0)
    v = np.exp(np.cumsum(rng.normal(0.0005, 0.01, 300)))
    r = np.diff(np.log(v))
    expected = r.mean() * F / (r.std(ddof=1) * math.sqrt(F))
    assert sharpe(curve(v)) == pytest.approx(expected, rel=1e-12)


# --------------------------------------------------------------------------- baselines


def test_dual_ma_signals_match_table():
    rng = np.random.default_rng(4)
    closes = list(100 + np.cumsum(rng.normal(0, 1.5, 30)))
    table = sma_table(closes, 5, 20)
    sig = dual_ma_signals(closes, 5, 20)
    assert [max(x, 0) for x in table] == list(sig)
    assert len(set(table[19:])) == 2  # the sample actually crosses


def test_dual_ma_requires_fast_below_slow():
    with pytest.raises(ValueError):
        dual_ma_policy(20, 20)
    with pytest.raises(ValueError):
        DualMAPolicy(30, 20)


def _daily_blocks(daily_closes, bars_per_day=16):
    return series_from_closes(np.repeat(daily_closes, bars_per_day))


def test_dual_ma_trades_at_next_open_after_cross():
    daily = np.concatenate([np.linspace(120, 100, 15), np.linspace(101, 115, 15)])
    s = _daily_blocks(daily)
    run = run_dual_ma(DualMAPolicy(5, 20), s, 0, len(s) - 1, 1e6, 16, F)
    table = sma_table(list(daily), 5, 20)
    # day k closes on base bar 16k + 15; its signal executes at the following bar
    expected = [16 * k + 16 for k in range(1, 30) if table[k] == 1 and table[k - 1] != 1 and 16 * k + 16 < len(s)]
    assert expected and run.opens == expected


def test_dual_ma_monotone_one_entry_never_exits():
    s = _daily_blocks(np.linspace(100, 140, 40))
    run = run_dual_ma(DualMAPolicy(5, 20), s, 0, len(s) - 1, 1e6, 16, F)
    assert run.opens == [16 * 19 + 16]
    held = run.curve.values[run.opens[0]:]
    ratio = held / s.close[run.opens[0]:]
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-12)
    assert run.fees == pytest.approx(1e6 * ETF_FEE)


def test_dual_ma_insufficient_history():
    s = _daily_blocks(np.linspace(100, 110, 10))
    with pytest.raises(ValueError, match="insufficient"):
        run_dual_ma(DualMAPolicy(5, 20), s, 0, len(s) - 1, 1e6, 16, F)


def test_long_baseline_ratio(small_features):
    run = run_policy(AlwaysLongPolicy(), small_features)
    start = small_features.first_valid
    c = small_features.series.close[start:]
    np.testing.assert_allclose(run.curve.values / run.curve.values[0], c / c[0], rtol=1e-12)
    cap = small_features.cfg.initial_capital
    assert run.curve.values[0] == pytest.approx(cap * (1 - ETF_FEE), rel=1e-15)


# --------------------------------------------------------------------------- straddle policies


def test_zero_vol_equity_moves_only_by_fees():
    data = MarketFeatures(series_from_closes(np.full(1500, 103.0)), small_env_config(rate=0.0))
    P = _net_for(data)
    P.tensors["head_b"][...] = (0.0, 1.0)  # an untrained net that always wants to hold
    run = run_policy(GreedyQPolicy(P), data)
    assert run.trades
    cap = data.cfg.initial_capital
    assert run.curve.values[-1] == pytest.approx(cap - run.fees, rel=1e-12)
    mult = data.cfg.multiplier
    for tr in run.trades:
        intrinsic = mult * (tr.call_lots * max(103.0 - tr.K_call, 0) + tr.put_lots * max(tr.K_put - 103.0, 0))
        assert tr.proceeds == pytest.approx(intrinsic, rel=1e-12)


def test_greedy_ties_choose_wait(small_features):
    P = _net_for(small_features)
    P.tensors["head_w"][...] = 0.0
    P.tensors["head_b"][...] = (0.3, 0.3)
    run = run_policy(GreedyQPolicy(P), small_features)
    assert run.trades == [] and run.fees == 0.0
    assert np.all(run.curve.values == small_features.cfg.initial_capital)


def test_runs_are_deterministic(small_features):
    a = run_policy(RandomStraddlePolicy(0.05, 16, seed=2), small_features)
    b = run_policy(RandomStraddlePolicy(0.05, 16, seed=2), small_features)
    assert np.array_equal(a.curve.values, b.curve.values) and a.trades == b.trades
    assert len(a.trades) > 0
    P = _net_for(small_features, 3)
    g1 = run_policy(GreedyQPolicy(P), small_features)
    g2 = run_policy(GreedyQPolicy(P), small_features)
    assert np.array_equal(g1.curve.values, g2.curve.values)


def test_random_policy_holds_fixed_bars(small_features):
    run = run_policy(RandomStraddlePolicy(0.05, 10, seed=4), small_features)
    for tr in run.trades:
        if not tr.forced:
            assert tr.close_index - tr.open_index == 10


def test_run_policy_range_errors(small_features):
    with pytest.raises(ValueError, match="insufficient"):
        run_policy(AlwaysLongPolicy(), small_features, 0, 100)
    with pytest.raises(ValueError):
        run_policy(AlwaysLongPolicy(), small_features, 500, 400)


@pytest.mark.parametrize("make", [lambda d: AlwaysLongPolicy(), lambda d: DualMAPolicy(2, 4),
                                  lambda d: RandomStraddlePolicy(0.05, 8, seed=1),
                                  lambda d: GreedyQPolicy(_net_for(d, 7))])
def test_metrics_ignore_bars_after_range(make, synth_series):
    data = MarketFeatures(synth_series, small_env_config())
    start, t = data.first_valid, data.first_valid + 700
    base = run_policy(make(data), data, start, t)
    closes = synth_series.close.copy()
    closes[t + 1:] *= np.random.default_rng(0).uniform(0.5, 2.0, len(closes) - t - 1)
    s2 = type(synth_series)(synth_series.period, synth_series.timestamps, synth_series.open,
                            np.maximum(synth_series.high, closes), np.minimum(synth_series.low, closes),
                            closes, synth_series.volume, synth_series.value)
    other = run_policy(make(data), MarketFeatures(s2, small_env_config()), start, t)
    assert np.array_equal(base.curve.values, other.curve.values)
    assert base.metrics() == other.metrics()


# --------------------------------------------------------------------------- reports


def _two_runs(small_features):
    return [run_policy(AlwaysLongPolicy(), small_features),
            run_policy(RandomStraddlePolicy(0.05, 16, seed=2), small_features)]


def test_emit_report_files(small_features, tmp_path):
    runs = _two_runs(small_features)
    reports = emit_report(runs, tmp_path / "r")
    rows = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "policy,avgr,sharpe,mdd,trades,fees"
    assert len(rows) == 3 and rows[1].startswith("long,") and rows[2].startswith("random,")
    svg = (tmp_path / "r" / "equity.svg").read_text()
    assert svg.count("<polyline") == 2
    for name in ("long", "random"):
        lines = (tmp_path / "r" / f"equity_{name}.csv").read_text().splitlines()
        assert lines[0] == "timestamp,equity" and len(lines) == len(runs[0].curve) + 1
    assert (tmp_path / "r" / "trades_random.csv").exists()
    for m in reports.values():
        assert m.mdd <= 0 and all(math.isfinite(x) for x in (m.avgr, m.sharpe, m.mdd, m.fees))


def test_emit_report_byte_identical(small_features, tmp_path):
    emit_report(_two_runs(small_features), tmp_path / "a")
    emit_report(_two_runs(small_features), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


def test_emit_report_unwritable(small_features, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([run_policy(AlwaysLongPolicy(), small_features)], blocker / "sub")


def test_policy_run_trade_count(small_features):
    run = run_policy(AlwaysLongPolicy(), small_features)
    assert isinstance(run, PolicyRun) and run.n_trades == 1
