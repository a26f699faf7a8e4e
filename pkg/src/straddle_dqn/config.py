"""Run configuration: a TOML file with nested sections, overridden by CLI flags."""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, fields, replace
from datetime import date
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .ddqn import TrainConfig
from .env import PROFILES, EnvConfig, FeeModel, MarketProfile, StraddleRules
from .marketdata import SyntheticSpec, TradingCalendar
from .qnet import NetConfig
from .resistance import ResistanceParams


class ConfigError(ValueError):
    """Invalid or unknown configuration (CLI exit code 2)."""


def _field_names(cls, exclude=()) -> set[str]:
    return {f.name for f in fields(cls)} - set(exclude)


SCHEMA: dict[str, Any] = {
    "seed": None,
    "out": None,
    "market": {
        "profile": None, "strike_interval": None, "multiplier": None, "rate": None,
        "bars_per_day": None, "trading_days_per_year": None, "expiry_rule": None,
        "min_days_to_roll": None, "holidays_file": None,
        "fee": {k: None for k in _field_names(FeeModel)},
    },
    "data": {"path": None, "period": None, "train_fraction": None},
    "synthetic": {"regimes": None, "transition": None, "n_bars": None, "initial_price": None,
                  "start": None},
    "env": {k: None for k in _field_names(
        EnvConfig, ("fee", "multiplier", "rules", "resistance", "rate", "bars_per_day", "bars_per_year"))},
    "resistance": {k: None for k in _field_names(ResistanceParams)},
    "network": {k: None for k in _field_names(NetConfig, ("f_seq", "f_obs", "d", "n_periods"))},
    "train": {k: None for k in _field_names(TrainConfig, ("seed",))},
    "backtest": {"policies": None, "checkpoint": None, "ma_fast": None, "ma_slow": None,
                 "random_q": None, "random_hold_bars": None},
}


def _check_keys(d: dict, schema: dict, where: str = "") -> None:
    for k, v in d.items():
        path = f"{where}.{k}" if where else k
        if k not in schema:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(schema[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"'{path}' must be a section")
            _check_keys(v, schema[k], path)
        elif isinstance(v, dict):
            raise ConfigError(f"'{path}' is a value, not a section")


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value``; the value is read as a TOML literal, falling back to a string."""
    if "=" not in text:
        raise ConfigError(f"override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key, value


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> "RunConfig":
        raw: dict = {}
        base = Path.cwd()
        if path is not None:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            try:
                raw = tomllib.loads(p.read_text(encoding="utf-8"))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{p}: {exc}") from None
            base = p.parent
        raw = copy.deepcopy(raw)
        for key, value in (overrides or {}).items():
            if value is not None:
                _set_path(raw, key, value)
        _check_keys(raw, SCHEMA)
        return cls(raw, base)

    def get(self, dotted: str, default=None):
        d = self.raw
        for k in dotted.split("."):
            if not isinstance(d, dict) or k not in d:
                return default
            d = d[k]
        return d

    def section(self, name: str) -> dict:
        return dict(self.raw.get(name, {}))

    # -- validation helpers
    @property
    def seed(self) -> int:
        seed = self.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        if not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed!r}")
        return seed

    def resolve_path(self, value: str | None) -> Path | None:
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else (self.base_dir / p)

    def data_path(self, must_exist: bool = True) -> Path | None:
        p = self.resolve_path(self.get("data.path"))
        if p is not None and must_exist and not p.is_file():
            raise FileNotFoundError(f"data file not found: {p}")
        return p

    # -- builders
    def market(self) -> MarketProfile:
        m = self.section("market")
        name = m.pop("profile", None) or "index"
        if name not in PROFILES:
            raise ConfigError(f"unknown market profile {name!r}; choose from {sorted(PROFILES)}")
        prof = PROFILES[name]
        fee_kw = m.pop("fee", {})
        m.pop("holidays_file", None)
        m.pop("min_days_to_roll", None)
        try:
            fee = replace(prof.fee, **fee_kw) if fee_kw else prof.fee
            return replace(prof, fee=fee, **{k: v for k, v in m.items() if v is not None})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"market: {exc}") from None

    def calendar(self) -> TradingCalendar:
        prof = self.market()
        hol = self.resolve_path(self.get("market.holidays_file"))
        if hol is not None:
            if not hol.is_file():
                raise FileNotFoundError(f"holiday file not found: {hol}")
            return TradingCalendar.from_holiday_file(hol, bars_per_day=prof.bars_per_day)
        return TradingCalendar(bars_per_day=prof.bars_per_day)

    def resistance(self) -> ResistanceParams:
        try:
            return ResistanceParams(**self.section("resistance"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"resistance: {exc}") from None

    def env(self) -> EnvConfig:
        prof = self.market()
        kw = self.section("env")
        if "periods" in kw:
            kw["periods"] = tuple(kw["periods"])
        rules = StraddleRules(prof.strike_interval,
                              min_days_to_roll=self.get("market.min_days_to_roll", 15.0),
                              expiry_rule=prof.expiry_rule)
        try:
            return EnvConfig.for_profile(prof, rules=rules, resistance=self.resistance(), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"env: {exc}") from None

    def network(self, env: EnvConfig | None = None) -> NetConfig:
        env = env or self.env()
        try:
            return NetConfig(f_seq=env.n_seq_features, f_obs=env.n_obs_features, d=env.window,
                             n_periods=len(env.periods), **self.section("network"))
        except (TypeError, ValueError, NotImplementedError) as exc:
            raise ConfigError(f"network: {exc}") from None

    def train(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, **self.section("train"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"train: {exc}") from None

    def synthetic(self) -> SyntheticSpec:
        s = self.section("synthetic")
        prof = self.market()
        kw: dict[str, Any] = dict(seed=self.seed, period=self.get("data.period", 15),
                                  bars_per_year=prof.bars_per_year, calendar=self.calendar())
        if "regimes" in s:
            kw["regimes"] = tuple(tuple(r) for r in s["regimes"])
        if "transition" in s:
            kw["transition"] = tuple(tuple(r) for r in s["transition"])
        for k in ("n_bars", "initial_price"):
            if k in s:
                kw[k] = s[k]
        if "start" in s:
            st = s["start"]
            kw["start"] = st if isinstance(st, date) else date.fromisoformat(str(st))
        try:
            return SyntheticSpec(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"synthetic: {exc}") from None

    @property
    def train_fraction(self) -> float:
        f = self.get("data.train_fraction", 0.7)
        if not 0 < f < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        return float(f)
