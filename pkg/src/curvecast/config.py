"""Declarative run configuration (YAML) with dotted-key overrides."""
from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import yaml

from .market_data import SyntheticMarketConfig
from .walkforward import BacktestSettings, ModelSettings, SweepSettings, derive_seed


class ConfigError(ValueError):
    pass


def _synthetic_defaults() -> dict:
    d = asdict(SyntheticMarketConfig())
    d.pop("seed")  # derived from the master seed
    return d


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output": "curvecast-out",
    "data": {
        "source": "synthetic",
        "synthetic": _synthetic_defaults(),
        "files": {
            "glob": None,
            "schema": {},
            "delimiter": ",",
            "contract_ids": None,
            "day_offset_hours": 0.0,
        },
    },
    "sampling": {"cutoff": 0.1, "window": 100, "ddof": 0},
    "model": asdict(ModelSettings()),
    "backtest": asdict(BacktestSettings()),
    "sweeps": asdict(SweepSettings()),
    "walk_forward": {"validation_months": [7, 8, 9, 10, 11]},
}



def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


DEFAULTS = _plain(DEFAULTS)


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("schema", "contract_ids"):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(default, value, where):
    # YAML reads "1e-8" as a string; numbers follow the type of their default
    if isinstance(value, str) and (default is None or isinstance(default, (int, float))) \
            and not isinstance(default, bool):
        try:
            num = float(value)
        except ValueError:
            if default is None:
                return value
            raise ConfigError(f"config key {where!r} expects a number, got {value!r}") from None
        return int(num) if isinstance(default, int) and num.is_integer() else num
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value of {key!r}: {exc}") from None
    return key.strip().split("."), value


def _nest(keys: list[str], value) -> dict:
    out: Any = value
    for k in reversed(keys):
        out = {k: out}
    return out


class RunConfig:
    """Validated configuration; ``tree`` is the plain nested dict that gets written to manifests."""

    def __init__(self, tree: dict | None = None):
        self.tree = _merge(DEFAULTS, tree or {})
        self._validate()

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None, output=None) -> "RunConfig":
        tree: dict = {}
        if path is not None:
            try:
                with open(path, encoding="utf-8") as fh:
                    tree = yaml.safe_load(fh) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from None
            if not isinstance(tree, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
            if "artifacts" in tree and isinstance(tree.get("config"), dict):
                # a run manifest: replay the configuration it recorded
                tree = tree["config"]
        merged = _merge(DEFAULTS, tree)
        for item in overrides:
            keys, value = _parse_override(item)
            merged = _merge(merged, _nest(keys, value))
        if seed is not None:
            merged["seed"] = int(seed)
        if output is not None:
            merged["output"] = str(output)
        return cls(merged)

    def _validate(self):
        t = self.tree
        if not isinstance(t["seed"], int) or not 0 <= t["seed"] < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if t["data"]["source"] not in ("synthetic", "files"):
            raise ConfigError("data.source must be 'synthetic' or 'files'")
        if t["data"]["source"] == "files" and not t["data"]["files"]["glob"]:
            raise ConfigError("data.files.glob is required when data.source is 'files'")
        s = t["sampling"]
        if not s["cutoff"] > 0:
            raise ConfigError("sampling.cutoff must be positive")
        if int(s["window"]) < 2:
            raise ConfigError("sampling.window must be at least 2")
        if s["ddof"] not in (0, 1):
            raise ConfigError("sampling.ddof must be 0 (population) or 1 (sample)")
        try:
            self.synthetic()
            self.model()
            self.backtest().spec("AlEp")
            self.sweeps()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        vm = t["walk_forward"]["validation_months"]
        if not vm or any(int(m) < 2 for m in vm):
            raise ConfigError("walk_forward.validation_months must be a non-empty list of months >= 2")

    # typed views -----------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.tree["seed"])

    @property
    def output(self) -> Path:
        return Path(self.tree["output"])

    def seeds(self) -> dict[str, int]:
        names = ["synthetic"] + [f"train.M{m}" for m in self.validation_months] \
            + [f"mc.M{m}" for m in self.validation_months]
        return {n: derive_seed(self.seed, n) for n in names}

    def synthetic(self) -> SyntheticMarketConfig:
        return SyntheticMarketConfig(seed=derive_seed(self.seed, "synthetic"), **self.tree["data"]["synthetic"])

    def model(self) -> ModelSettings:
        m = dict(self.tree["model"])
        m["common_layers"] = tuple(m["common_layers"])
        m["branch_layers"] = tuple(m["branch_layers"])
        return ModelSettings(**m)

    def backtest(self) -> BacktestSettings:
        b = dict(self.tree["backtest"])
        b["strategies"] = tuple(b["strategies"])
        b["rescale_ref"] = tuple(b["rescale_ref"])
        return BacktestSettings(**b)

    def sweeps(self) -> SweepSettings:
        return SweepSettings(**{f.name: tuple(v) if isinstance(v, list) else v
                                for f in fields(SweepSettings) for v in [self.tree["sweeps"][f.name]]})

    @property
    def sampling(self) -> dict:
        return self.tree["sampling"]

    @property
    def files(self) -> dict:
        return self.tree["data"]["files"]

    @property
    def validation_months(self) -> list[int]:
        return [int(m) for m in self.tree["walk_forward"]["validation_months"]]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=True)
