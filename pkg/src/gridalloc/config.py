"""Run configuration: an INI file with a fixed schema, plus per-stage seeds.

Schema (every section and key optional unless noted)::

    [run]       seed, out
    [synth]     enabled, n_train, n_test, cells_per_region, facilities_per_region, blocks
    [paths]     regions, landuse, indicators, facilities, planted_weights
    [grid]      target_cells, quantum
    [train]     epochs, learning_rate, optimizer, tau, d, heads, layers,
                epsilon_smooth, patience, train_split
    [allocate]  k
    [mapping]   <indicator> = <land-use class>
    [gpm]       <land-use class> = <static weight>

Relative paths are resolved against the config file's directory.  With
``[synth] enabled = true`` the dataset paths default to ``<out>/data``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .synthetic import SyntheticScenario
from .training import DEFAULT_MAPPING, TrainConfig

DATA_FILES = ("regions", "landuse", "indicators", "facilities")
SYNTH_KEYS = ("n_train", "n_test", "cells_per_region", "facilities_per_region", "blocks")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")


class ConfigError(ValueError):
    pass


def stage_seed(root: int, label: str) -> int:
    """Seed for one pipeline stage, fixed by the root seed and the stage label."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunConfig:
    seed: int = 0
    out: Path = Path("run")
    synth: bool = False
    scenario: SyntheticScenario = field(default_factory=SyntheticScenario)
    paths: dict[str, Path | None] = field(default_factory=dict)
    target_cells: int = 400
    quantum: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    train_split: str = "train"
    k: int | None = None
    mapping: list[tuple[str, str]] = field(default_factory=lambda: list(DEFAULT_MAPPING))
    gpm: dict[str, float] | None = None
    source: Path | None = None

    def data_path(self, role: str) -> Path | None:
        p = self.paths.get(role)
        if p is None and self.synth:
            name = {"regions": "regions.geojson", "landuse": "landuse.geojson",
                    "planted_weights": "planted_weights.csv"}.get(role, f"{role}.csv")
            return self.out / "data" / name
        return p

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**asdict(self.train), "seed": stage_seed(self.seed, "train")})

    def snapshot(self) -> dict:
        """JSON-friendly view of every setting, for the run manifest."""
        return {
            "seed": self.seed,
            "out": str(self.out),
            "synth": {"enabled": self.synth, **{k: getattr(self.scenario, k) for k in SYNTH_KEYS}},
            "paths": {r: (None if self.data_path(r) is None else str(self.data_path(r)))
                      for r in DATA_FILES + ("planted_weights",)},
            "grid": {"target_cells": self.target_cells, "quantum": self.quantum},
            "train": {**{k: getattr(self.train, k) for k in TRAIN_KEYS}, "train_split": self.train_split},
            "allocate": {"k": self.k},
            "mapping": dict(self.mapping),
            "gpm": self.gpm,
        }


_ALLOWED = {
    "run": {"seed", "out"},
    "synth": {"enabled", *SYNTH_KEYS},
    "paths": {*DATA_FILES, "planted_weights"},
    "grid": {"target_cells", "quantum"},
    "train": {*TRAIN_KEYS, "train_split"},
    "allocate": {"k"},
    "mapping": None,  # free keys
    "gpm": None,
}


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            return {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}[raw.lower()]
        return kind(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {kind.__name__}") from None


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a config file; ``overrides`` (seed, out) win over the file."""
    cfg = RunConfig()
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keep key case (class names)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        cp.read(path, encoding="utf-8")
        base = path.resolve().parent
        cfg.source = path
    for sec in cp.sections():
        if sec not in _ALLOWED:
            raise ConfigError(f"unknown section [{sec}]")
        allowed = _ALLOWED[sec]
        if allowed is not None:
            bad = sorted(set(cp[sec]) - allowed)
            if bad:
                raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(bad)}")

    def resolve(p: str) -> Path:
        q = Path(p).expanduser()
        return q if q.is_absolute() else base / q

    if cp.has_section("run"):
        s = cp["run"]
        if "seed" in s:
            cfg.seed = _convert("run", "seed", s["seed"], int)
        if "out" in s:
            cfg.out = resolve(s["out"])
    if cp.has_section("synth"):
        s = cp["synth"]
        cfg.synth = _convert("synth", "enabled", s.get("enabled", "true"), bool)
        for k in SYNTH_KEYS:
            if k in s:
                setattr(cfg.scenario, k, _convert("synth", k, s[k], int))
    if cp.has_section("paths"):
        cfg.paths = {k: resolve(v) for k, v in cp["paths"].items()}
    if cp.has_section("grid"):
        s = cp["grid"]
        if "target_cells" in s:
            cfg.target_cells = _convert("grid", "target_cells", s["target_cells"], int)
        if "quantum" in s:
            cfg.quantum = _convert("grid", "quantum", s["quantum"], float)
    if cp.has_section("train"):
        s = cp["train"]
        kinds = {f.name: f.type for f in fields(TrainConfig)}
        values = {}
        for k in TRAIN_KEYS:
            if k in s:
                kind = {"int": int, "float": float, "str": str}[kinds[k] if isinstance(kinds[k], str)
                                                                 else kinds[k].__name__]
                values[k] = _convert("train", k, s[k], kind)
        try:
            cfg.train = TrainConfig(**values)
        except ValueError as exc:
            raise ConfigError(f"[train] {exc}") from None
        cfg.train_split = s.get("train_split", cfg.train_split)
    if cp.has_section("allocate") and "k" in cp["allocate"]:
        raw = cp["allocate"]["k"]
        cfg.k = None if raw.strip().lower() == "auto" else _convert("allocate", "k", raw, int)
    if cp.has_section("mapping"):
        cfg.mapping = list(cp["mapping"].items())
    if cp.has_section("gpm"):
        cfg.gpm = {k: _convert("gpm", k, v, float) for k, v in cp["gpm"].items()}

    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k == "seed":
            cfg.seed = int(v)
        elif k == "out":
            cfg.out = Path(v)
        else:
            raise ConfigError(f"unknown override {k!r}")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.target_cells < 1:
        raise ConfigError("[grid] target_cells must be at least 1")
    if cfg.quantum < 0:
        raise ConfigError("[grid] quantum must be non-negative")
    if cfg.k is not None and cfg.k < 1:
        raise ConfigError("[allocate] k must be positive or 'auto'")
    if cfg.gpm is not None and any(v < 0 for v in cfg.gpm.values()):
        raise ConfigError("[gpm] weights must be non-negative")
    if cfg.train.d % cfg.train.heads:
        raise ConfigError(f"[train] d={cfg.train.d} is not divisible by heads={cfg.train.heads}")
    if cfg.synth:
        try:
            cfg.scenario.validate()
        except ValueError as exc:
            raise ConfigError(f"[synth] {exc}") from None
    else:
        missing = [r for r in DATA_FILES if cfg.paths.get(r) is None]
        if missing:
            raise ConfigError(f"[paths] needs {', '.join(missing)} (or enable [synth])")
