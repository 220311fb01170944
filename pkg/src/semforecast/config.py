"""Run configuration: one TOML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .experiments import DEFAULT_DELAYS_S, DEFAULT_GAIN_MODES, DEFAULT_GROUP_GRID
from .mllm import FaultProfile, HttpConfig
from .model import PredictorConfig
from .scene import ConfigError, GeneratorConfig
from .train import TrainConfig


@dataclass
class PathsConfig:
    out: str = "runs/default"
    # shared response cache; defaults to <out>/cache.jsonl
    cache: str = ""

    @property
    def cache_path(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.out) / "cache.jsonl"


@dataclass
class DataConfig:
    n_train: int = 200
    n_eval: int = 100
    seed: int = 0
    generator: dict = field(default_factory=dict)

    def generator_config(self) -> GeneratorConfig:
        g = GeneratorConfig.from_dict(self.generator)
        g.validate()
        return g


@dataclass
class MllmConfig:
    # mock, http, or offline (cache replay only)
    backend: str = "mock"
    max_concurrent: int = 4
    delays_s: list = field(default_factory=lambda: list(DEFAULT_DELAYS_S))
    fault: dict = field(default_factory=dict)
    http: dict = field(default_factory=dict)

    def fault_profile(self) -> FaultProfile:
        return _build(FaultProfile, self.fault, "mllm.fault")

    def http_config(self) -> HttpConfig:
        if not self.http.get("endpoint") or not self.http.get("model"):
            raise ConfigError("mllm.http needs 'endpoint' and 'model' for the http backend")
        return _build(HttpConfig, self.http, "mllm.http")


@dataclass
class EvalConfig:
    k: int = 6
    k_prime: int = 6
    threshold_m: float = 1.0
    # womd or nusc; cut points and miss thresholds follow the profile
    profile: str = "womd"
    with_map: bool = True
    lat_threshold_3s: float = 1.0
    lon_threshold_3s: float = 2.0
    nusc_threshold_m: float = 2.0


@dataclass
class AblateConfig:
    groups: list = field(default_factory=lambda: [list(g) for g in DEFAULT_GROUP_GRID])
    gain_modes: list = field(default_factory=lambda: list(DEFAULT_GAIN_MODES))
    delays_s: list = field(default_factory=lambda: list(DEFAULT_DELAYS_S))


_SECTIONS = {
    "paths": PathsConfig,
    "data": DataConfig,
    "mllm": MllmConfig,
    "model": PredictorConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "ablate": AblateConfig,
}


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    mllm: MllmConfig = field(default_factory=MllmConfig)
    model: PredictorConfig = field(default_factory=PredictorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        d = {}
        for name in _SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            d[name] = json.loads(json.dumps(sec))
        return d

    def hash(self) -> str:
        """Hash of everything except output locations."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.paths.out)

    def write_snapshot(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.resolved.json"
        path.write_text(json.dumps({"config_hash": self.hash(), "config": self.to_dict()}, indent=2, sort_keys=True) + "\n")
        return path


def _build(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from None


def _parse_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` (value in TOML syntax, bare strings allowed)."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, value = item.split("=", 1)
        keys = path.strip().split(".")
        if len(keys) < 2 or keys[0] not in _SECTIONS:
            raise ConfigError(f"override {item!r}: first component must be one of {sorted(_SECTIONS)}")
        node = raw
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a table")
        node[keys[-1]] = _parse_value(value.strip())
    return raw


def from_dict(raw: dict) -> RunConfig:
    extra = set(raw) - set(_SECTIONS)
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        values = dict(raw.get(name, {}))
        if name == "model" and "groups" in values:
            values["groups"] = tuple(values["groups"])
        kwargs[name] = _build(cls, values, name)
    cfg = RunConfig(**kwargs)
    cfg.data.generator_config()
    cfg.mllm.fault_profile()
    if cfg.mllm.backend not in ("mock", "http", "offline"):
        raise ConfigError("mllm.backend must be mock, http or offline")
    if cfg.eval.profile not in ("womd", "nusc"):
        raise ConfigError("eval.profile must be womd or nusc")
    return cfg


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} not found")
        try:
            raw = tomli.loads(p.read_text(encoding="utf-8"))
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{p}: {e}") from None
    return from_dict(apply_overrides(raw, overrides))
