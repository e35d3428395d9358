"""Run configuration: TOML file + ``--set key=value`` overrides.

Sections map one-to-one onto the module config dataclasses; unknown keys are
rejected and every section is validated by constructing its dataclass
before anything is computed.
"""
from __future__ import annotations

import dataclasses
import json
import sys
import typing
import zlib
from dataclasses import dataclass, field

import numpy as np

from .agent import AgentConfig
from .bandit import BanditConfig
from .evaluation import MatchConfig
from .features import FeatureConfig
from .models.forest import TwoStageConfig
from .models.multitask import TrainConfig
from .pipeline import ReconstructionConfig, WorkflowConfig
from .rba import RBAConfig
from .synth import SynthConfig
from .wavelet import WaveletConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    rated_power: float | None = None
    timestamp: str = "timestamp"
    power: str = "power"
    covariates: tuple[str, ...] | None = None
    step: int | None = None

    def schema(self) -> dict:
        s = {"timestamp": self.timestamp, "power": self.power}
        if self.rated_power is not None:
            s["rated_power"] = self.rated_power
        if self.covariates is not None:
            s["covariates"] = list(self.covariates)
        if self.step is not None:
            s["step"] = self.step
        return s


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    rba: RBAConfig = field(default_factory=RBAConfig)
    wavelet: WaveletConfig = field(default_factory=WaveletConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    bandit: BanditConfig = field(default_factory=BanditConfig)
    forest: TwoStageConfig = field(default_factory=TwoStageConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.2, epochs=30))
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    match: MatchConfig = field(default_factory=lambda: MatchConfig(2))
    agent: AgentConfig = field(default_factory=AgentConfig)
    workflow: dict = field(default_factory=dict)  # scalar WorkflowConfig fields

    def workflow_config(self) -> WorkflowConfig:
        """Module configs wired together, seeds split from the root seed."""
        bandit = dataclasses.replace(self.bandit, seed=module_seed(self.seed, "bandit"))
        forest = dataclasses.replace(self.forest, seed=module_seed(self.seed, "forest"))
        train = dataclasses.replace(self.train, seed=module_seed(self.seed, "train"))
        features = dataclasses.replace(self.features, wavelet=self.wavelet)
        return _build(WorkflowConfig, {
            **self.workflow, "seed": module_seed(self.seed, "workflow"),
        }, "workflow", extra={"rba": self.rba, "wavelet": self.wavelet, "features": features,
                              "bandit": bandit, "forest": forest, "train": train,
                              "reconstruction": self.reconstruction, "match": self.match})


def module_seed(root: int, name: str) -> int:
    """Deterministic per-module seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


_NESTED_WORKFLOW = {"rba", "wavelet", "features", "bandit", "forest", "train", "reconstruction", "match"}


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a table")
        return _build(tp, value, where)
    if origin is tuple and isinstance(value, list):
        args = typing.get_args(tp)
        inner = args[0] if args else None
        if inner is not None and typing.get_origin(inner) is tuple:
            return tuple(tuple(v) for v in value)
        return tuple(value)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None:
            return None
        for arg in typing.get_args(tp):
            if arg is type(None):
                continue
            try:
                return _coerce(arg, value, where)
            except ConfigError:
                continue
        return value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, values: dict, where: str, extra: dict | None = None):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {', '.join(unknown)}")
    if cls is WorkflowConfig:
        nested = sorted(set(values) & _NESTED_WORKFLOW)
        if nested:
            raise ConfigError(f"[{where}] configure {', '.join(nested)} in their own sections")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in values.items()}
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"--set {key}: {p} is not a table")
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | None = None, overrides=(), seed: int | None = None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_dotted(raw, key, value)
    if seed is not None:
        raw["seed"] = seed
    workflow = raw.pop("workflow", {})
    cfg = _build(RunConfig, raw, "root")
    cfg = dataclasses.replace(cfg, workflow=dict(workflow))
    cfg.workflow_config()  # validate the workflow section now
    return cfg


def to_dict(cfg) -> dict:
    def conv(v):
        if dataclasses.is_dataclass(v):
            return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, (tuple, list)):
            return [conv(a) for a in v]
        if isinstance(v, dict):
            return {k: conv(a) for k, a in v.items()}
        return v
    return conv(cfg)
