"""Run configuration: nested dataclasses, strict parsing, YAML/JSON files."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .flows import FitConfig
from .mcmc import SamplerConfig
from .simulators import SIMULATOR_NAMES


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class FitBlock:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 50
    val_fraction: float = 0.1
    patience_epochs: int = 20
    max_epochs: int = 200

    def fit_config(self, seed: int) -> FitConfig:
        return FitConfig(self.lr, self.weight_decay, self.batch_size, self.val_fraction, self.patience_epochs,
                         self.max_epochs, seed)


@dataclass(frozen=True)
class SamplerBlock:
    kind: str = "isp"  # isp | mcmc
    chains: int = 5000
    transitions: int = 100
    mcmc_kind: str = "mh"  # mh | slice
    step_scale: typing.Optional[float] = None
    slice_width: typing.Optional[float] = None
    max_stepout: int = 10
    burn_in: int = 200
    thinning: int = 10

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.mcmc_kind, self.step_scale, self.slice_width, self.max_stepout,
                             self.transitions, self.burn_in, self.thinning, seed)


@dataclass(frozen=True)
class FlowBlock:
    bins: int = 16
    layers: int = 3
    hidden: typing.Tuple[int, ...] = (50, 50, 50)
    activation: str = "relu"
    head_tail_bound: float = 4.0
    surrogate_tail_bound: typing.Optional[float] = None  # None: from the prior box


@dataclass(frozen=True)
class ClassifierBlock:
    hidden: typing.Tuple[int, ...] = (256, 256, 256)
    activation: str = "selu"


@dataclass(frozen=True)
class MetricsBlock:
    names: typing.Tuple[str, ...] = ("missed_mode", "imbalance", "nll")
    n_mc: int = 100_000
    normalizer: str = "prior"  # prior | surrogate


METRIC_NAMES = ("missed_mode", "imbalance", "nll", "ess", "inception")


@dataclass(frozen=True)
class RunConfig:
    simulator: str
    simulator_options: typing.Dict[str, typing.Any] = field(default_factory=dict)
    obs_seed: int = 0
    head: str = "snl"
    sampler: SamplerBlock = SamplerBlock()
    rounds: int = 10
    budget: int = 1000
    seed: int = 0
    warm_start: bool = True
    surrogate_val_size: typing.Optional[int] = None  # None: half the budget
    head_fit: FitBlock = FitBlock()
    surrogate_fit: FitBlock = FitBlock()
    flow: FlowBlock = FlowBlock()
    classifier: ClassifierBlock = ClassifierBlock()
    metrics: MetricsBlock = MetricsBlock()

    def validate(self) -> "RunConfig":
        p = []
        if self.simulator not in SIMULATOR_NAMES:
            p.append(f"simulator: unknown name {self.simulator!r} (choose from {', '.join(SIMULATOR_NAMES)})")
        if self.simulator == "slcp-d" and "d" not in self.simulator_options:
            p.append("simulator_options.d: required for slcp-d")
        if self.head not in ("snl", "aalr"):
            p.append(f"head: must be snl or aalr, got {self.head!r}")
        s = self.sampler
        if s.kind not in ("isp", "mcmc"):
            p.append(f"sampler.kind: must be isp or mcmc, got {s.kind!r}")
        if s.mcmc_kind not in ("mh", "slice"):
            p.append(f"sampler.mcmc_kind: must be mh or slice, got {s.mcmc_kind!r}")
        if s.chains < 1:
            p.append("sampler.chains: must be >= 1")
        if s.kind == "mcmc" and s.chains > self.budget:
            p.append(f"sampler.chains: MCMC chains ({s.chains}) cannot exceed the budget ({self.budget})")
        if s.transitions < 0 or s.burn_in < 0 or s.thinning < 1:
            p.append("sampler: transitions, burn_in >= 0 and thinning >= 1 required")
        if self.rounds < 1:
            p.append("rounds: must be >= 1")
        if self.budget < 20:
            p.append("budget: must be >= 20")
        for name in ("head_fit", "surrogate_fit"):
            f = getattr(self, name)
            if not 0 < f.val_fraction < 1:
                p.append(f"{name}.val_fraction: must lie in (0, 1)")
            if f.patience_epochs < 1 or f.max_epochs < 1 or f.batch_size < 1:
                p.append(f"{name}: patience_epochs, max_epochs and batch_size must be >= 1")
        bad = [m for m in self.metrics.names if m not in METRIC_NAMES]
        if bad:
            p.append(f"metrics.names: unknown {bad} (choose from {', '.join(METRIC_NAMES)})")
        if self.metrics.normalizer not in ("prior", "surrogate"):
            p.append("metrics.normalizer: must be prior or surrogate")
        if p:
            raise ConfigError(p)
        return self

    @property
    def surrogate_val(self) -> int:
        return self.budget // 2 if self.surrogate_val_size is None else self.surrogate_val_size


def _convert(tp, value, path, problems):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return None
        return _build(tp, value, path + ".", problems)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(inner, value, path, problems)
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            problems.append(f"{path}: expected a list")
            return None
        return tuple(_convert(args[0], v, f"{path}[{i}]", problems) for i, v in enumerate(value))
    if origin in (dict, typing.Dict):
        if not isinstance(value, dict):
            problems.append(f"{path}: expected a mapping")
            return None
        return dict(value)
    if tp is bool:
        if not isinstance(value, bool):
            problems.append(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            problems.append(f"{path}: expected a number")
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            problems.append(f"{path}: expected a string")
        return value
    return value


def _build(cls, doc: dict, prefix: str, problems: list):
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            problems.append(f"{prefix}{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name in doc:
            kwargs[name] = _convert(hints[name], doc[name], prefix + name, problems)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            problems.append(f"{prefix}{name}: required field missing")
    if any(p.startswith(prefix) for p in problems) and prefix:
        return None
    try:
        return cls(**kwargs)
    except TypeError:
        return None


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(["top level: expected a mapping"])
    problems: list[str] = []
    cfg = _build(RunConfig, doc, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg.validate()


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(cfg)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        doc = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError([f"could not parse {path}: {exc}"]) from exc
    return config_from_dict(doc if doc is not None else {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
