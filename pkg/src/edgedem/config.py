"""Experiment configuration: a YAML file of sections, each a flat mapping.

Unknown sections or keys are rejected. Any key can be overridden from the
environment as ``EDGEDEM_<SECTION>_<KEY>``, e.g. ``EDGEDEM_NETWORK_N_UES=30``;
the value is parsed as a YAML scalar so ``null``, numbers and lists work.
"""

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .demlearn import LINKAGES, TrainConfig
from .exceptions import ConfigError
from .latency import LearningBudget
from .radio import RadioConfig

MATCHING_SCHEMES = ("proposal", "random", "uniform", "one_sided", "optimal")
LEARNING_SCHEMES = ("demlearn", "fedavg")
ENV_PREFIX = "EDGEDEM_"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    replications: int = 10
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1 or self.workers < 1:
            raise ValueError("replications and workers must be >= 1")


@dataclass(frozen=True)
class NetworkConfig:
    n_ues: int = 50
    n_sbs: int = 5
    quota: int = 15
    virtual_rate: Optional[float] = None

    def __post_init__(self):
        if self.n_ues < 1 or self.n_sbs < 1 or self.quota < 1:
            raise ValueError("n_ues, n_sbs and quota must be >= 1")


@dataclass(frozen=True)
class ComputeConfig:
    cycles_min: float = 1e6
    cycles_max: float = 5e6
    fmax_min: float = 1.0e9
    fmax_max: float = 2.0e9
    f_min: float = 0.5e9
    model_kb_dist: str = "lognormal"

    def __post_init__(self):
        if not 0 < self.cycles_min <= self.cycles_max or not 0 < self.fmax_min <= self.fmax_max:
            raise ValueError("compute ranges must be positive and ordered")
        if self.model_kb_dist not in ("lognormal", "uniform"):
            raise ValueError("model_kb_dist must be 'lognormal' or 'uniform'")


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_classes: int = 10
    input_dim: int = 20
    n_samples: int = 20000
    spread: float = 1.0
    scale: float = 4.0
    offset: float = 3.0
    labels_per_ue: int = 2
    samples_min: int = 30
    samples_max: int = 300
    idx_images: Optional[str] = None
    idx_labels: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ValueError("data source must be 'synthetic' or 'idx'")
        if self.source == "idx" and not (self.idx_images and self.idx_labels):
            raise ValueError("idx source needs idx_images and idx_labels")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"
    hidden: int = 32
    n_groups: int = 3
    linkage: str = "average"
    cluster_features: str = "weights"
    init_scale: float = 0.01

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ValueError("model kind must be 'logistic' or 'mlp'")
        if self.linkage not in LINKAGES:
            raise ValueError(f"linkage must be one of {LINKAGES}")
        if self.cluster_features not in ("weights", "weights+grads"):
            raise ValueError("cluster_features must be 'weights' or 'weights+grads'")
        if self.n_groups < 1:
            raise ValueError("n_groups must be >= 1")


@dataclass(frozen=True)
class SchemeConfig:
    matching: str = "proposal"
    learning: str = "demlearn"

    def __post_init__(self):
        if self.matching not in MATCHING_SCHEMES:
            raise ValueError(f"matching must be one of {MATCHING_SCHEMES}")
        if self.learning not in LEARNING_SCHEMES:
            raise ValueError(f"learning must be one of {LEARNING_SCHEMES}")


@dataclass(frozen=True)
class OutputConfig:
    out_dir: str = "results"
    trace_matching: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    budget: LearningBudget = field(default_factory=LearningBudget)
    compute: ComputeConfig = field(default_factory=ComputeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    scheme: SchemeConfig = field(default_factory=SchemeConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = getattr(self, f.name)
            out[f.name] = {k.name: _plain(getattr(section, k.name)) for k in dataclasses.fields(section)}
        return out

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some keys changed, e.g. ``cfg.replace(network={"n_ues": 10})``."""
        doc = self.to_dict()
        for name, values in sections.items():
            if name not in doc:
                raise ConfigError(f"unknown section {name!r}")
            doc[name].update(values)
        return from_dict(doc)


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}
_TUPLE_KEYS = {("radio", "subbands_per_sbs"), ("budget", "local_constant")}


def _scalar_type(hint):
    """The plain type behind ``Optional[T]``, or the hint itself."""
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    return args[0] if typing.get_origin(hint) is typing.Union and len(args) == 1 else hint


def _coerce(section: str, key: str, value, hint):
    if value is None:
        return None
    want = _scalar_type(hint)
    if (section, key) in _TUPLE_KEYS and isinstance(value, list):
        return tuple(value)
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean")
        return value
    if want in (int, float) and isinstance(value, str):
        # YAML 1.1 reads exponent forms without a dot, such as 1e6, as strings
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}") from None
    if want is int and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
    if want is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return value


def from_dict(doc: Optional[dict]) -> ExperimentConfig:
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    built = {}
    for name, factory in SECTIONS.items():
        values = doc.get(name) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        defaults = factory()
        known = {f.name: getattr(defaults, f.name) for f in dataclasses.fields(defaults)}
        bad = set(values) - set(known)
        if bad:
            raise ConfigError(f"unknown keys in section {name!r}: {sorted(bad)}")
        hints = typing.get_type_hints(type(defaults))
        kwargs = {k: _coerce(name, k, v, hints[k]) for k, v in values.items()}
        try:
            built[name] = type(defaults)(**{**known, **kwargs})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {name!r}: {exc}") from exc
    return ExperimentConfig(**built)


def env_overrides(doc: dict, environ=None) -> dict:
    """Fold ``EDGEDEM_<SECTION>_<KEY>`` variables into a raw config mapping."""
    environ = os.environ if environ is None else environ
    doc = {k: dict(v or {}) for k, v in (doc or {}).items()}
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section = next((s for s in SECTIONS if rest.startswith(s + "_")), None)
        if section is None:
            raise ConfigError(f"{var} does not name a config section")
        key = rest[len(section) + 1:]
        doc.setdefault(section, {})[key] = yaml.safe_load(raw)
    return doc


def load_config(path=None, environ=None) -> ExperimentConfig:
    """Read a YAML config (defaults when ``path`` is None) and apply environment overrides."""
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(env_overrides(doc, environ))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
