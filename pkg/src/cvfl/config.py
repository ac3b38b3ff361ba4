"""Experiment configuration, JSON (de)serialisation and the two built-in presets."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import RadioConfig
from .datasets import ConceptShiftSpec, PartitionSpec
from .exceptions import ConfigurationError
from .mobility import MobilityConfig


@dataclass(frozen=True)
class Seeds:
    fleet: int = 0
    channel: int = 1
    data: int = 2
    train: int = 3

    @classmethod
    def from_base(cls, seed) -> "Seeds":
        """Derive the four seeds from one integer (or a sequence of integers)."""
        fleet, channel, data, train = np.random.SeedSequence(seed).generate_state(4)
        return cls(int(fleet), int(channel), int(data), int(train))


@dataclass(frozen=True)
class LearnerConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 0.05
    batch_size: int = 10
    epochs: int = 1
    per_sample_cost: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("hidden needs at least one positive width")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0 or self.per_sample_cost < 0:
            raise ConfigurationError("lr must be >= 0, batch_size >= 1, epochs >= 0 and per_sample_cost >= 0")


@dataclass(frozen=True)
class DataConfig:
    """``source`` is ``"synthetic"`` (Gaussian blobs) or ``"idx"`` (MNIST-layout files)."""

    source: str = "synthetic"
    num_classes: int = 10
    dim: int = 20
    n_train: int = 60000
    n_test: int = 10000
    min_distance: float = 4.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigurationError(f"source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx" and not all((self.train_images, self.train_labels, self.test_images, self.test_labels)):
            raise ConfigurationError("source 'idx' needs all four file paths")
        if self.num_classes < 2 or self.dim < 1 or self.n_train < 1 or self.n_test < 1:
            raise ConfigurationError("num_classes must be >= 2 and dim, n_train, n_test >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "custom"
    scenario: str = "freeway"
    K: int = 30
    i_max: int = 50
    t_c: int = 25
    clustering: bool = True
    max_clusters: int = 2
    clustering_fraction: float = 1.0
    clustering_rounds: int = 1
    n_max: int = 2
    diversity_weights: tuple[float, float, float] = (0.4, 0.4, 0.2)
    persistent_fleet: bool = False
    round_duration: float = 10.0
    train_models: bool = True
    record_timing: bool = False
    seeds: Seeds = field(default_factory=Seeds)
    mobility: MobilityConfig = field(default_factory=MobilityConfig)
    radio: RadioConfig = field(default_factory=RadioConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    shift: ConceptShiftSpec = field(default_factory=ConceptShiftSpec)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        object.__setattr__(self, "diversity_weights", tuple(float(w) for w in self.diversity_weights))
        if self.scenario not in ("freeway", "parking_lot"):
            raise ConfigurationError(f"scenario must be 'freeway' or 'parking_lot', got {self.scenario!r}")
        if self.K < 1:
            raise ConfigurationError("K must be >= 1")
        if self.i_max < 1:
            raise ConfigurationError("i_max must be >= 1")
        if not (1 <= self.t_c <= self.i_max):
            raise ConfigurationError(f"t_c must satisfy 1 <= t_c <= i_max, got t_c={self.t_c}, i_max={self.i_max}")
        if not (0 < self.clustering_fraction <= 1):
            raise ConfigurationError("clustering_fraction must lie in (0, 1]")
        if self.max_clusters < 1 or self.clustering_rounds < 1:
            raise ConfigurationError("max_clusters and clustering_rounds must be >= 1")
        if self.n_max < 0:
            raise ConfigurationError("n_max must be >= 0")
        if len(self.diversity_weights) != 3:
            raise ConfigurationError("diversity_weights needs (diversity, size, age)")
        self.shift.validate_labels(self.data.num_classes)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, *, seed=None, rounds=None, total_rbs=None, model_size_bits=None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = cfg.replace(seeds=Seeds.from_base(seed))
        if rounds is not None:
            cfg = cfg.replace(i_max=rounds, t_c=min(cfg.t_c, rounds))
        if total_rbs is not None or model_size_bits is not None:
            radio = cfg.radio
            if total_rbs is not None:
                radio = dataclasses.replace(radio, total_rbs=int(total_rbs))
            if model_size_bits is not None:
                radio = dataclasses.replace(radio, model_size_bits=float(model_size_bits))
            cfg = cfg.replace(radio=radio)
        return cfg

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"line {exc.lineno}: {exc.msg}") from exc
        try:
            return cls.from_dict(data)
        except ConfigurationError as exc:
            raise ConfigurationError(_locate(text, str(exc))) from exc


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_NESTED = {
    "seeds": Seeds,
    "mobility": MobilityConfig,
    "radio": RadioConfig,
    "partition": PartitionSpec,
    "shift": ConceptShiftSpec,
    "learner": LearnerConfig,
    "data": DataConfig,
}


def _build(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigurationError(f"{path}{key}: unknown key")
    kwargs = {}
    for key, value in d.items():
        if cls is ExperimentConfig and key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, f"{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        if path:
            raise ConfigurationError(f"{path}{exc}") from exc
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path.rstrip('.') or 'config'}: {exc}") from exc


def _locate(text: str, message: str) -> str:
    """Prefix ``message`` with the line of the (dotted) key it starts with."""
    lines = text.splitlines()
    match = re.match(r"[A-Za-z_]\w*(?:\.[A-Za-z_]\w*)*", message)
    if not match:
        return message
    start, found = 0, None
    for part in match.group(0).split("."):
        pattern = re.compile(r'"%s"\s*:' % re.escape(part))
        for lineno in range(start, len(lines)):
            if pattern.search(lines[lineno]):
                found = start = lineno
                break
        else:
            break
    if found is None:
        return message
    return f"line {found + 1}: {message}"


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())


# --------------------------------------------------------------------------- presets


def freeway_preset() -> ExperimentConfig:
    """Six-lane freeway through a 2 km cell with the published radio parameters."""
    return ExperimentConfig(
        name="freeway",
        scenario="freeway",
        K=30,
        i_max=50,
        t_c=25,
        n_max=2,
        mobility=MobilityConfig(coverage_diameter=2000.0, lanes=6),
        radio=RadioConfig(total_rbs=4, model_size_bits=160e3, delta=2.0),
    )


def parking_lot_preset() -> ExperimentConfig:
    """Parked vehicles in a lot smaller than the V2V range: no mobility constraints."""
    return ExperimentConfig(
        name="parking-lot",
        scenario="parking_lot",
        K=30,
        i_max=30,
        t_c=25,
        n_max=2,
        mobility=MobilityConfig(coverage_diameter=200.0, lanes=6, parked=True),
        radio=RadioConfig(total_rbs=4, model_size_bits=160e3, delta=2.0),
    )


PRESETS = {
    "freeway": freeway_preset,
    "parking-lot": parking_lot_preset,
}


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
