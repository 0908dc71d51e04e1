"""Declarative run configuration: one JSON file drives the whole pipeline.

Every section mirrors a module's config dataclass and is validated
structurally before any work starts; unknown keys anywhere are rejected.
Dotted-key overrides (``section.field=value``) can patch a loaded config
from the command line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentationConfig
from .data import (
    DatasetPool,
    SyntheticSpec,
    generate_synthetic_pool,
    generate_task_pool,
    load_manifest,
    make_fake_data,
)
from .errors import ConfigurationError, FewsarError
from .fsl import FSLTrainConfig
from .ood import DetectorConfig
from .pretrain import Encoder, SSLConfig, make_encoder


@dataclass(frozen=True)
class SyntheticPoolConfig:
    num_classes: int = 10
    chips_per_class: int = 20
    chip_size: int = 32
    scatterer_count_range: tuple = (8, 16)
    speckle_level: float = 0.5
    condition_shift: float = 0.0
    template_seed: int = 0
    background: float = 0.03
    seed: int = 0

    def spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            chips_per_class=self.chips_per_class,
            chip_size=self.chip_size,
            scatterer_count_range=tuple(self.scatterer_count_range),
            speckle_level=self.speckle_level,
            condition_shift=self.condition_shift,
            template_seed=self.template_seed,
            background=self.background,
        )


@dataclass(frozen=True)
class TaskPoolConfig(SyntheticPoolConfig):
    train_per_class: int = 40
    test_per_class: int = 15
    include_eoc: bool = False


@dataclass(frozen=True)
class PoolSource:
    """Either a synthetic generator spec or a manifest path."""

    synthetic: SyntheticPoolConfig | None = None
    manifest: str | None = None


@dataclass(frozen=True)
class TaskSource:
    synthetic: TaskPoolConfig | None = None
    manifest: str | None = None


@dataclass(frozen=True)
class EncoderConfig:
    arch: str = "small_conv"
    channels: tuple = (64, 128, 256, 512)
    base_width: int = 8
    seed: int = 0


@dataclass(frozen=True)
class FakeDataConfig:
    n: int = 100
    size: int = 32
    seed: int = 0


@dataclass(frozen=True)
class OODSetsConfig:
    holdout_count: int | None = None
    fake_data: FakeDataConfig | None = None
    disjoint_synthetic: SyntheticPoolConfig | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    ways: tuple = (5,)
    shots: tuple = (1, 5)
    num_runs: int = 10
    master_seed: int = 0
    methods: tuple = ("scratch-small", "ssl-basic")
    query_per_class: int | None = 10
    include_eoc: bool = False
    workers: int = 1

    def __post_init__(self):
        if not self.ways or not self.shots:
            raise ConfigurationError("experiment grid needs nonempty ways and shots")
        if self.num_runs < 1:
            raise ConfigurationError("num_runs must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        known = {"scratch-small", "scratch-deep", "ssl-basic", "ssl-oe"}
        bad = set(self.methods) - known
        if bad:
            raise ConfigurationError(f"unknown methods {sorted(bad)}; options: {sorted(known)}")


@dataclass(frozen=True)
class PlotConfig:
    bins: int = 40
    tpr_targets: tuple = (0.8,)


@dataclass(frozen=True)
class RunConfig:
    pretrain_data: PoolSource = field(default_factory=PoolSource)
    task_data: TaskSource = field(default_factory=TaskSource)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    fsl: FSLTrainConfig = field(default_factory=FSLTrainConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    ood: OODSetsConfig = field(default_factory=OODSetsConfig)
    plot: PlotConfig = field(default_factory=PlotConfig)


_OPTIONAL_DATACLASS = {
    "synthetic": None,  # resolved per-field below
    "fake_data": FakeDataConfig,
    "disjoint_synthetic": SyntheticPoolConfig,
}


def _build_dataclass(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    proto = cls()
    kwargs = {}
    for name, value in data.items():
        default = getattr(proto, name)
        target = f"{where}.{name}"
        if is_dataclass(default):
            value = _build_dataclass(type(default), value, target)
        elif default is None and name in _OPTIONAL_DATACLASS and isinstance(value, dict):
            sub = _OPTIONAL_DATACLASS[name]
            if sub is None:
                sub = TaskPoolConfig if cls is TaskSource else SyntheticPoolConfig
            value = _build_dataclass(sub, value, target)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except FewsarError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def parse_run_config(data: dict) -> RunConfig:
    return _build_dataclass(RunConfig, data, "config")


def load_run_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file does not exist: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        data = apply_override(data, item)
    return parse_run_config(data)


def apply_override(data: dict, item: str) -> dict:
    """Apply one dotted-key=value override; the value is parsed as JSON when
    possible and kept as a string otherwise."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {item!r} descends into a non-object")
    node[parts[-1]] = value
    return data


def default_run_config_dict() -> dict:
    """A fully populated config dictionary with all defaults, for reference."""

    def to_jsonable(obj):
        if is_dataclass(obj):
            return {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
        if isinstance(obj, tuple):
            return [to_jsonable(v) for v in obj]
        if isinstance(obj, dict):
            return {k: to_jsonable(v) for k, v in obj.items()}
        return obj

    return to_jsonable(RunConfig())


# ---------------------------------------------------------------------------
# builders


def build_pool(source, base_dir=".") -> DatasetPool:
    """Materialize a pool from a source section (synthetic or manifest)."""
    if source.synthetic is not None and source.manifest is not None:
        raise ConfigurationError("pool source must set synthetic or manifest, not both")
    if source.synthetic is not None:
        cfg = source.synthetic
        if isinstance(cfg, TaskPoolConfig):
            return generate_task_pool(
                cfg.spec(),
                cfg.seed,
                train_per_class=cfg.train_per_class,
                test_per_class=cfg.test_per_class,
                include_eoc=cfg.include_eoc or cfg.condition_shift > 0,
            )
        return generate_synthetic_pool(cfg.spec(), cfg.seed, condition="pretrain")
    if source.manifest is not None:
        return load_manifest(Path(base_dir) / source.manifest)
    raise ConfigurationError("pool source must provide 'synthetic' or 'manifest'")


def build_encoder_from_config(cfg: EncoderConfig) -> Encoder:
    return make_encoder(
        arch=cfg.arch,
        channels=tuple(cfg.channels),
        base_width=cfg.base_width,
        seed=cfg.seed,
        dtype=np.float32,
    )


def build_ood_sets(cfg: OODSetsConfig) -> dict:
    sets = {}
    if cfg.fake_data is not None:
        sets["FakeData"] = make_fake_data(cfg.fake_data.n, cfg.fake_data.size, cfg.fake_data.seed)
    if cfg.disjoint_synthetic is not None:
        sets["DisjointSynth"] = generate_synthetic_pool(
            cfg.disjoint_synthetic.spec(), cfg.disjoint_synthetic.seed, condition="OOD"
        )
    return sets
