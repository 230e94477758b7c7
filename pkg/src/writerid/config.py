"""Pipeline configuration: YAML file plus key=value overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from writerid.encoding import ENCODERS


class ConfigError(ValueError):
    pass


@dataclass
class PatchSettings:
    stride: int = 3
    max_per_doc: int = 2000
    invert_ink: bool = False


@dataclass
class CnnSettings:
    preset: str = "B"
    c1_filters: int = 16
    c2_filters: int = 256
    hidden_nodes: int = 64
    learning_rate: float = 0.01
    epochs: int = 20
    momentum: float = 0.9
    momentum_epochs: int = 5
    batch_size: int = 64
    holdout_fraction: float = 0.1
    max_train_patches: int = 0  # 0 = use every training patch


@dataclass
class WhiteningSettings:
    mode: str = "zca"
    epsilon: float = 1e-5


@dataclass
class GmmSettings:
    components: int = 100
    tau: float = 68.0
    top_c: int = 10
    renormalize_truncated: bool = True
    max_iters: int = 200
    tol: float = 1e-5
    kmeans_batch_size: int = 1024
    kmeans_iters: int = 100


@dataclass
class ModelPaths:
    """Pretrained artifacts to reuse instead of this run's own outputs.

    Set these to another run's files to transfer a CNN, whitening
    transform or dictionary across datasets (e.g. dictionaries estimated
    on one corpus applied to another).
    """

    cnn: str = ""
    whitening: str = ""
    gmm: str = ""
    kmeans: str = ""


@dataclass
class PipelineConfig:
    train_manifest: str
    test_manifest: str
    output_dir: str
    id_pattern: str = "{writer}_{doc}"
    encoder: str = "sv_kl"
    seed: int = 0
    dump_rankings: bool = False
    patches: PatchSettings = field(default_factory=PatchSettings)
    cnn: CnnSettings = field(default_factory=CnnSettings)
    whitening: WhiteningSettings = field(default_factory=WhiteningSettings)
    gmm: GmmSettings = field(default_factory=GmmSettings)
    models: ModelPaths = field(default_factory=ModelPaths)

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")


_SECTIONS = {
    "patches": PatchSettings,
    "cnn": CnnSettings,
    "whitening": WhiteningSettings,
    "gmm": GmmSettings,
    "models": ModelPaths,
}


def _build_section(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {where!r}: {sorted(unknown)}")
    return cls(**data)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")

    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, data.pop(name), name)
    top = {f.name for f in dataclasses.fields(PipelineConfig)} - set(_SECTIONS)
    unknown = set(data) - top
    if unknown:
        raise ConfigError(f"{path}: unknown key(s): {sorted(unknown)}")
    for required in ("train_manifest", "test_manifest", "output_dir"):
        if required not in data:
            raise ConfigError(f"{path}: missing required key {required!r}")
    # manifest paths are relative to the config file
    for key in ("train_manifest", "test_manifest", "output_dir"):
        p = Path(data[key])
        data[key] = str(p if p.is_absolute() else path.parent / p)
    try:
        return PipelineConfig(**data, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def apply_override(config: PipelineConfig, spec: str) -> None:
    """Apply a ``section.key=value`` (or ``key=value``) override in place."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key=value")
    dotted, raw_value = spec.split("=", 1)
    value = yaml.safe_load(raw_value) if raw_value != "" else ""
    target = config
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        if not hasattr(target, part):
            raise ConfigError(f"unknown config section {part!r} in override {spec!r}")
        target = getattr(target, part)
    leaf = parts[-1]
    if not dataclasses.is_dataclass(target) or not hasattr(target, leaf):
        raise ConfigError(f"unknown config key {dotted!r} in override {spec!r}")
    current = getattr(target, leaf)
    if dataclasses.is_dataclass(current):
        raise ConfigError(f"cannot override section {dotted!r} directly")
    setattr(target, leaf, value)


def config_hash(config: PipelineConfig) -> str:
    """Stable hash of the full configuration, for run manifests."""
    canonical = json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
