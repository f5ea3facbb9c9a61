"""Nested run configuration with dotted-key overrides.

Every tunable of the pipeline lives here so that a run is fully described by
one resolved dictionary (embedded in reports and hashed for the adapter
cache).
"""
from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class DatasetConfig:
    adapter: str = "auto"
    root: str = ""
    dataset_id: str = "synthetic"
    input_size: int = 400
    k_shot: int = 1
    episodes_per_class: int = 100
    seed: int = 0


@dataclass
class BackboneConfig:
    kind: str = "resnet50"
    weights_path: str = ""
    seed: int = 0
    # toy stand-in only
    toy_channels: tuple[int, ...] = (16, 32, 48, 64)


@dataclass
class VLConfig:
    kind: str = "vit_b16"
    weights_path: str = ""
    seed: int = 0
    input_size: int = 224
    # toy stand-in only
    toy_patch: int = 16
    toy_dim: int = 32


@dataclass
class GCAConfig:
    enabled: bool = True
    group_size: int = 16
    proj_dim: int = 16


@dataclass
class AdapterConfig:
    kind: str = "tsaa"
    width: int = 32
    seed: int = 0


@dataclass
class AttentionConfig:
    heads: int = 4
    head_dim: int = 16
    init_scale: float = 10.0


@dataclass
class VVEAConfig:
    enabled: bool = True
    n_blocks: int = 4
    tau: float = 0.1
    max_pairs: int = 512
    local: bool = True
    global_: bool = True
    dense: bool = True


@dataclass
class TVEAConfig:
    enabled: bool = True
    threshold_mode: str = "otsu"
    fixed_tau: float = 0.5
    crf: bool = True
    multi_label: bool = False
    template: str = "a photo of a {}"
    temperature: float = 0.07
    bins: int = 256


@dataclass
class FusionConfig:
    weights: tuple[float, ...] = ()
    threshold: float = 0.5
    crf: bool = True


@dataclass
class AdaptConfig:
    epochs: int = 25
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    views: int = 1
    seed: int = 0
    max_loss: float = 1e6


@dataclass
class Config:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vl: VLConfig = field(default_factory=VLConfig)
    gca: GCAConfig = field(default_factory=GCAConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    vvea: VVEAConfig = field(default_factory=VVEAConfig)
    tvea: TVEAConfig = field(default_factory=TVEAConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(asdict(self))

    def hash(self) -> str:
        """Short digest of everything that influences adapted weights."""
        d = self.to_dict()
        relevant = {k: d[k] for k in ("backbone", "vl", "gca", "adapter", "attention", "vvea", "tvea", "adapt")}
        relevant["k_shot"] = d["dataset"]["k_shot"]
        relevant["input_size"] = d["dataset"]["input_size"]
        blob = json.dumps(relevant, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **dotted: Any) -> "Config":
        """Copy with dotted-key overrides, e.g. ``cfg.replace(**{"adapt.lr": 0.0})``."""
        new = copy.deepcopy(self)
        for key, value in dotted.items():
            set_key(new, key, value)
        new.validate()
        return new

    def validate(self) -> None:
        if self.adapt.epochs < 0:
            raise ConfigError("adapt.epochs must be >= 0")
        if self.adapt.lr < 0:
            raise ConfigError("adapt.lr must be >= 0")
        if self.gca.group_size < 1 or self.gca.proj_dim < 1:
            raise ConfigError("gca.group_size and gca.proj_dim must be >= 1")
        side = round(self.vvea.n_blocks ** 0.5)
        if self.vvea.n_blocks != 0 and side * side != self.vvea.n_blocks:
            raise ConfigError(f"vvea.n_blocks must be a perfect square (got {self.vvea.n_blocks})")
        if self.tvea.threshold_mode not in ("otsu", "fixed"):
            raise ConfigError(f"tvea.threshold_mode must be 'otsu' or 'fixed', got {self.tvea.threshold_mode!r}")
        if self.backbone.kind not in ("resnet50", "toy"):
            raise ConfigError(f"backbone.kind must be resnet50 or toy, got {self.backbone.kind!r}")
        if self.vl.kind not in ("vit_b16", "toy"):
            raise ConfigError(f"vl.kind must be vit_b16 or toy, got {self.vl.kind!r}")
        if self.adapter.kind not in ("tsaa", "projection"):
            raise ConfigError(f"adapter.kind must be tsaa or projection, got {self.adapter.kind!r}")
        if self.dataset.k_shot < 1:
            raise ConfigError("dataset.k_shot must be >= 1")

    @property
    def grid_side(self) -> int:
        return round(self.vvea.n_blocks ** 0.5)


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k.rstrip("_"): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(current: Any, value: Any) -> Any:
    if isinstance(value, str):
        if isinstance(current, bool):
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ConfigError(f"not a boolean: {value!r}")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            parts = [p for p in value.replace("[", "").replace("]", "").split(",") if p.strip()]
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        return value
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def set_key(cfg: Config, dotted: str, value: Any) -> None:
    try:
        section_name, key = dotted.split(".", 1)
    except ValueError:
        raise ConfigError(f"config key must be section.key, got {dotted!r}") from None
    section = getattr(cfg, section_name, None)
    if section is None or not is_dataclass(section):
        raise ConfigError(f"unknown config section {section_name!r}")
    names = {f.name.rstrip("_"): f.name for f in fields(section)}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    attr = names[key]
    try:
        setattr(section, attr, _coerce(getattr(section, attr), value))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {dotted}: {value!r}") from exc


def from_dict(data: dict[str, Any], base: Config | None = None) -> Config:
    cfg = copy.deepcopy(base) if base is not None else Config()
    for section, values in data.items():
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be a table")
        for key, value in values.items():
            set_key(cfg, f"{section}.{key}", value)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                base: Config | None = None) -> Config:
    """Read a TOML or JSON file over ``base`` (default: stock config) and apply ``key=value`` overrides."""
    data: dict[str, Any] = {}
    if path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            if sys.version_info >= (3, 11):
                import tomllib
            else:
                import tomli as tomllib

            try:
                data = tomllib.loads(text)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(str(exc)) from exc
    cfg = from_dict(data, base)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value.strip())
    cfg.validate()
    return cfg


def toy_config(**dotted: Any) -> Config:
    """Desk-scale defaults: toy backbone + toy VL on small synthetic images."""
    cfg = Config()
    cfg.dataset.input_size = 64
    cfg.dataset.episodes_per_class = 25
    cfg.backbone.kind = "toy"
    cfg.vl.kind = "toy"
    cfg.vl.input_size = 64
    cfg.vl.toy_patch = 8
    cfg.tvea.crf = False
    cfg.fusion.crf = False
    for key, value in dotted.items():
        set_key(cfg, key, value)
    cfg.validate()
    return cfg
