"""Run configuration: one YAML file drives every command.

Sections map 1:1 onto the dataclass configs of the library modules. Unknown
keys anywhere are hard errors so hyperparameter typos cannot silently fall
back to defaults. Relative paths resolve against the config file location.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from cxrmask.attention import AttentionConfig
from cxrmask.classifier import ClassifierConfig
from cxrmask.data import PreprocessConfig
from cxrmask.segmentation import SegConfig


class ConfigError(Exception):
    """Raised for malformed or unknown configuration input."""


@dataclass
class DataPaths:
    labels: str | None = None
    train_list: str | None = None
    test_list: str | None = None
    boxes: str | None = None
    image_dir: str | None = None
    seg_data_dir: str | None = None
    mask_dir: str | None = None  # precomputed anatomy masks, one image per id
    original_size: int = 1024  # source frame of box coordinates


@dataclass
class RunConfig:
    data: DataPaths = field(default_factory=DataPaths)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    segmentation: SegConfig = field(default_factory=SegConfig)
    out_dir: str = "runs"
    seed: int = 0
    deterministic: bool = False
    strict_counts: bool = False
    val_fraction: float = 0.10
    mask_source: str = "segmenter"  # segmenter | files | ones
    mask_threshold: float = 0.5
    cam_source: str = "local"  # local | global
    cam_threshold: float = 0.5

    def __post_init__(self):
        if self.mask_source not in ("segmenter", "files", "ones"):
            raise ConfigError(f"mask_source must be segmenter|files|ones, got {self.mask_source!r}")
        if self.cam_source not in ("local", "global"):
            raise ConfigError(f"cam_source must be local|global, got {self.cam_source!r}")


_SECTIONS = {
    "data": DataPaths,
    "preprocess": PreprocessConfig,
    "classifier": ClassifierConfig,
    "segmentation": SegConfig,
}

_PATH_FIELDS = (
    "labels", "train_list", "test_list", "boxes",
    "image_dir", "seg_data_dir", "mask_dir",
)


def _build_section(cls, section: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    if cls is ClassifierConfig and isinstance(section.get("attention"), dict):
        att_known = {f.name for f in dataclasses.fields(AttentionConfig)}
        att_unknown = set(section["attention"]) - att_known
        if att_unknown:
            raise ConfigError(
                f"unknown key(s) in {where}.attention: {', '.join(sorted(att_unknown))}"
            )
    if cls is PreprocessConfig:
        section = dict(section)
        for key in ("mean", "std"):
            if key in section:
                section[key] = tuple(section[key])
    try:
        return cls(**section)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad {where} section: {err}") from err


def load_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    """Parse a YAML run config, apply CLI overrides, resolve paths."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing config file: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"unparseable config {path}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")

    top_known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(raw) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")

    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"section {name} must be a mapping")
        kwargs[name] = _build_section(cls, section, name)
    for name in top_known - set(_SECTIONS):
        if name in raw:
            kwargs[name] = raw[name]
    cfg = RunConfig(**kwargs)

    # a top-level seed steers the sub-trainers unless they set their own
    if "seed" in raw:
        if "seed" not in raw.get("classifier", {}):
            cfg.classifier.seed = cfg.seed
        if "seed" not in raw.get("segmentation", {}):
            cfg.segmentation.seed = cfg.seed

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            cfg.seed = value
            cfg.classifier.seed = value
            cfg.segmentation.seed = value
        elif key == "out_dir":
            cfg.out_dir = value
        elif key == "deterministic":
            cfg.deterministic = value
        else:
            raise ConfigError(f"unsupported override {key!r}")

    base = path.parent
    for name in _PATH_FIELDS:
        value = getattr(cfg.data, name)
        if value is not None and not Path(value).is_absolute():
            setattr(cfg.data, name, str((base / value).resolve()))
    if not Path(cfg.out_dir).is_absolute():
        cfg.out_dir = str((base / cfg.out_dir).resolve())
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["classifier"]["attention"]["scale_kernels"] = list(
        cfg.classifier.attention.scale_kernels
    )
    out["preprocess"]["mean"] = list(cfg.preprocess.mean)
    out["preprocess"]["std"] = list(cfg.preprocess.std)
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=True)
