"""Run configuration: nested frozen dataclasses with strict parsing.

Unknown keys are rejected with their dotted paths; every default is explicit
so a resolved config can be echoed into run artifacts and parsed back.
"""
from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .losses import KDConfig
from .relaxation import sample_seed


@dataclass(frozen=True)
class DatasetConfig:
    num_classes: int = 10
    dim: int = 32
    train_per_class: int = 100
    val_per_class: int = 50
    image_noise: float = 2.0
    # fraction of training annotations that disagree with the image content
    label_noise: float = 0.0
    imbalance_factor: float = 1.0
    seed: int = 0
    path: str | None = None


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    anchor_seed: int = 0
    synonym_noise: float = 0.2
    distractor_noise: float = 0.3
    image_noise: float = 0.1
    template_jitter: float = 0.05
    d_txt: int | None = None  # defaults to dataset.dim
    model_name: str = "openai/clip-vit-base-patch32"
    cache_dir: str | None = None


@dataclass(frozen=True)
class LexiconConfig:
    source: str = "mock"  # mock | snapshot | wordnet
    snapshot: str | None = None
    classes: tuple[str, ...] | None = None  # default: first num_classes mock-lexicon classes
    per_class_limit: int = 20
    templates: tuple[str, ...] = ("a photo of a {}",)


@dataclass(frozen=True)
class RelaxConfig:
    num_clusters: int | None = None  # default: number of classes
    top_k: int = 5
    max_iter: int = 100
    tol: float = 1e-6
    select_mode: str = "nearest-in-cluster"


@dataclass(frozen=True)
class TeacherMConfig:
    hidden: tuple[int, ...] = (64,)
    aug_strong: float = 1.0
    aug_weak: float = 0.3
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class TeacherXConfig:
    hidden: tuple[int, ...] = (64,)
    modality: str = "image+text"  # image+text | text
    bank_mode: str = "learnable"  # learnable | frozen
    bank_lr: float = 0.05
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class StudentConfig:
    hidden: tuple[int, ...] = (64,)
    aug_strength: float = 1.0
    teachers: str = "m+x"  # m+x | x | m | none
    epochs: int = 20
    lr: float = 0.05
    batch_size: int = 50
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass(frozen=True)
class MixConfig:
    p_gt: float = 0.0
    p_wn: float = 1.0
    p_noise: float = 0.0

    def __post_init__(self):
        ps = (self.p_gt, self.p_wn, self.p_noise)
        if any(p < 0 for p in ps) or abs(sum(ps) - 1) > 1e-9:
            raise ConfigError(f"mix proportions must be non-negative and sum to 1, got {ps}")


@dataclass(frozen=True)
class SeedConfig:
    init: int = 0
    order: int = 0
    mix: int = 0
    noise: int = 0
    kmeans: int = 0
    augment: int = 0


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    lexicon: LexiconConfig = field(default_factory=LexiconConfig)
    relaxation: RelaxConfig = field(default_factory=RelaxConfig)
    teacher_m: TeacherMConfig = field(default_factory=TeacherMConfig)
    teacher_x: TeacherXConfig = field(default_factory=TeacherXConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    kd: KDConfig = field(default_factory=KDConfig)
    mix: MixConfig = field(default_factory=MixConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> dict:
        return to_dict(self)

    def with_mix(self, p_gt: float, p_wn: float, p_noise: float) -> "TrainConfig":
        return replace(self, mix=MixConfig(p_gt, p_wn, p_noise))

    def with_seed(self, seed: int) -> "TrainConfig":
        """All training seeds derived from ``seed``; the dataset stays fixed."""
        return replace(self, seeds=SeedConfig(*(seed_for(seed, f.name) for f in fields(SeedConfig))))

    def with_overrides(self, **sections: dict) -> "TrainConfig":
        raw = self.to_dict()
        for name, values in sections.items():
            if name not in raw:
                raise ConfigError(f"unknown config section {name!r}")
            raw[name] = {**raw[name], **values}
        return from_dict(raw)


def seed_for(seed: int, tag: str) -> int:
    return sample_seed(seed, tag) % (2**31)


def _validate(cfg: TrainConfig) -> None:
    checks = [
        (cfg.dataset.num_classes >= 2, "dataset.num_classes must be >= 2"),
        (cfg.dataset.dim >= 1, "dataset.dim must be positive"),
        (0 <= cfg.dataset.label_noise < 1, "dataset.label_noise must lie in [0, 1)"),
        (cfg.dataset.imbalance_factor >= 1, "dataset.imbalance_factor must be >= 1"),
        (cfg.backend.kind in ("mock", "vlm"), "backend.kind must be mock or vlm"),
        (cfg.lexicon.source in ("mock", "snapshot", "wordnet"), "lexicon.source must be mock, snapshot or wordnet"),
        (cfg.lexicon.source != "snapshot" or cfg.lexicon.snapshot, "lexicon.snapshot path required"),
        (cfg.relaxation.top_k >= 1, "relaxation.top_k must be >= 1"),
        (
            cfg.relaxation.select_mode in ("nearest-in-cluster", "random-in-cluster"),
            "relaxation.select_mode must be nearest-in-cluster or random-in-cluster",
        ),
        (cfg.teacher_x.modality in ("image+text", "text"), "teacher_x.modality must be image+text or text"),
        (cfg.teacher_x.bank_mode in ("learnable", "frozen"), "teacher_x.bank_mode must be learnable or frozen"),
        (cfg.student.teachers in ("m+x", "x", "m", "none"), "student.teachers must be m+x, x, m or none"),
    ]
    for section in (cfg.teacher_m, cfg.teacher_x, cfg.student):
        checks.append((section.epochs >= 0 and section.batch_size >= 1 and section.lr > 0, "bad optimiser settings"))
    bad = [msg for ok, msg in checks if not ok]
    if bad:
        raise ConfigError("; ".join(bad))
    if cfg.lexicon.classes is not None and len(cfg.lexicon.classes) != cfg.dataset.num_classes:
        raise ConfigError("lexicon.classes length must equal dataset.num_classes")


def to_dict(obj) -> Any:
    if is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _coerce(value, hint, path: str, errors: list[str]):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if is_dataclass(hint):
        if not isinstance(value, dict):
            errors.append(f"{path}: expected a mapping")
            return None
        return _build(hint, value, path, errors)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path, errors)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            errors.append(f"{path}: expected a list")
            return None
        return tuple(_coerce(v, args[0], f"{path}[{i}]", errors) for i, v in enumerate(value))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return None
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return None
        return value
    if hint is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return None
        return value
    return value


def _build(cls, raw: dict, path: str, errors: list[str]):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            errors.append(f"unknown key {path + '.' if path else ''}{key}")
    kwargs = {}
    for f in fields(cls):
        if f.name in raw:
            kwargs[f.name] = _coerce(raw[f.name], hints[f.name], f"{path + '.' if path else ''}{f.name}", errors)
    if errors:
        return None
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        errors.append(f"{path or 'config'}: {exc}")
        return None


def from_dict(raw: dict | None) -> TrainConfig:
    errors: list[str] = []
    cfg = _build(TrainConfig, raw or {}, "", errors)
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return cfg


def load_config(path: str | Path) -> TrainConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return from_dict(raw)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)

